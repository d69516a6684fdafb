"""LSTM, GRU and stacked bidirectional LSTM encoders.

Gate order in the stacked weight matrices is (input, forget, output,
candidate) for the LSTM and (update, reset, candidate) for the GRU.
``lstm_sequence`` runs a whole direction as a single tape node with a
hand-written BPTT backward; ``lstm_step`` builds the same cell from
primitive ops and serves as its reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dropout
from .tensor import (
    EmptyInputError,
    ParamStore,
    ShapeError,
    Tensor,
    _sigmoid,
    concat,
    custom_op,
    matmul,
    sigmoid,
    tanh,
)


@dataclass
class LstmParams:
    W: Tensor  # (4h, input_dim)
    U: Tensor  # (4h, h)
    b: Tensor  # (4h,)

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]


@dataclass
class GruParams:
    W: Tensor  # (3h, input_dim)
    U: Tensor  # (3h, h)
    b: Tensor  # (3h,)

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]


@dataclass
class BiLstmStack:
    name: str
    layers: list[tuple[LstmParams, LstmParams]] = field(default_factory=list)
    shortcut: bool = False

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].input_dim

    @property
    def output_dim(self) -> int:
        return 2 * self.layers[-1][0].hidden_dim


def new_lstm(store: ParamStore, name: str, input_dim: int, hidden_dim: int, trainable: bool = True) -> LstmParams:
    W = store.new(f"{name}.W", (4 * hidden_dim, input_dim), trainable=trainable)
    U = store.new(f"{name}.U", (4 * hidden_dim, hidden_dim), trainable=trainable)
    b = store.new(f"{name}.b", (4 * hidden_dim,), scheme="zeros", trainable=trainable)
    b.data[hidden_dim : 2 * hidden_dim] = 1.0
    return LstmParams(W, U, b)


def new_gru(store: ParamStore, name: str, input_dim: int, hidden_dim: int) -> GruParams:
    return GruParams(
        store.new(f"{name}.W", (3 * hidden_dim, input_dim)),
        store.new(f"{name}.U", (3 * hidden_dim, hidden_dim)),
        store.new(f"{name}.b", (3 * hidden_dim,), scheme="zeros"),
    )


def new_bilstm(
    store: ParamStore,
    name: str,
    input_dim: int,
    output_dim: int,
    num_layers: int = 1,
    shortcut: bool = False,
    trainable: bool = True,
) -> BiLstmStack:
    if output_dim % 2:
        raise ShapeError(f"BiLSTM output dim must be even, got {output_dim}")
    hidden = output_dim // 2
    stack = BiLstmStack(name=name, shortcut=shortcut)
    layer_in = input_dim
    for layer in range(num_layers):
        fwd = new_lstm(store, f"{name}.l{layer}.fwd", layer_in, hidden, trainable)
        bwd = new_lstm(store, f"{name}.l{layer}.bwd", layer_in, hidden, trainable)
        stack.layers.append((fwd, bwd))
        layer_in = output_dim + (input_dim if shortcut else 0)
    return stack


# ---------------------------------------------------------------------------
# single steps


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    n = p.hidden_dim
    if x.shape != (p.input_dim,) or h.shape != (n,) or c.shape != (n,):
        raise ShapeError(f"lstm_step got x{x.shape} h{h.shape} c{c.shape} for {p.input_dim}->{n}")
    a = matmul(p.W, x) + matmul(p.U, h) + p.b
    i = sigmoid(a[0:n])
    f = sigmoid(a[n : 2 * n])
    o = sigmoid(a[2 * n : 3 * n])
    g = tanh(a[3 * n :])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


def gru_step(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    n = p.hidden_dim
    if x.shape != (p.input_dim,) or h.shape != (n,):
        raise ShapeError(f"gru_step got x{x.shape} h{h.shape} for {p.input_dim}->{n}")
    wx = matmul(p.W, x) + p.b
    z = sigmoid(wx[0:n] + matmul(p.U[0:n], h))
    r = sigmoid(wx[n : 2 * n] + matmul(p.U[n : 2 * n], h))
    cand = tanh(wx[2 * n :] + matmul(p.U[2 * n :], r * h))
    return (1.0 - z) * h + z * cand


# ---------------------------------------------------------------------------
# fused sequence pass


def lstm_sequence(X: Tensor, p: LstmParams, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over the rows of ``X`` from zero initial state."""
    if X.ndim != 2 or X.shape[1] != p.input_dim:
        raise ShapeError(f"lstm_sequence expects (T, {p.input_dim}), got {X.shape}")
    T = X.shape[0]
    if T == 0:
        raise EmptyInputError("empty sequence")
    n = p.hidden_dim
    Xd = X.data[::-1] if reverse else X.data
    W, U = p.W.data, p.U.data
    pre = Xd @ W.T + p.b.data
    gates = np.empty((T, 4 * n))
    cells = np.empty((T + 1, n))
    hs = np.empty((T + 1, n))
    cells[0] = 0.0
    hs[0] = 0.0
    for t in range(T):
        a = pre[t] + U @ hs[t]
        s = _sigmoid(a[: 3 * n])
        g = np.tanh(a[3 * n :])
        gates[t, : 3 * n] = s
        gates[t, 3 * n :] = g
        cells[t + 1] = s[n : 2 * n] * cells[t] + s[:n] * g
        hs[t + 1] = s[2 * n : 3 * n] * np.tanh(cells[t + 1])
    out = hs[1:]
    if reverse:
        out = out[::-1]

    def bw(G):
        if reverse:
            G = G[::-1]
        dA = np.empty((T, 4 * n))
        dh_next = np.zeros(n)
        dc_next = np.zeros(n)
        for t in range(T - 1, -1, -1):
            i = gates[t, :n]
            f = gates[t, n : 2 * n]
            o = gates[t, 2 * n : 3 * n]
            g = gates[t, 3 * n :]
            tc = np.tanh(cells[t + 1])
            dh = G[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da = dA[t]
            da[:n] = dc * g * i * (1.0 - i)
            da[n : 2 * n] = dc * cells[t] * f * (1.0 - f)
            da[2 * n : 3 * n] = dh * tc * o * (1.0 - o)
            da[3 * n :] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = U.T @ da
        dX = dA @ W
        if reverse:
            dX = dX[::-1]
        return dX, dA.T @ Xd, dA.T @ hs[:-1], dA.sum(axis=0)

    return custom_op("lstm_sequence", np.ascontiguousarray(out), (X, p.W, p.U, p.b), bw)


def lstm_sequence_reference(X: Tensor, p: LstmParams, reverse: bool = False) -> Tensor:
    """Same result as :func:`lstm_sequence`, composed from :func:`lstm_step`."""
    from .tensor import stack

    T = X.shape[0]
    h = Tensor(np.zeros(p.hidden_dim))
    c = Tensor(np.zeros(p.hidden_dim))
    outs = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, c = lstm_step(X[t], h, c, p)
        outs[t] = h
    return stack(outs, axis=0)


def bilstm(
    seq: Tensor,
    stack: BiLstmStack,
    drop: dropout.DropoutPolicy | None = None,
    return_all: bool = False,
):
    """Stacked bidirectional LSTM over the rows of ``seq``.

    Each layer's input receives one dropout mask (keyed by stack and layer)
    shared across all time steps. With ``shortcut`` every layer after the
    first sees ``[raw input; previous layer output]``. Returns the last
    layer's output, or the list of all layer outputs with ``return_all``.
    """
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise EmptyInputError(f"bilstm needs a non-empty (T, d) sequence, got {seq.shape}")
    if seq.shape[1] != stack.input_dim:
        raise ShapeError(f"{stack.name}: expected input dim {stack.input_dim}, got {seq.shape[1]}")
    outputs = []
    layer_in = seq
    for li, (fwd, bwd) in enumerate(stack.layers):
        x = dropout.apply(drop, layer_in, f"{stack.name}.l{li}")
        h = concat([lstm_sequence(x, fwd), lstm_sequence(x, bwd, reverse=True)], axis=1)
        outputs.append(h)
        layer_in = concat([seq, h], axis=1) if stack.shortcut else h
    return outputs if return_all else outputs[-1]

