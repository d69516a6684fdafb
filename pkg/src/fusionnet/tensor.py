"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Graph` is an append-only tape. While a graph is active (``with
Graph() as g:``), every operation whose inputs require gradients appends a
node holding its inputs and a vector-Jacobian closure. ``g.backward(loss)``
walks the tape in reverse append order and accumulates into ``.grad`` of the
leaf tensors. Outside an active graph nothing is recorded, which is the
inference path.

Sequences are stored as matrices with one row per token.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the floating-point type used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


class ShapeError(ValueError):
    pass


class EmptySupportError(ValueError):
    """Raised when a softmax or attention has no position to put mass on."""


class EmptyInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random streams


def stream_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_stream(seed: int, key) -> np.random.Generator:
    """PCG64 generator for the stream ``(seed, key)``.

    ``key`` may be an int or any string; strings are hashed with blake2b so
    the stream id does not depend on Python's hash randomisation.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(key)])
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# graph


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _active_graph() -> "Graph | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op: str, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        out.node_id = len(self.nodes)
        out._graph = self
        self.nodes.append(_Node(op, out, inputs, backward))

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] | None = None) -> dict:
        return backward(self, loss, params)


def backward(graph: Graph, loss: "Tensor", params: Iterable["Tensor"] | None = None) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Leaf tensors accumulate into ``.grad`` (so repeated calls sum, which is
    how batches are accumulated). Interior gradients are returned keyed by
    node id. Tensors in ``params`` that the loss does not reach get a zero
    gradient rather than ``None``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad and loss._graph is graph:
        grads[loss.node_id] = np.ones_like(loss.data)
    elif loss.requires_grad:
        loss._accumulate(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        g = grads.get(node.out.node_id)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._graph is graph:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
            else:
                inp._accumulate(ig)
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
    return grads


# ---------------------------------------------------------------------------
# tensor


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == _DTYPE:
        return x
    return np.asarray(x, dtype=_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_graph", "name", "grad_mask")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._graph: Graph | None = None
        self.name = name
        # row mask for leaves whose gradient only reaches some rows (embeddings)
        self.grad_mask: np.ndarray | None = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad_mask is not None:
            g = g * self.grad_mask
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        graph = _active_graph()
        if graph is not None:
            out.requires_grad = True
            graph.record(op, out, inputs, backward)
    return out


def custom_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a fused operation; ``backward(g)`` returns one gradient per input."""
    return _make(op, _as_array(data), tuple(inputs), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient flows where the floor is active."""
    xd = x.data
    if floor > 0.0:
        clipped = np.maximum(xd, floor)
        live = xd > floor
        return _make("log", np.log(clipped), (x,), lambda g: (g * live / clipped,))
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def _note_branch(pattern: np.ndarray) -> None:
    # piecewise ops report which piece they took while grad_check listens
    rec = getattr(_local, "branches", None)
    if rec is not None:
        rec.append(np.asarray(pattern).tobytes())


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    _note_branch(live)
    return _make("relu", np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (vector-matrix, matrix-vector, matrix-matrix)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd)
            else:
                ga = g @ bd.T
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            elif bd.ndim == 1:
                gb = ad.T @ g
            else:
                gb = ad.T @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    return _make("transpose", x.data.T, (x,), lambda g: (g.T,))


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.sum(x.data, axis=axis), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def max_(x: Tensor, axis: int = 0) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    _note_branch(idx)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("max", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _is_basic(idx)

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make("index", x.data[idx], (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[d] != parts[0].shape[d] for d in range(p.ndim) if d != ax
        ):
            raise ShapeError(f"concat shape disagreement: {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    n = len(parts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make("stack", np.stack([p.data for p in parts], axis=axis), tuple(parts), bw)


def pairwise_add(a: Tensor, b: Tensor) -> Tensor:
    """``out[i, j] = a[i] + b[j]`` for ``a`` of shape (m, k) and ``b`` of shape (n, k)."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_add width mismatch {a.shape} vs {b.shape}")
    out = a.data[:, None, :] + b.data[None, :, :]
    return _make("pairwise_add", out, (a, b), lambda g: (g.sum(axis=1), g.sum(axis=0)))


def softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` after subtracting the max over unmasked entries.

    ``mask`` marks positions that may receive weight (True = allowed);
    disallowed positions get exactly zero.
    """
    xd = x.data
    if xd.shape[axis] == 0:
        raise EmptySupportError("softmax over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not np.all(mask.any(axis=axis)):
            raise EmptySupportError("softmax with every position masked")
        shifted = np.where(mask, xd, -np.inf)
    else:
        shifted = xd
    m = np.max(shifted, axis=axis, keepdims=True)
    e = np.exp(shifted - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


softmax_stable = softmax


# ---------------------------------------------------------------------------
# parameters and gradient checking


def init_param(shape, scheme: str = "uniform_fan_in", seed: int = 0, key="param") -> Tensor:
    """Fresh trainable tensor.

    ``uniform_fan_in`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    fan_in the last dimension.
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid parameter shape {shape}")
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "ones":
        data = np.ones(shape)
    elif scheme == "uniform_fan_in":
        bound = 1.0 / np.sqrt(shape[-1])
        data = rng_stream(seed, key).uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True, name=str(key))


def _evaluate(f: Callable[[], Tensor]) -> tuple[float, bytes]:
    """``f()`` as a float plus a digest of every piecewise branch it took."""
    _local.branches = []
    try:
        value = f().item()
        digest = hashlib.blake2b(b"|".join(_local.branches), digest_size=16).digest()
    finally:
        _local.branches = None
    return value, digest


class GradCheckReport:
    def __init__(self):
        self.max_rel_error = 0.0
        self.checked = 0
        self.on_kink = 0  # coordinates sitting on a relu/max kink at every step size
        self.worst: tuple | None = None  # (param index, flat index, analytic, numeric)


def grad_check_report(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    min_eps: float | None = None,
    order: int = 2,
) -> GradCheckReport:
    """Compare tape gradients with central differences, coordinate by coordinate.

    ``f`` rebuilds the scalar from ``params`` on every call and must be
    deterministic. With ``max_coords`` only that many randomly chosen
    coordinates per tensor are perturbed. The relative error of a coordinate
    is ``|a - n| / max(|a|, |n|, 1e-8)``.

    A difference quotient taken across a relu or max kink measures neither
    one-sided slope, so when the branches taken at ``x +- eps`` differ from
    those at ``x`` the step is divided by 10 (down to ``min_eps``, default
    ``eps / 1000``). Coordinates still straddling a kink are counted in
    ``on_kink`` and left out of the maximum.

    ``order=2`` is the plain ``(f(x+h) - f(x-h)) / 2h``; ``order=4`` uses the
    five-point central stencil, whose O(h^4) truncation error allows a step
    large enough to keep rounding noise well below the 1e-8 floor on deep
    networks whose smallest gradients are tiny.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (1, -1) if order == 2 else (1, -1, 2, -2)
    if min_eps is None:
        min_eps = eps / 1000
    for p in params:
        p.grad = None
    with Graph() as g:
        loss = f()
    backward(g, loss, params)
    analytic = [p.grad.copy() for p in params]
    _, base = _evaluate(f)
    rng = rng_stream(seed, "grad_check")
    rep = GradCheckReport()
    for k, (p, a) in enumerate(zip(params, analytic)):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if p.grad_mask is not None:
            # frozen rows carry no tape gradient by design
            coords = np.flatnonzero(np.broadcast_to(p.grad_mask, p.shape).reshape(-1))
        if max_coords is not None and coords.size > max_coords:
            coords = rng.choice(coords, size=max_coords, replace=False)
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            h = eps
            num = None
            while h >= min_eps * (1 - 1e-12):
                vals, same = [], True
                for o in offsets:
                    flat[i] = orig + o * h
                    v, sig = _evaluate(f)
                    vals.append(v)
                    same = same and sig == base
                flat[i] = orig
                if same:
                    if order == 2:
                        num = (vals[0] - vals[1]) / (2 * h)
                    else:
                        num = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * h)
                    break
                h /= 10
            if num is None:
                rep.on_kink += 1
                continue
            rep.checked += 1
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), 1e-8)
            if err > rep.max_rel_error:
                rep.max_rel_error = err
                rep.worst = (k, int(i), float(a_flat[i]), float(num))
    for p in params:
        p.grad = None
    return rep


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    order: int = 2,
) -> float:
    """Largest relative error between tape gradients and central differences.

    See ``grad_check_report`` for the details.
    """
    return grad_check_report(f, params, eps, max_coords, seed, order=order).max_rel_error


class ParamStore:
    """Named tensors of one model, created deterministically from ``seed``.

    Every tensor draws from its own stream ``(seed, name)``, so adding a
    parameter never shifts the initial values of the others.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.tensors: dict[str, Tensor] = {}

    def new(self, name: str, shape, scheme: str = "uniform_fan_in", trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = init_param(shape, scheme, self.seed, name)
        t.requires_grad = trainable
        self.tensors[name] = t
        return t

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.name = name
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None
