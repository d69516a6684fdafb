"""Attention scoring functions, attention-based fusion and word-level features."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import dropout
from .tensor import (
    EmptyInputError,
    EmptySupportError,
    ParamStore,
    ShapeError,
    Tensor,
    as_tensor,
    matmul,
    mul,
    pairwise_add,
    relu,
    reshape,
    softmax,
    sum_,
    tanh,
)


class ScorerKind(str, Enum):
    ADDITIVE_MLP = "additive_mlp"
    MULTIPLICATIVE = "multiplicative"
    SCALED_MULTIPLICATIVE = "scaled_multiplicative"
    SCALED_MULTIPLICATIVE_NL = "scaled_multiplicative_nl"
    SYMMETRIC = "symmetric"
    SYMMETRIC_NL = "symmetric_nl"


# row labels used when reporting the scorer comparison
SCORER_LABELS = {
    ScorerKind.ADDITIVE_MLP: "Additive (MLP)",
    ScorerKind.MULTIPLICATIVE: "Multiplicative",
    ScorerKind.SCALED_MULTIPLICATIVE: "Scaled Multiplicative",
    ScorerKind.SCALED_MULTIPLICATIVE_NL: "Scaled Multiplicative + ReLU",
    ScorerKind.SYMMETRIC: "Symmetric Form",
    ScorerKind.SYMMETRIC_NL: "Symmetric Form + ReLU",
}


@dataclass
class ScorerParams:
    kind: ScorerKind
    k: int
    d_h: int
    name: str = "scorer"
    U: Tensor | None = None  # (k, d_h)
    V: Tensor | None = None  # (k, d_h), multiplicative family
    D: Tensor | None = None  # (k,), diagonal of the symmetric family
    W1: Tensor | None = None  # (k, d_h), additive
    W2: Tensor | None = None
    s: Tensor | None = None  # (k,)

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.U, self.V, self.D, self.W1, self.W2, self.s) if t is not None]


_REQUIRED = {
    ScorerKind.ADDITIVE_MLP: ("W1", "W2", "s"),
    ScorerKind.MULTIPLICATIVE: ("U", "V"),
    ScorerKind.SCALED_MULTIPLICATIVE: ("U", "V"),
    ScorerKind.SCALED_MULTIPLICATIVE_NL: ("U", "V"),
    ScorerKind.SYMMETRIC: ("U", "D"),
    ScorerKind.SYMMETRIC_NL: ("U", "D"),
}


def new_scorer(store: ParamStore, name: str, kind, d_h: int, k: int) -> ScorerParams:
    kind = ScorerKind(kind)
    p = ScorerParams(kind=kind, k=k, d_h=d_h, name=name)
    for field_name in _REQUIRED[kind]:
        if field_name == "D":
            t = store.new(f"{name}.D", (k,), scheme="ones")
        elif field_name == "s":
            t = store.new(f"{name}.s", (k,))
        else:
            t = store.new(f"{name}.{field_name}", (k, d_h))
        setattr(p, field_name, t)
    return p


def _check_vec(p: ScorerParams, v: Tensor) -> None:
    if v.shape[-1] != p.d_h:
        raise ShapeError(f"{p.name}: expected width {p.d_h}, got {v.shape}")


def score(p: ScorerParams, x, y) -> Tensor:
    """Attention score S(x, y) for two single vectors.

    The symmetric kinds multiply the two projections elementwise before
    applying D, so swapping the arguments reproduces the same bits.
    """
    x, y = as_tensor(x), as_tensor(y)
    _check_vec(p, x)
    _check_vec(p, y)
    kind = p.kind
    if kind is ScorerKind.ADDITIVE_MLP:
        return sum_(mul(p.s, tanh(matmul(p.W1, x) + matmul(p.W2, y))))
    if kind is ScorerKind.SYMMETRIC or kind is ScorerKind.SYMMETRIC_NL:
        ux, uy = matmul(p.U, x), matmul(p.U, y)
        if kind is ScorerKind.SYMMETRIC_NL:
            ux, uy = relu(ux), relu(uy)
        return sum_(mul(p.D, mul(ux, uy)))
    ux, vy = matmul(p.U, x), matmul(p.V, y)
    if kind is ScorerKind.SCALED_MULTIPLICATIVE_NL:
        ux, vy = relu(ux), relu(vy)
    s = sum_(mul(ux, vy))
    if kind is not ScorerKind.MULTIPLICATIVE:
        s = mul(s, 1.0 / math.sqrt(p.k))
    return s


def score_matrix(p: ScorerParams, A: Tensor, B: Tensor, drop=None) -> Tensor:
    """All pairwise scores ``S[i, j] = S(A[i], B[j])`` as an (m, n) tensor.

    ``drop`` applies one dropout mask (keyed by the scorer name) to both
    sides before the projection, since the projection is shared.
    """
    _check_vec(p, A)
    _check_vec(p, B)
    A = dropout.apply(drop, A, p.name)
    B = dropout.apply(drop, B, p.name)
    kind = p.kind
    if kind is ScorerKind.ADDITIVE_MLP:
        m, n = A.shape[0], B.shape[0]
        hidden = tanh(pairwise_add(matmul(A, p.W1.T), matmul(B, p.W2.T)))
        return reshape(matmul(reshape(hidden, (m * n, p.k)), p.s), (m, n))
    if kind is ScorerKind.SYMMETRIC or kind is ScorerKind.SYMMETRIC_NL:
        ua, ub = matmul(A, p.U.T), matmul(B, p.U.T)
        if kind is ScorerKind.SYMMETRIC_NL:
            ua, ub = relu(ua), relu(ub)
        return matmul(mul(ua, p.D), ub.T)
    ua, vb = matmul(A, p.U.T), matmul(B, p.V.T)
    if kind is ScorerKind.SCALED_MULTIPLICATIVE_NL:
        ua, vb = relu(ua), relu(vb)
    s = matmul(ua, vb.T)
    if kind is not ScorerKind.MULTIPLICATIVE:
        s = mul(s, 1.0 / math.sqrt(p.k))
    return s


@dataclass
class AttentionWeights:
    weights: np.ndarray  # (m, n), rows sum to one
    level_tag: str

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]


def attend(scores: Tensor, values: Tensor, level_tag: str) -> tuple[Tensor, AttentionWeights]:
    """Row-softmax ``scores`` and take the weighted sum of ``values`` rows."""
    if scores.shape[1] == 0:
        raise EmptySupportError("attention over an empty body")
    alpha = softmax(scores, axis=1)
    return matmul(alpha, values), AttentionWeights(alpha.data, level_tag)


def fuse(
    keys_a: Tensor,
    keys_b: Tensor,
    values_b: Tensor,
    p: ScorerParams,
    level_tag: str = "",
    drop=None,
) -> tuple[Tensor, AttentionWeights]:
    """Fuse body B into body A.

    Scores come from the keys (the history-of-word when fully aware), the
    summed vectors from ``values_b``.
    """
    if keys_b.shape[0] == 0:
        raise EmptySupportError("fuse: body B is empty")
    if keys_b.shape[0] != values_b.shape[0]:
        raise ShapeError(f"fuse: {keys_b.shape[0]} keys but {values_b.shape[0]} values")
    return attend(score_matrix(p, keys_a, keys_b, drop), values_b, level_tag or p.name)


def new_word_fusion(store: ParamStore, name: str, dim: int) -> Tensor:
    return store.new(f"{name}.W", (dim, dim))


def word_fusion(
    context_emb: Tensor, question_emb: Tensor, W: Tensor, drop=None, key: str = "word_fusion"
) -> tuple[Tensor, AttentionWeights]:
    """Attend question embeddings with S(x, y) = relu(Wx)^T relu(Wy)."""
    if question_emb.shape[0] == 0:
        raise EmptySupportError("word_fusion: empty question")
    if context_emb.shape[1] != W.shape[1] or question_emb.shape[1] != W.shape[1]:
        raise ShapeError(f"word_fusion: embedding width does not match W{W.shape}")
    xc = dropout.apply(drop, context_emb, key)
    xq = dropout.apply(drop, question_emb, key)
    pc = relu(matmul(xc, W.T))
    pq = relu(matmul(xq, W.T))
    return attend(matmul(pc, pq.T), question_emb, "word")


def exact_match_feature(context_tokens, question_tokens) -> list[float]:
    qset = {t.lower() for t in question_tokens}
    return [1.0 if t.lower() in qset else 0.0 for t in context_tokens]


def term_frequency(context_tokens) -> list[float]:
    if not context_tokens:
        raise EmptyInputError("term_frequency of an empty context")
    lowered = [t.lower() for t in context_tokens]
    counts = Counter(lowered)
    m = len(lowered)
    return [counts[t] / m for t in lowered]
