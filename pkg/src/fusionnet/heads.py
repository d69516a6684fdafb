"""Output layers: the span-prediction head and the ESIM-style NLI model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import dropout
from .attention import AttentionWeights, ScorerKind, new_scorer, score_matrix
from .data import NLI_LABELS, NER_TAGS, POS_TAGS, NliExample
from .encoder import ConfigError, InputConfig, InputLayer, make_vocab
from .rnn import GruParams, bilstm, gru_step, new_bilstm, new_gru
from .tensor import (
    EmptyInputError,
    ParamStore,
    ShapeError,
    Tensor,
    concat,
    index,
    log,
    matmul,
    max_,
    mean,
    softmax,
    tanh,
    transpose,
)

PROB_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# span head


@dataclass
class SpanHeadParams:
    w: Tensor  # (d,)
    W_S: Tensor  # (d, d)
    W_E: Tensor  # (d, d)
    gru: GruParams


def new_span_head(store: ParamStore, hidden: int, name: str = "head") -> SpanHeadParams:
    return SpanHeadParams(
        w=store.new(f"{name}.w", (hidden,)),
        W_S=store.new(f"{name}.W_S", (hidden, hidden)),
        W_E=store.new(f"{name}.W_E", (hidden, hidden)),
        gru=new_gru(store, f"{name}.gru", hidden, hidden),
    )


@dataclass
class SpanDistribution:
    start: Tensor
    end: Tensor

    @property
    def p_start(self) -> np.ndarray:
        return self.start.data

    @property
    def p_end(self) -> np.ndarray:
        return self.end.data


def summarize_question(u_q: Tensor, w: Tensor) -> Tensor:
    if u_q.shape[0] == 0:
        raise EmptyInputError("empty question")
    beta = softmax(matmul(u_q, w))
    return matmul(beta, u_q)


def span_scores(u_c: Tensor, q_vec: Tensor, W: Tensor) -> Tensor:
    """P_i proportional to exp(q^T W u_i)."""
    if q_vec.shape[0] != W.shape[0] or u_c.shape[1] != W.shape[1]:
        raise ShapeError(f"span_scores: q{q_vec.shape} W{W.shape} u_c{u_c.shape}")
    return softmax(matmul(u_c, matmul(q_vec, W)))


def memory_update(u_q_vec: Tensor, u_c: Tensor, p_start: Tensor, gru: GruParams) -> Tensor:
    """GRU step with the summarised question as memory and the expected start vector as input."""
    return gru_step(matmul(p_start, u_c), u_q_vec, gru)


def span_head(u_c: Tensor, u_q: Tensor, p: SpanHeadParams, drop=None) -> SpanDistribution:
    u_c = dropout.apply(drop, u_c, "head.u_c")
    u_q = dropout.apply(drop, u_q, "head.u_q")
    q = summarize_question(u_q, p.w)
    start = span_scores(u_c, q, p.W_S)
    v = memory_update(q, u_c, start, p.gru)
    end = span_scores(u_c, v, p.W_E)
    return SpanDistribution(start, end)


def span_loss(dist: SpanDistribution, gold: tuple[int, int]) -> Tensor:
    s, e = gold
    m = dist.start.shape[0]
    if not 0 <= s <= e < m:
        raise ValueError(f"gold span {gold} outside context of length {m}")
    return -(log(index(dist.start, s), PROB_FLOOR) + log(index(dist.end, e), PROB_FLOOR))


def decode_span(p_start, p_end, max_len: int = 15) -> tuple[int, int]:
    """Pair (s, e) with s <= e <= s + max_len maximising p_start[s] * p_end[e].

    Ties go to the smallest start, then the smallest end.
    """
    ps = np.asarray(p_start, dtype=float)
    pe = np.asarray(p_end, dtype=float)
    m = ps.shape[0]
    if m < 1 or pe.shape[0] != m:
        raise ValueError("decode_span needs two distributions of equal positive length")
    width = min(max_len, m - 1) + 1
    ends = np.arange(m)[:, None] + np.arange(width)[None, :]
    valid = ends < m
    band = np.where(valid, pe[np.minimum(ends, m - 1)], 0.0)
    prod = np.where(valid, ps[:, None] * band, -np.inf)
    s, d = divmod(int(np.argmax(prod)), width)
    return s, s + d


# ---------------------------------------------------------------------------
# natural language inference

NLI_VARIANTS = ("standard", "fully_aware", "multi_level")


@dataclass
class NliConfig:
    input: InputConfig = field(default_factory=InputConfig)
    hidden: int = 32
    variant: str = "multi_level"
    scorer: str = "symmetric_nl"
    dropout: float = 0.3
    seed: int = 0
    paper_dims: bool = False

    @classmethod
    def paper(cls, variant: str = "multi_level") -> "NliConfig":
        multi = variant == "multi_level"
        return cls(
            input=InputConfig(300, 600, 12, 8, use_em=multi, use_word_fusion=multi),
            hidden=300,
            variant=variant,
            paper_dims=True,
        )

    def validate(self) -> None:
        if self.variant not in NLI_VARIANTS:
            raise ConfigError(f"unknown NLI variant {self.variant!r}")
        if self.hidden % 2:
            raise ConfigError("hidden must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.scorer not in {k.value for k in ScorerKind}:
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        self.input.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NliConfig":
        d = dict(d)
        d["input"] = InputConfig(**d.get("input", {}))
        return cls(**d)


@dataclass
class NliState:
    h_low_p: Tensor
    h_high_p: Tensor
    h_low_h: Tensor
    h_high_h: Tensor
    u_p: Tensor
    u_h: Tensor
    pooled: Tensor
    logits: Tensor
    attention: dict[str, AttentionWeights] = field(default_factory=dict)


def nli_pool(u_p: Tensor, u_h: Tensor) -> Tensor:
    if u_p.shape[0] == 0 or u_h.shape[0] == 0:
        raise EmptyInputError("nli_pool over an empty side")
    return concat([mean(u_p, 0), max_(u_p, 0), mean(u_h, 0), max_(u_h, 0)], axis=0)


class NliModel:
    """ESIM with optional fully-aware and multi-level attention.

    ``standard`` scores on the top encoder layer, ``fully_aware`` on
    ``[w; h_low; h_high]``, and ``multi_level`` additionally attends each
    encoder level under its own weights and adds word-level fusion.
    """

    def __init__(self, cfg: NliConfig, vocab: dict[str, int], finetune_tokens=(), word_vectors=None):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.finetune_tokens = list(finetune_tokens)
        self.store = store = ParamStore(cfg.seed)
        multi = cfg.variant == "multi_level"
        icfg = cfg.input
        if not multi:
            # word-level fusion belongs to the multi-level variant only
            icfg = replace(icfg, use_em=False, use_word_fusion=False)
        d = cfg.hidden
        self.inputs = InputLayer(store, icfg, vocab, POS_TAGS, NER_TAGS, finetune_tokens, word_vectors)
        enc_in = icfg.enhanced_dim if multi else icfg.context_dim
        self.encoder = new_bilstm(store, "nli.encoder", enc_in, d, num_layers=2, shortcut=True)
        key_dim = d if cfg.variant == "standard" else icfg.context_dim + 2 * d
        levels = ("low", "high") if multi else ("high",)
        self.scorers = {
            (lvl, side): new_scorer(store, f"nli.att_{lvl}_{side}", cfg.scorer, key_dim, d)
            for lvl in levels
            for side in ("P", "H")
        }
        g_dim = (4 if multi else 2) * d
        self.infer_p = new_bilstm(store, "nli.infer_p", g_dim, d, num_layers=2, shortcut=True)
        self.infer_h = new_bilstm(store, "nli.infer_h", g_dim, d, num_layers=2, shortcut=True)
        u_dim = 2 * d
        self.W1 = store.new("nli.mlp.W1", (u_dim, 4 * u_dim))
        self.b1 = store.new("nli.mlp.b1", (u_dim,), scheme="zeros")
        self.W2 = store.new("nli.mlp.W2", (len(NLI_LABELS), u_dim))
        self.b2 = store.new("nli.mlp.b2", (len(NLI_LABELS),), scheme="zeros")

    @classmethod
    def for_examples(cls, cfg: NliConfig, examples, finetune_top_n: int | None = None) -> "NliModel":
        from .encoder import top_question_words

        toks = []
        for ex in examples:
            toks += ex.premise_tokens + ex.hypothesis_tokens
        n = cfg.input.finetune_top_n if finetune_top_n is None else finetune_top_n
        fine = top_question_words([ex.hypothesis_tokens + ex.premise_tokens for ex in examples], n)
        return cls(cfg, make_vocab(toks), fine)

    def forward(self, ex: NliExample, drop=None) -> NliState:
        return nli_forward(ex, self, drop)

    def loss(self, ex: NliExample, drop=None) -> Tensor:
        logits = self.forward(ex, drop).logits
        return -log(index(softmax(logits), ex.label_id), PROB_FLOOR)

    def predict(self, ex: NliExample) -> str:
        logits = self.forward(ex).logits.data
        return NLI_LABELS[int(np.argmax(logits))]

    answer = predict

    def trainable(self) -> list[Tensor]:
        return self.store.trainable()


def _side_inputs(model: NliModel, tokens, pos, ner, drop):
    g, c = model.inputs.word_and_ctx(tokens, drop)
    return g, c, model.inputs.body_vector(tokens, pos, ner, g, c)


def nli_forward(ex: NliExample, model: NliModel, drop=None) -> NliState:
    cfg = model.cfg
    if not ex.premise_tokens or not ex.hypothesis_tokens:
        raise EmptyInputError("empty premise or hypothesis")
    multi = cfg.variant == "multi_level"
    g_p, _, w_p = _side_inputs(model, ex.premise_tokens, ex.premise_pos, ex.premise_ner, drop)
    g_h, _, w_h = _side_inputs(model, ex.hypothesis_tokens, ex.hypothesis_pos, ex.hypothesis_ner, drop)
    attention = {}
    x_p, x_h = w_p, w_h
    if multi:
        x_p, att_p = model.inputs.enhance(w_p, ex.premise_tokens, ex.hypothesis_tokens, g_p, g_h, drop)
        x_h, att_h = model.inputs.enhance(w_h, ex.hypothesis_tokens, ex.premise_tokens, g_h, g_p, drop)
        if att_p is not None:
            attention["word"] = att_p
            attention["word_h"] = att_h
    hl_p, hh_p = bilstm(x_p, model.encoder, drop, return_all=True)
    hl_h, hh_h = bilstm(x_h, model.encoder, drop, return_all=True)
    if cfg.variant == "standard":
        keys_p, keys_h = hh_p, hh_h
    else:
        keys_p = concat([w_p, hl_p, hh_p], axis=1)
        keys_h = concat([w_h, hl_h, hh_h], axis=1)
    levels = {"high": (hh_p, hh_h)}
    if multi:
        levels = {"low": (hl_p, hl_h), "high": (hh_p, hh_h)}
    hat_p, hat_h = {}, {}
    for lvl, (vp, vh) in levels.items():
        # premise attends over the hypothesis: normalise each row
        s_p = score_matrix(model.scorers[(lvl, "P")], keys_p, keys_h, drop)
        a_p = softmax(s_p, axis=1)
        hat_p[lvl] = matmul(a_p, vh)
        # hypothesis attends over the premise: normalise over the premise axis
        s_h = score_matrix(model.scorers[(lvl, "H")], keys_p, keys_h, drop)
        a_h = softmax(s_h, axis=0)
        hat_h[lvl] = matmul(transpose(a_h), vp)
        attention[f"{lvl}_p"] = AttentionWeights(a_p.data, f"{lvl}_p")
        attention[f"{lvl}_h"] = AttentionWeights(a_h.data.T.copy(), f"{lvl}_h")
    if multi:
        g_in_p = concat([hl_p, hh_p, hat_p["low"], hat_p["high"]], axis=1)
        g_in_h = concat([hl_h, hh_h, hat_h["low"], hat_h["high"]], axis=1)
    else:
        g_in_p = concat([hh_p, hat_p["high"]], axis=1)
        g_in_h = concat([hh_h, hat_h["high"]], axis=1)
    u_p = concat(bilstm(g_in_p, model.infer_p, drop, return_all=True), axis=1)
    u_h = concat(bilstm(g_in_h, model.infer_h, drop, return_all=True), axis=1)
    pooled = nli_pool(u_p, u_h)
    hidden = tanh(matmul(model.W1, dropout.apply(drop, pooled, "nli.mlp.W1")) + model.b1)
    logits = matmul(model.W2, dropout.apply(drop, hidden, "nli.mlp.W2")) + model.b2
    return NliState(hl_p, hh_p, hl_h, hh_h, u_p, u_h, pooled, logits, attention)
