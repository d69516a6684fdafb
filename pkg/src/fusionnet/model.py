"""FusionNet: reading, question understanding, multi-level fusion and
self-boosted fusion, plus the ablation configurations built from the same
parts.

Fusion modes
    ``high_level``      standard attention on the top reading layer only
    ``fa_high_level``   same, but scored on the history-of-word
    ``fa_all_level``    one fully-aware attention over the whole question
                        history-of-word
    ``fa_multi_level``  separate fully-aware attention per level, followed by
                        the self-boost selected by ``self_mode``

Only ``fa_multi_level`` uses word-level fusion (the exact-match flag and
the attended question embeddings); the other three are the vanilla
baselines and read the plain input vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import dropout
from .attention import AttentionWeights, ScorerKind, ScorerParams, fuse, new_scorer
from .data import NER_TAGS, POS_TAGS, MrcExample
from .encoder import ConfigError, InputConfig, InputLayer, InputVectors, build_input_vectors, make_vocab, top_question_words
from .heads import SpanDistribution, decode_span, new_span_head, span_head, span_loss
from .rnn import BiLstmStack, bilstm, new_bilstm
from .tensor import EmptyInputError, ParamStore, ShapeError, Tensor, concat

FUSION_MODES = ("high_level", "fa_high_level", "fa_all_level", "fa_multi_level")
SELF_MODES = ("none", "normal", "fully_aware")

# (fusion, self) cells of the configuration comparison, with report labels
CONFIG_GRID = [
    ("high_level", "none", "High-Level", "None"),
    ("fa_high_level", "none", "FA High-Level", "None"),
    ("fa_all_level", "none", "FA All-Level", "None"),
    ("fa_multi_level", "none", "FA Multi-Level", "None"),
    ("fa_multi_level", "normal", "FA Multi-Level", "Normal"),
    ("fa_multi_level", "fully_aware", "FA Multi-Level", "FA"),
]


@dataclass
class ModelConfig:
    input: InputConfig = field(default_factory=InputConfig)
    hidden: int = 32
    att_k: int = 32
    scorer: str = "symmetric_nl"
    fusion_mode: str = "fa_multi_level"
    self_mode: str = "fully_aware"
    share_cq: bool = True
    dropout: float = 0.4
    span_max_len: int = 15
    paper_dims: bool = False
    appendix_self_how: bool = False
    # None: word-level fusion (EM + attended word vectors) only in fa_multi_level
    word_fusion: bool | None = None
    seed: int = 0

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        cfg = cls(input=InputConfig(300, 600, 12, 8), hidden=250, att_k=250, paper_dims=True)
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.self_mode not in SELF_MODES:
            raise ConfigError(f"unknown self_mode {self.self_mode!r}")
        if self.fusion_mode != "fa_multi_level" and self.self_mode != "none":
            raise ConfigError(f"{self.fusion_mode} has no self-boosted fusion; use self_mode='none'")
        if self.hidden % 2:
            raise ConfigError("hidden must be even (it is split across directions)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.span_max_len < 0:
            raise ConfigError("span_max_len must be >= 0")
        if self.scorer not in {k.value for k in ScorerKind}:
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        self.input.validate()

    @property
    def word_level(self) -> bool:
        if self.word_fusion is not None:
            return self.word_fusion
        return self.fusion_mode == "fa_multi_level"

    @property
    def fusion_how_dim(self) -> int:
        return self.input.word_dim + self.input.ctx_dim + 2 * self.hidden

    @property
    def self_how_dim(self) -> int:
        base = self.input.enhanced_dim if self.appendix_self_how else self.input.word_dim + self.input.ctx_dim
        return base + 6 * self.hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input"] = InputConfig(**d.get("input", {}))
        return cls(**d)


@dataclass
class FusionState:
    inputs: InputVectors
    h_low_c: Tensor
    h_high_c: Tensor
    h_low_q: Tensor
    h_high_q: Tensor
    u_q: Tensor
    u_c: Tensor
    how_c: Tensor | None = None
    how_q: Tensor | None = None
    hat_low_c: Tensor | None = None
    hat_high_c: Tensor | None = None
    hat_u_c: Tensor | None = None
    v_c: Tensor | None = None
    v_hat_c: Tensor | None = None
    self_how: Tensor | None = None
    attention: dict[str, AttentionWeights] = field(default_factory=dict)


class FusionNetParams:
    """Every trainable and frozen tensor of a FusionNet encoder, built for one config."""

    def __init__(self, cfg: ModelConfig, store: ParamStore, vocab: dict[str, int], finetune_tokens=(), word_vectors=None):
        cfg.validate()
        self.cfg = cfg
        icfg = cfg.input
        h, k = cfg.hidden, cfg.att_k
        self.inputs = InputLayer(store, icfg, vocab, POS_TAGS, NER_TAGS, finetune_tokens, word_vectors)
        c_in = icfg.enhanced_dim if cfg.word_level else icfg.context_dim
        self.read_low_c = new_bilstm(store, "read.low_c", c_in, h)
        self.read_low_q = new_bilstm(store, "read.low_q", icfg.question_dim, h)
        self.read_high_c = new_bilstm(store, "read.high_c", h, h)
        self.read_high_q = self.read_high_c if cfg.share_cq else new_bilstm(store, "read.high_q", h, h)
        how = cfg.fusion_how_dim
        mode = cfg.fusion_mode
        self.scorers: dict[str, ScorerParams] = {}
        self.question_stack: BiLstmStack | None = None
        self.final_stack: BiLstmStack | None = None
        if mode in ("high_level", "fa_high_level"):
            d_h = h if mode == "high_level" else how
            self.scorers["high"] = new_scorer(store, "fuse.high", cfg.scorer, d_h, k)
            self.mix_stack = new_bilstm(store, "mix", 2 * h, h, num_layers=2)
        elif mode == "fa_all_level":
            self.scorers["all"] = new_scorer(store, "fuse.all", cfg.scorer, how, k)
            self.question_stack = new_bilstm(store, "understand.q", how, h)
            self.mix_stack = new_bilstm(store, "mix", 2 * how, h, num_layers=2)
        else:
            self.question_stack = new_bilstm(store, "understand.q", 2 * h, h)
            for lvl in ("low", "high", "understanding"):
                self.scorers[lvl] = new_scorer(store, f"fuse.{lvl}", cfg.scorer, how, k)
            layers = 2 if cfg.self_mode == "none" else 1
            self.mix_stack = new_bilstm(store, "mix", 5 * h, h, num_layers=layers)
            if cfg.self_mode == "normal":
                self.scorers["self"] = new_scorer(store, "fuse.self", cfg.scorer, h, k)
            elif cfg.self_mode == "fully_aware":
                self.scorers["self"] = new_scorer(store, "fuse.self", cfg.scorer, cfg.self_how_dim, k)
            if cfg.self_mode != "none":
                self.final_stack = new_bilstm(store, "understand.c", 2 * h, h)


# ---------------------------------------------------------------------------
# components


def reading(inputs_c: Tensor, inputs_q: Tensor, params: FusionNetParams, drop=None):
    """Low- and high-level concepts for both sides (two plain BiLSTM layers)."""
    if inputs_c.shape[0] == 0 or inputs_q.shape[0] == 0:
        raise EmptyInputError("reading needs non-empty context and question")
    h_low_c = bilstm(inputs_c, params.read_low_c, drop)
    h_low_q = bilstm(inputs_q, params.read_low_q, drop)
    h_high_c = bilstm(h_low_c, params.read_high_c, drop)
    h_high_q = bilstm(h_low_q, params.read_high_q, drop)
    return h_low_c, h_high_c, h_low_q, h_high_q


def question_understanding(h_low_q: Tensor, h_high_q: Tensor, stack: BiLstmStack, drop=None) -> Tensor:
    if h_low_q.shape[0] != h_high_q.shape[0]:
        raise ShapeError("question levels differ in length")
    return bilstm(concat([h_low_q, h_high_q], axis=1), stack, drop)


def build_fusion_how(glove: Tensor, ctx: Tensor, h_low: Tensor, h_high: Tensor) -> Tensor:
    """History-of-word ``[word; ctx; low; high]`` per token."""
    return concat([glove, ctx, h_low, h_high], axis=1)


def multilevel_fuse(how_c, how_q, h_low_q, h_high_q, u_q, scorers: dict, drop=None):
    """Three independent fully-aware attentions keyed on the same history-of-word."""
    hat_low, a_low = fuse(how_c, how_q, h_low_q, scorers["low"], "low", drop)
    hat_high, a_high = fuse(how_c, how_q, h_high_q, scorers["high"], "high", drop)
    hat_u, a_u = fuse(how_c, how_q, u_q, scorers["understanding"], "understanding", drop)
    return hat_low, hat_high, hat_u, (a_low, a_high, a_u)


def mix_context(h_low_c, h_high_c, hat_low_c, hat_high_c, hat_u_c, stack: BiLstmStack, drop=None) -> Tensor:
    return bilstm(concat([h_low_c, h_high_c, hat_low_c, hat_high_c, hat_u_c], axis=1), stack, drop)


def self_boost(
    glove_c,
    ctx_c,
    h_low_c,
    h_high_c,
    hat_low_c,
    hat_high_c,
    hat_u_c,
    v_c,
    scorer: ScorerParams | None,
    final_stack: BiLstmStack | None,
    mode: str,
    drop=None,
    enhanced_c: Tensor | None = None,
):
    """Fuse the context into itself.

    ``fully_aware`` scores on the eight-part history-of-word (or, with
    ``enhanced_c``, on the full input vector in place of ``[word; ctx]``);
    ``normal`` scores on ``v_c`` alone; ``none`` returns ``v_c`` untouched,
    which is then already the final representation.
    Returns ``(u_c, v_hat, weights, self_how)``.
    """
    if mode == "none":
        return v_c, None, None, None
    if mode == "fully_aware":
        head = [enhanced_c] if enhanced_c is not None else [glove_c, ctx_c]
        keys = concat(head + [h_low_c, h_high_c, hat_low_c, hat_high_c, hat_u_c, v_c], axis=1)
    elif mode == "normal":
        keys = v_c
    else:
        raise ConfigError(f"unknown self_mode {mode!r}")
    v_hat, att = fuse(keys, keys, v_c, scorer, "self", drop)
    u_c = bilstm(concat([v_c, v_hat], axis=1), final_stack, drop)
    return u_c, v_hat, att, (keys if mode == "fully_aware" else None)


def forward(cfg: ModelConfig, example: MrcExample, params: FusionNetParams, drop=None) -> FusionState:
    """Understanding vectors for context and question under ``cfg``."""
    if not example.context_tokens or not example.question_tokens:
        raise EmptyInputError("empty context or question")
    iv = build_input_vectors(example, params.inputs, drop, word_level=cfg.word_level)
    h_low_c, h_high_c, h_low_q, h_high_q = reading(iv.enhanced, iv.question, params, drop)
    attention = {}
    if iv.word_attention is not None:
        attention["word"] = iv.word_attention
    mode = cfg.fusion_mode
    if mode in ("high_level", "fa_high_level"):
        if mode == "high_level":
            keys_c, keys_q = h_high_c, h_high_q
            how_c = how_q = None
        else:
            how_c = keys_c = build_fusion_how(iv.glove_c, iv.ctx_c, h_low_c, h_high_c)
            how_q = keys_q = build_fusion_how(iv.glove_q, iv.ctx_q, h_low_q, h_high_q)
        hat_high, att = fuse(keys_c, keys_q, h_high_q, params.scorers["high"], "high", drop)
        attention["high"] = att
        u_c = bilstm(concat([h_high_c, hat_high], axis=1), params.mix_stack, drop)
        return FusionState(iv, h_low_c, h_high_c, h_low_q, h_high_q, h_high_q, u_c,
                           how_c=how_c, how_q=how_q, hat_high_c=hat_high, attention=attention)
    how_c = build_fusion_how(iv.glove_c, iv.ctx_c, h_low_c, h_high_c)
    how_q = build_fusion_how(iv.glove_q, iv.ctx_q, h_low_q, h_high_q)
    if mode == "fa_all_level":
        hat_how, att = fuse(how_c, how_q, how_q, params.scorers["all"], "all", drop)
        attention["all"] = att
        u_c = bilstm(concat([how_c, hat_how], axis=1), params.mix_stack, drop)
        u_q = bilstm(how_q, params.question_stack, drop)
        return FusionState(iv, h_low_c, h_high_c, h_low_q, h_high_q, u_q, u_c,
                           how_c=how_c, how_q=how_q, attention=attention)
    u_q = question_understanding(h_low_q, h_high_q, params.question_stack, drop)
    hat_low, hat_high, hat_u, (a_low, a_high, a_u) = multilevel_fuse(
        how_c, how_q, h_low_q, h_high_q, u_q, params.scorers, drop
    )
    attention.update(low=a_low, high=a_high, understanding=a_u)
    v_c = mix_context(h_low_c, h_high_c, hat_low, hat_high, hat_u, params.mix_stack, drop)
    u_c, v_hat, a_self, self_how = self_boost(
        iv.glove_c, iv.ctx_c, h_low_c, h_high_c, hat_low, hat_high, hat_u, v_c,
        params.scorers.get("self"), params.final_stack, cfg.self_mode, drop,
        enhanced_c=iv.enhanced if cfg.appendix_self_how else None,
    )
    if a_self is not None:
        attention["self"] = a_self
    return FusionState(iv, h_low_c, h_high_c, h_low_q, h_high_q, u_q, u_c, how_c, how_q,
                       hat_low, hat_high, hat_u, v_c, v_hat, self_how, attention)


# ---------------------------------------------------------------------------
# reading-comprehension model


class MrcModel:
    """FusionNet encoder plus span head, with its own parameter store."""

    def __init__(self, cfg: ModelConfig, vocab: dict[str, int], finetune_tokens=(), word_vectors=None):
        self.cfg = cfg
        self.store = ParamStore(cfg.seed)
        self.vocab = vocab
        self.finetune_tokens = list(finetune_tokens)
        self.params = FusionNetParams(cfg, self.store, vocab, self.finetune_tokens, word_vectors)
        self.head = new_span_head(self.store, cfg.hidden)

    @classmethod
    def for_examples(cls, cfg: ModelConfig, train, extra=(), word_vectors=None) -> "MrcModel":
        """Vocabulary over ``train`` and ``extra``; fine-tune the top question words of ``train``."""
        toks = []
        for ex in list(train) + list(extra):
            toks += ex.context_tokens + ex.question_tokens
        fine = top_question_words([ex.question_tokens for ex in train], cfg.input.finetune_top_n)
        return cls(cfg, make_vocab(toks), fine, word_vectors)

    def encode(self, example: MrcExample, drop=None) -> FusionState:
        return forward(self.cfg, example, self.params, drop)

    def distribution(self, example: MrcExample, drop=None) -> tuple[SpanDistribution, FusionState]:
        state = self.encode(example, drop)
        return span_head(state.u_c, state.u_q, self.head, drop), state

    def loss(self, example: MrcExample, drop=None) -> Tensor:
        dist, _ = self.distribution(example, drop)
        return span_loss(dist, (example.answer_start, example.answer_end))

    def predict(self, example: MrcExample) -> tuple[int, int]:
        dist, _ = self.distribution(example)
        return decode_span(dist.p_start, dist.p_end, self.cfg.span_max_len)

    def answer(self, example: MrcExample) -> str:
        s, e = self.predict(example)
        return example.span_text(s, e)

    def trainable(self) -> list[Tensor]:
        return self.store.trainable()


def dimension_report(cfg: ModelConfig, state: FusionState) -> dict[str, int]:
    """Per-token widths of the main representations in ``state``."""
    out = {
        "context_input": state.inputs.context.shape[1],
        "enhanced_context_input": state.inputs.enhanced.shape[1],
        "question_input": state.inputs.question.shape[1],
        "h_low": state.h_low_c.shape[1],
        "h_high": state.h_high_c.shape[1],
        "u_q": state.u_q.shape[1],
        "u_c": state.u_c.shape[1],
        "att_k": cfg.att_k,
    }
    if state.how_c is not None:
        out["fusion_how"] = state.how_c.shape[1]
    if state.self_how is not None:
        out["self_how"] = state.self_how.shape[1]
    return out
