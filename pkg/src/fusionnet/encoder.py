"""Input vectors: word embeddings, contextual vectors, tag embeddings and
word-level features.

The contextual vectors come from a frozen, randomly initialised two-layer
BiLSTM run over a frozen copy of the word embeddings. Because nothing in
that path trains, its output is cached per token sequence.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import dropout
from .attention import AttentionWeights, exact_match_feature, new_word_fusion, term_frequency, word_fusion
from .rnn import BiLstmStack, bilstm, new_bilstm
from .tensor import ParamStore, Tensor, concat, custom_op, rng_stream

UNK = "<unk>"


class ConfigError(ValueError):
    pass


@dataclass
class InputConfig:
    word_dim: int = 16
    ctx_dim: int = 16
    pos_dim: int = 4
    ner_dim: int = 4
    use_tf: bool = True
    use_em: bool = True
    use_word_fusion: bool = True
    finetune_top_n: int = 1000

    @property
    def context_dim(self) -> int:
        return self.word_dim + self.ctx_dim + self.pos_dim + self.ner_dim + int(self.use_tf)

    @property
    def enhanced_dim(self) -> int:
        return self.context_dim + int(self.use_em) + (self.word_dim if self.use_word_fusion else 0)

    @property
    def question_dim(self) -> int:
        return self.word_dim + self.ctx_dim

    def validate(self) -> None:
        if self.word_dim < 1:
            raise ConfigError("word_dim must be positive")
        if min(self.ctx_dim, self.pos_dim, self.ner_dim, self.finetune_top_n) < 0:
            raise ConfigError("input dims must be non-negative")
        if self.ctx_dim % 2:
            raise ConfigError(f"ctx_dim must be even (BiLSTM halves), got {self.ctx_dim}")


@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    matrix: Tensor
    finetune_rows: set[int] = field(default_factory=set)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def ids(self, tokens) -> np.ndarray:
        unk = self.vocab[UNK]
        return np.array([self.vocab.get(t, unk) for t in tokens], dtype=np.int64)

    def set_finetune_rows(self, rows) -> None:
        self.finetune_rows = set(int(r) for r in rows)
        mask = np.zeros((self.matrix.shape[0], 1))
        mask[sorted(self.finetune_rows)] = 1.0
        self.matrix.grad_mask = mask
        self.matrix.requires_grad = bool(self.finetune_rows)


def make_vocab(tokens) -> dict[str, int]:
    vocab = {UNK: 0}
    for t in tokens:
        if t not in vocab:
            vocab[t] = len(vocab)
    return vocab


def synthetic_embeddings(vocab: dict[str, int], dim: int, seed: int, key: str = "embedding") -> np.ndarray:
    """Fixed random vectors standing in for pretrained embeddings.

    Row values depend only on (seed, token), so growing the vocabulary does
    not change existing rows.
    """
    out = np.empty((len(vocab), dim))
    for tok, row in vocab.items():
        out[row] = rng_stream(seed, f"{key}/{tok}").normal(0.0, 1.0, size=dim)
    return out


def load_embedding_text(path) -> tuple[dict[str, int], np.ndarray]:
    """Read ``token v1 v2 ...`` lines. An ``<unk>`` row is added (zeros) if absent."""
    tokens, rows = [], []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            values = [float(v) for v in parts[1:]]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            tokens.append(parts[0])
            rows.append(values)
    if dim is None:
        raise ValueError(f"{path}: no embeddings")
    if UNK not in tokens:
        tokens.insert(0, UNK)
        rows.insert(0, [0.0] * dim)
    return {t: i for i, t in enumerate(tokens)}, np.array(rows)


def save_embedding_text(path, vocab: dict[str, int], matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, row in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in matrix[row]) + "\n")


def top_question_words(question_token_lists, n: int) -> list[str]:
    """The ``n`` most frequent question tokens; ties broken by first appearance."""
    counts = Counter()
    first = {}
    for toks in question_token_lists:
        for t in toks:
            counts[t] += 1
            first.setdefault(t, len(first))
    ranked = sorted(counts, key=lambda t: (-counts[t], first[t]))
    return ranked[:n]


def embed_lookup(tokens, table: EmbeddingTable) -> Tensor:
    """Rows of ``table`` for ``tokens``; OOV tokens get the UNK row."""
    ids = table.ids(tokens)
    M = table.matrix
    V = M.shape[0]

    def bw(g):
        gm = np.zeros((V, g.shape[1]))
        np.add.at(gm, ids, g)
        return (gm,)

    return custom_op("embed", M.data[ids], (M,), bw)


class Contextualizer:
    """Frozen BiLSTM over frozen word vectors, memoised per token sequence."""

    def __init__(self, store: ParamStore, table: EmbeddingTable, ctx_dim: int, name: str = "cove"):
        self.ctx_dim = ctx_dim
        self.table = None
        self.stack: BiLstmStack | None = None
        self._cache: dict[tuple, np.ndarray] = {}
        if ctx_dim == 0:
            return
        frozen = Tensor(table.matrix.data.copy())
        store.add(f"{name}.embedding", frozen)
        self.table = EmbeddingTable(table.vocab, frozen)
        self.stack = new_bilstm(store, f"{name}.bilstm", table.dim, ctx_dim, num_layers=2, trainable=False)

    def __call__(self, tokens) -> Tensor:
        key = tuple(tokens)
        if self.ctx_dim == 0:
            return Tensor(np.zeros((len(key), 0)))
        out = self._cache.get(key)
        if out is None:
            out = contextualize(embed_lookup(key, self.table), self.stack).data
            self._cache[key] = out
        return Tensor(out)

    def clear_cache(self) -> None:
        self._cache.clear()


def contextualize(word_emb_seq: Tensor, frozen_stack: BiLstmStack) -> Tensor:
    if any(p.requires_grad for layer in frozen_stack.layers for d in layer for p in (d.W, d.U, d.b)):
        raise ConfigError("contextualizer stack must be frozen")
    return bilstm(Tensor(word_emb_seq.data), frozen_stack)


@dataclass
class InputVectors:
    context: Tensor  # [word; ctx; pos; ner; tf]
    enhanced: Tensor  # context plus [em; word-fused embedding] when enabled
    question: Tensor  # [word; ctx]
    glove_c: Tensor
    glove_q: Tensor
    ctx_c: Tensor
    ctx_q: Tensor
    word_attention: AttentionWeights | None = None


class InputLayer:
    """Owns every table that feeds the input vectors of one model."""

    def __init__(
        self,
        store: ParamStore,
        cfg: InputConfig,
        vocab: dict[str, int],
        pos_tags,
        ner_tags,
        finetune_tokens=(),
        word_vectors: np.ndarray | None = None,
        name: str = "input",
    ):
        cfg.validate()
        self.cfg = cfg
        if word_vectors is None:
            word_vectors = synthetic_embeddings(vocab, cfg.word_dim, store.seed)
        if word_vectors.shape != (len(vocab), cfg.word_dim):
            raise ConfigError(f"word vectors {word_vectors.shape} do not match vocab/word_dim")
        word = store.add(f"{name}.word", Tensor(word_vectors.copy()))
        self.word = EmbeddingTable(vocab, word)
        self.word.set_finetune_rows(self.word.vocab[t] for t in finetune_tokens if t in self.word.vocab)
        self.pos = self._tag_table(store, f"{name}.pos", pos_tags, cfg.pos_dim)
        self.ner = self._tag_table(store, f"{name}.ner", ner_tags, cfg.ner_dim)
        self.contextualizer = Contextualizer(store, self.word, cfg.ctx_dim)
        self.fusion_W = new_word_fusion(store, f"{name}.word_fusion", cfg.word_dim) if cfg.use_word_fusion else None

    @staticmethod
    def _tag_table(store, name, tags, dim):
        if dim == 0:
            return None
        vocab = make_vocab(tags)
        t = store.new(name, (len(vocab), dim))
        return EmbeddingTable(vocab, t, set(range(len(vocab))))

    def word_and_ctx(self, tokens, drop=None) -> tuple[Tensor, Tensor]:
        g = dropout.apply(drop, embed_lookup(tokens, self.word), "embed.word", "embedding")
        c = self.contextualizer(tokens)
        if self.cfg.ctx_dim:
            c = dropout.apply(drop, c, "embed.ctx", "embedding")
        return g, c

    def body_vector(self, tokens, pos, ner, g: Tensor, c: Tensor) -> Tensor:
        """``[word; ctx; pos; ner; tf]`` for a context-like body."""
        cfg = self.cfg
        parts = [g, c]
        if cfg.pos_dim:
            if pos is None:
                raise ConfigError("pos_dim > 0 but the example has no POS tags")
            parts.append(embed_lookup(pos, self.pos))
        if cfg.ner_dim:
            if ner is None:
                raise ConfigError("ner_dim > 0 but the example has no NER tags")
            parts.append(embed_lookup(ner, self.ner))
        if cfg.use_tf:
            parts.append(Tensor(np.array(term_frequency(tokens))[:, None]))
        return concat(parts, axis=1)

    def enhance(self, w: Tensor, tokens, other_tokens, g: Tensor, g_other: Tensor, drop=None):
        """Append the exact-match flag and the word-fused embedding to ``w``."""
        parts = [w]
        att = None
        if self.cfg.use_em:
            parts.append(Tensor(np.array(exact_match_feature(tokens, other_tokens))[:, None]))
        if self.cfg.use_word_fusion:
            fused, att = word_fusion(g, g_other, self.fusion_W, drop)
            parts.append(fused)
        return (concat(parts, axis=1) if len(parts) > 1 else w), att

    def tensors(self):
        out = [self.word.matrix]
        out += [t.matrix for t in (self.pos, self.ner) if t is not None]
        if self.fusion_W is not None:
            out.append(self.fusion_W)
        return out


def build_input_vectors(example, layer: InputLayer, drop=None, word_level: bool = True) -> InputVectors:
    """Context and question input vectors for one reading-comprehension example.

    ``word_level=False`` leaves out the exact-match flag and the word-fused
    embedding even when the config enables them.
    """
    ctoks, qtoks = example.context_tokens, example.question_tokens
    g_c, c_c = layer.word_and_ctx(ctoks, drop)
    g_q, c_q = layer.word_and_ctx(qtoks, drop)
    w_c = layer.body_vector(ctoks, example.pos, example.ner, g_c, c_c)
    w_q = concat([g_q, c_q], axis=1)
    enhanced, att = w_c, None
    if word_level:
        enhanced, att = layer.enhance(w_c, ctoks, qtoks, g_c, g_q, drop)
    return InputVectors(w_c, enhanced, w_q, g_c, g_q, c_c, c_q, att)
