"""Example records, tokenisation, synthetic tasks, EM/F1 and attention export."""

from __future__ import annotations

import collections
import json
import re
import string
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import rng_stream

POS_TAGS = ["NN", "NNP", "CD", "VB", "VBZ", "DT", "RB", "JJ", "SYM", "PUNCT", "WP"]
NER_TAGS = ["O", "ENT", "NUM", "PER"]
NLI_LABELS = ["entailment", "contradiction", "neutral"]


class DatasetError(ValueError):
    pass


@dataclass
class MrcExample:
    id: str
    context_tokens: list[str]
    question_tokens: list[str]
    answer_start: int
    answer_end: int
    answers: list[str] = field(default_factory=list)
    pos: list[str] | None = None
    ner: list[str] | None = None
    family: str = "plain"

    def __post_init__(self):
        m = len(self.context_tokens)
        if not 0 <= self.answer_start <= self.answer_end < m:
            raise DatasetError(
                f"example {self.id}: answer span ({self.answer_start}, {self.answer_end}) "
                f"outside context of length {m}"
            )
        for name in ("pos", "ner"):
            tags = getattr(self, name)
            if tags is not None and len(tags) != m:
                raise DatasetError(f"example {self.id}: {len(tags)} {name} tags for {m} tokens")
        if not self.answers:
            self.answers = [self.span_text(self.answer_start, self.answer_end)]

    def span_text(self, s: int, e: int) -> str:
        return " ".join(self.context_tokens[s : e + 1])


@dataclass
class NliExample:
    id: str
    premise_tokens: list[str]
    hypothesis_tokens: list[str]
    label: str
    premise_pos: list[str] | None = None
    premise_ner: list[str] | None = None
    hypothesis_pos: list[str] | None = None
    hypothesis_ner: list[str] | None = None

    def __post_init__(self):
        if not self.premise_tokens or not self.hypothesis_tokens:
            raise DatasetError(f"example {self.id}: empty premise or hypothesis")
        if self.label not in NLI_LABELS:
            raise DatasetError(f"example {self.id}: unknown label {self.label!r}")

    @property
    def label_id(self) -> int:
        return NLI_LABELS.index(self.label)


# ---------------------------------------------------------------------------
# tokenisation and file IO

_PUNCT = set(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Whitespace split; leading and trailing punctuation become separate tokens."""
    out = []
    for chunk in text.split():
        lead = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        out.extend(lead)
        if chunk:
            out.append(chunk)
        out.extend(reversed(trail))
    return out


def _find_span(tokens, answer_tokens):
    n = len(answer_tokens)
    for i in range(len(tokens) - n + 1):
        if tokens[i : i + n] == answer_tokens:
            return i, i + n - 1
    return None


def _record_to_example(rec: dict):
    if "label" in rec:
        rec = dict(rec)
        if "premise_tokens" not in rec:
            rec["premise_tokens"] = tokenize(rec.pop("premise"))
        if "hypothesis_tokens" not in rec:
            rec["hypothesis_tokens"] = tokenize(rec.pop("hypothesis"))
        return NliExample(**rec)
    rec = dict(rec)
    if "context_tokens" not in rec:
        rec["context_tokens"] = tokenize(rec.pop("context"))
    if "question_tokens" not in rec:
        rec["question_tokens"] = tokenize(rec.pop("question"))
    if "answer_start" not in rec:
        answers = rec.get("answers") or []
        if not answers:
            raise DatasetError("record has neither a token span nor answers")
        span = _find_span(rec["context_tokens"], tokenize(answers[0]))
        if span is None:
            raise DatasetError(f"answer {answers[0]!r} not found in context")
        rec["answer_start"], rec["answer_end"] = span
    return MrcExample(**rec)


def load_dataset(path) -> list:
    """Read a JSON-lines dataset of reading-comprehension or NLI records."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(_record_to_example(rec))
            except (json.JSONDecodeError, TypeError, DatasetError) as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from e
    return out


def save_dataset(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {k: v for k, v in asdict(ex).items() if v is not None}
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# synthetic key-value reading comprehension


def _mrc_vocab(vocab_size: int):
    quarter = max(vocab_size // 4, 4)
    return {
        "key": [f"k{i}" for i in range(quarter)],
        "value": [f"v{i}" for i in range(quarter)],
        "filler": [f"w{i}" for i in range(quarter)],
        "template": [f"t{i}" for i in range(max(quarter // 2, 2))],
        "rare": [f"r{i}" for i in range(max(quarter // 2, 2))],
    }


_ROLE_TAGS = {
    "key": ("NNP", "ENT"),
    "template": ("NN", "O"),
    "rare": ("NNP", "ENT"),
    "value": ("CD", "NUM"),
    "filler": ("NN", "O"),
    "sym": ("SYM", "O"),
    "punct": ("PUNCT", "O"),
}


def gen_synthetic_mrc(
    n_examples: int,
    vocab_size: int = 200,
    context_len_range=(12, 28),
    seed: int = 0,
    low_cue_fraction: float = 0.3,
) -> list[MrcExample]:
    """Key-value retrieval passages.

    A context is a run of records ``key = value ;`` with filler words in
    between; the question ``what is key ?`` is answered by the record's value
    (one or two tokens). In the low-level-cue family two records share a
    template word and differ only in a rare word, so the key is two tokens
    and the rare word is what decides the answer.
    """
    if n_examples < 1 or vocab_size < 1:
        raise ValueError("n_examples and vocab_size must be positive")
    lo, hi = context_len_range
    if lo < 8 or hi < lo:
        raise ValueError(f"bad context_len_range {context_len_range}")
    pools = _mrc_vocab(vocab_size)
    rng = rng_stream(seed, "synthetic_mrc")
    out = []
    for n in range(n_examples):
        target_len = int(rng.integers(lo, hi + 1))
        low_cue = rng.random() < low_cue_fraction
        records = []  # list of (key tokens, key roles, value tokens)
        used_keys = set()
        if low_cue:
            t = str(rng.choice(pools["template"]))
            r1, r2 = (str(x) for x in rng.choice(pools["rare"], size=2, replace=False))
            records.append(([t, r1], ["template", "rare"]))
            records.append(([t, r2], ["template", "rare"]))
            used_keys.update({(t, r1), (t, r2)})
        length = sum(len(k) + 4 for k, _ in records)
        while length + 5 <= target_len or len(records) < 2:
            k = str(rng.choice(pools["key"]))
            if (k,) in used_keys:
                continue
            used_keys.add((k,))
            records.append(([k], ["key"]))
            length += 5
        order = rng.permutation(len(records))
        target = 0 if low_cue else int(rng.integers(len(records)))
        tokens, roles = [], []
        span = None
        for ri in order:
            key, key_roles = records[ri]
            for _ in range(int(rng.integers(0, 2))):
                tokens.append(str(rng.choice(pools["filler"])))
                roles.append("filler")
            nval = 1 + int(rng.random() < 0.4)
            value = [str(v) for v in rng.choice(pools["value"], size=nval)]
            tokens += key + ["="]
            roles += key_roles + ["sym"]
            if ri == target:
                span = (len(tokens), len(tokens) + nval - 1)
                answer_key = key
            tokens += value + [";"]
            roles += ["value"] * nval + ["punct"]
        question = ["what", "is"] + answer_key + ["?"]
        out.append(
            MrcExample(
                id=f"mrc-{seed}-{n}",
                context_tokens=tokens,
                question_tokens=question,
                answer_start=span[0],
                answer_end=span[1],
                pos=[_ROLE_TAGS[r][0] for r in roles],
                ner=[_ROLE_TAGS[r][1] for r in roles],
                family="low_cue" if low_cue else "plain",
            )
        )
    return out


def key_matcher_oracle(ex: MrcExample) -> tuple[int, int]:
    """Solve a synthetic example by locating ``key =`` and reading up to ``;``."""
    key = ex.question_tokens[2:-1]
    toks = ex.context_tokens
    n = len(key)
    for i in range(len(toks) - n):
        if toks[i : i + n] == key and toks[i + n] == "=":
            s = i + n + 1
            e = s
            while e + 1 < len(toks) and toks[e + 1] != ";":
                e += 1
            return s, e
    return 0, 0


# ---------------------------------------------------------------------------
# synthetic NLI

_NLI_NAMES = [f"n{i}" for i in range(30)]
_NLI_NOUNS = [f"c{i}" for i in range(30)]
_NLI_ADJS = [f"j{i}" for i in range(10)]
_NLI_TAGS = {"is": ("VBZ", "O"), "a": ("DT", "O"), "not": ("RB", "O")}


def _nli_tags(tokens):
    pos, ner = [], []
    for t in tokens:
        if t in _NLI_TAGS:
            p, e = _NLI_TAGS[t]
        elif t.startswith("n"):
            p, e = "NNP", "PER"
        elif t.startswith("j"):
            p, e = "JJ", "O"
        else:
            p, e = "NN", "O"
        pos.append(p)
        ner.append(e)
    return pos, ner


def gen_synthetic_nli(n_examples: int, seed: int = 0) -> list[NliExample]:
    """Templated pairs labelled by rule.

    Premise ``X is a [ADJ] Y``. Entailment repeats ``X is a Y``;
    contradiction negates it (``X is not a Y``); neutral changes the subject
    or the noun. Labels cycle so the classes stay balanced.
    """
    rng = rng_stream(seed, "synthetic_nli")
    out = []
    for n in range(n_examples):
        label = NLI_LABELS[n % 3]
        x, z = (str(v) for v in rng.choice(_NLI_NAMES, size=2, replace=False))
        y, w = (str(v) for v in rng.choice(_NLI_NOUNS, size=2, replace=False))
        premise = [x, "is", "a", y]
        if rng.random() < 0.5:
            premise = [x, "is", "a", str(rng.choice(_NLI_ADJS)), y]
        if label == "entailment":
            hyp = [x, "is", "a", y]
        elif label == "contradiction":
            hyp = [x, "is", "not", "a", y]
        elif rng.random() < 0.5:
            hyp = [z, "is", "a", y]
        else:
            hyp = [x, "is", "a", w]
        ppos, pner = _nli_tags(premise)
        hpos, hner = _nli_tags(hyp)
        out.append(NliExample(f"nli-{seed}-{n}", premise, hyp, label, ppos, pner, hpos, hner))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ---------------------------------------------------------------------------
# metrics


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def _f1(pred: str, gold: str) -> float:
    p = normalize_answer(pred).split()
    g = normalize_answer(gold).split()
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = collections.Counter(p) & collections.Counter(g)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(p)
    recall = same / len(g)
    return 2 * precision * recall / (precision + recall)


def em_f1(predicted: str, golds) -> tuple[float, float]:
    if not golds:
        raise ValueError("em_f1 needs at least one gold answer")
    norm = normalize_answer(predicted)
    em = float(any(norm == normalize_answer(g) for g in golds))
    f1 = max(_f1(predicted, g) for g in golds)
    return em, f1


@dataclass
class MetricReport:
    em: float
    f1: float
    records: list[dict] = field(default_factory=list)


def evaluate_predictions(predictions: dict, examples) -> MetricReport:
    """EM/F1 (fractions in [0, 1]) of ``{example id: answer string}``."""
    records = []
    for ex in examples:
        em, f1 = em_f1(predictions.get(ex.id, ""), ex.answers)
        records.append({"id": ex.id, "em": em, "f1": f1, "family": getattr(ex, "family", None)})
    n = max(len(records), 1)
    return MetricReport(
        em=sum(r["em"] for r in records) / n, f1=sum(r["f1"] for r in records) / n, records=records
    )


# ---------------------------------------------------------------------------
# attention export


def export_attention(state, example_id: str, path) -> int:
    """Append one JSON line per recorded attention map; returns the count.

    Every map is checked to be row-stochastic before anything is written.
    """
    maps = list(state.attention.items())
    for level, att in maps:
        w = np.asarray(att.weights)
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError(f"attention map {level!r} is not row-stochastic")
    with open(path, "a", encoding="utf-8") as fh:
        for level, att in maps:
            w = np.asarray(att.weights)
            rec = {
                "example_id": example_id,
                "level": level,
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "weights": [float(v) for v in w.reshape(-1)],
            }
            fh.write(json.dumps(rec) + "\n")
    return len(maps)
