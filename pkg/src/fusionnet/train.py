"""Adamax, the training loop, voting ensembles and checkpoints.

Checkpoint layout (a file pair)::

    <name>.json   manifest, UTF-8 JSON:
        format        "fusionnet-checkpoint"
        version       CHECKPOINT_VERSION
        kind          "mrc" | "nli"
        config        the model config as a dict
        vocab         tokens in row order
        finetune_tokens
        blob          file name of the tensor blob (same directory)
        blob_bytes    total blob size
        blob_sha256   hex digest of the blob
        tensors       [{name, shape, offset, length}], offset/length in bytes
        optimizer     null or {t, lr, beta1, beta2, eps, tensors: [{name, ...}]}
        progress      {epoch, step}
    <name>.bin    every tensor, C order, little-endian float64, concatenated
                  in manifest order (model tensors, then optimizer m and u).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dropout import DropoutPolicy
from .data import NliExample, evaluate_predictions
from .encoder import ConfigError
from .heads import NliConfig, NliModel
from .model import ModelConfig, MrcModel
from .tensor import Graph, ShapeError, Tensor, backward, rng_stream

CHECKPOINT_FORMAT = "fusionnet-checkpoint"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamaxState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    u: list[np.ndarray] = field(default_factory=list)


def adamax_step(params, grads, state: AdamaxState) -> None:
    """One Adamax update of ``params`` in place.

    m <- b1 m + (1 - b1) g;  u <- max(b2 u, |g|);
    theta <- theta - lr / (1 - b1^t) * m / (u + eps)
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.u = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    state.t += 1
    step = state.lr / (1.0 - state.beta1**state.t)
    for p, g, m, u in zip(params, grads, state.m, state.u):
        g = np.asarray(g)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.data = p.data - step * m / (u + state.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    optimizer: AdamaxState
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)


def new_train_state(lr: float = 0.002) -> TrainState:
    return TrainState(AdamaxState(lr=lr))


def _dropout_for(model, epoch: int, position: int) -> DropoutPolicy | None:
    rate = model.cfg.dropout
    if rate == 0.0:
        return None
    seed = int(rng_stream(model.cfg.seed, f"dropout/epoch{epoch}/example{position}").integers(2**62))
    return DropoutPolicy(rate, seed)


def evaluate(model, examples) -> dict:
    """EM/F1 in percent for reading comprehension, accuracy in percent for NLI."""
    if not examples:
        return {}
    if isinstance(examples[0], NliExample):
        hits = sum(model.predict(ex) == ex.label for ex in examples)
        return {"accuracy": 100.0 * hits / len(examples)}
    report = evaluate_predictions({ex.id: model.answer(ex) for ex in examples}, examples)
    return {"em": 100.0 * report.em, "f1": 100.0 * report.f1}


def train_epoch(model, dataset, state: TrainState, batch_size: int = 32, dev=None) -> dict:
    """One pass over ``dataset`` in a seeded shuffle.

    Gradients are summed over ``batch_size`` examples, divided by the batch
    size and applied with one Adamax step (a short final batch is divided by
    its own size). Dropout is on while training and off for evaluation.
    """
    if not dataset:
        raise ValueError("empty training set")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    params = model.trainable()
    order = rng_stream(model.cfg.seed, f"shuffle/epoch{state.epoch}").permutation(len(dataset))
    total, steps = 0.0, 0
    for start in range(0, len(order), batch_size):
        batch = order[start : start + batch_size]
        for p in params:
            p.grad = None
        for pos, idx in enumerate(batch, start):
            with Graph() as g:
                loss = model.loss(dataset[idx], _dropout_for(model, state.epoch, pos))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} on example {dataset[idx].id!r} (epoch {state.epoch})")
            backward(g, loss, params)
            total += value
        grads = [p.grad / len(batch) for p in params]
        if not all(np.all(np.isfinite(gr)) for gr in grads):
            raise NumericError(f"non-finite gradient at step {state.step}")
        adamax_step(params, grads, state.optimizer)
        for p in params:
            p.grad = None
        steps += 1
        state.step += 1
    record = {"epoch": state.epoch, "loss": total / len(dataset), "steps": steps}
    if dev:
        record.update({f"dev_{k}": v for k, v in evaluate(model, dev).items()})
    state.epoch += 1
    state.history.append(record)
    return record


def append_metrics(path, record: dict) -> None:
    """Append one JSON line; existing lines are never rewritten."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def fit(model, train, dev=None, epochs: int = 30, batch_size: int = 32, lr: float = 0.002,
        metrics_path=None, state: TrainState | None = None, train_eval: bool = False) -> TrainState:
    state = state or new_train_state(lr)
    for _ in range(epochs):
        rec = train_epoch(model, train, state, batch_size, dev)
        if train_eval:
            rec.update({f"train_{k}": v for k, v in evaluate(model, train).items()})
        if metrics_path is not None:
            append_metrics(metrics_path, rec)
    return state


# ---------------------------------------------------------------------------
# ensembles


def ensemble_predict(models, example, seed: int = 0) -> str:
    """Majority vote over the members' answers; ties go to a seeded random pick."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    votes = Counter(m.answer(example) for m in models)
    best = max(votes.values())
    tied = sorted(a for a, c in votes.items() if c == best)
    if len(tied) == 1:
        return tied[0]
    rng = rng_stream(seed, f"ensemble/{getattr(example, 'id', '')}")
    return tied[int(rng.integers(len(tied)))]


# ---------------------------------------------------------------------------
# checkpoints


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def _model_kind(model) -> str:
    if isinstance(model, MrcModel):
        return "mrc"
    if isinstance(model, NliModel):
        return "nli"
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(path, model, state: TrainState | None = None) -> Path:
    """Write ``<path>`` (manifest) and ``<path>.bin`` (tensors). Returns the manifest path."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0

    def put(name, arr, into):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        into.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name, t in model.store.items():
        put(name, t.data, entries)
    opt = None
    if state is not None and state.optimizer.m:
        o = state.optimizer
        opt = {"t": o.t, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "tensors": []}
        names = [n for n, t in model.store.items() if t.requires_grad]
        for n, m in zip(names, o.m):
            put(f"{n}#m", m, opt["tensors"])
        for n, u in zip(names, o.u):
            put(f"{n}#u", u, opt["tensors"])
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": _model_kind(model),
        "config": model.cfg.to_dict(),
        "vocab": sorted(model.vocab, key=model.vocab.get),
        "finetune_tokens": list(model.finetune_tokens),
        "blob": _blob_path(path).name,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "optimizer": opt,
        "progress": {"epoch": state.epoch, "step": state.step} if state else None,
    }
    _atomic_write(_blob_path(path), blob)
    _atomic_write(path, json.dumps(manifest, indent=1).encode("utf-8"))
    return path


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    model: object
    state: TrainState | None
    manifest: dict


def load_checkpoint(path) -> Checkpoint:
    """Rebuild the model (and optimizer state when saved).

    Everything is validated before the model is assembled, so a damaged
    checkpoint raises ``CheckpointError`` and returns nothing.
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {manifest.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    try:
        blob = (path.parent / manifest["blob"]).read_bytes()
        if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
            raise CheckpointError(f"{path}: tensor blob is corrupted or truncated")

        def read(entry):
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * 8
            off = entry["offset"]
            if entry["length"] != n or off < 0 or off + n > len(blob):
                raise CheckpointError(f"{path}: bad extent for {entry['name']}")
            return np.frombuffer(blob, dtype="<f8", count=n // 8, offset=off).reshape(shape).astype(np.float64)

        tensors = {e["name"]: read(e) for e in manifest["tensors"]}
        kind = manifest["kind"]
        vocab = {tok: i for i, tok in enumerate(manifest["vocab"])}
        if kind == "mrc":
            model = MrcModel(ModelConfig.from_dict(manifest["config"]), vocab, manifest["finetune_tokens"])
        elif kind == "nli":
            model = NliModel(NliConfig.from_dict(manifest["config"]), vocab, manifest["finetune_tokens"])
        else:
            raise CheckpointError(f"{path}: unknown model kind {kind!r}")
        store = dict(model.store.items())
        if set(store) != set(tensors):
            missing = sorted(set(store) ^ set(tensors))[:5]
            raise CheckpointError(f"{path}: tensor names do not match the config (e.g. {missing})")
        for name, arr in tensors.items():
            if store[name].data.shape != arr.shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, config expects {store[name].data.shape}")
        state = None
        opt = manifest.get("optimizer")
        if opt is not None:
            names = [n for n, t in model.store.items() if t.requires_grad]
            opt_t = {e["name"]: read(e) for e in opt["tensors"]}
            m = [opt_t[f"{n}#m"] for n in names]
            u = [opt_t[f"{n}#u"] for n in names]
            prog = manifest.get("progress") or {}
            state = TrainState(
                AdamaxState(opt["lr"], opt["beta1"], opt["beta2"], opt["eps"], opt["t"], m, u),
                epoch=prog.get("epoch", 0),
                step=prog.get("step", 0),
            )
    except CheckpointError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    for name, arr in tensors.items():
        store[name].data = arr
    return Checkpoint(model, state, manifest)
