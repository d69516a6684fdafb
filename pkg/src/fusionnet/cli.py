"""Command-line front end.

Run config (JSON)::

    {
      "task": "mrc",                 # or "nli"
      "seed": 0,
      "model": {...},                # ModelConfig / NliConfig fields, nested "input"
      "train": {"epochs": 30, "batch_size": 8, "lr": 0.005}
    }

Missing keys take their defaults. ``--set model.hidden=16`` overrides one
key (the value is parsed as JSON, else kept as a string) and must name a key
that exists. ``--paper-dims`` swaps in the published dimensions.

Exit codes: 0 success, 1 failed check, 2 usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import SCORER_LABELS, ScorerKind
from .data import (
    DatasetError,
    MrcExample,
    NliExample,
    evaluate_predictions,
    gen_synthetic_mrc,
    gen_synthetic_nli,
    load_dataset,
    save_dataset,
    export_attention,
)
from .encoder import ConfigError
from .heads import NliConfig, NliModel
from .model import CONFIG_GRID, ModelConfig, MrcModel, dimension_report
from .tensor import grad_check_report
from .train import (
    CheckpointError,
    NumericError,
    append_metrics,
    ensemble_predict,
    evaluate,
    fit,
    load_checkpoint,
    new_train_state,
    save_checkpoint,
    train_epoch,
)

# full-model gradient check: five-point stencil, see grad_check_report
GRADCHECK_EPS = 5e-3
GRADCHECK_ORDER = 4
GRADCHECK_MAX_COORDS = 48
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


# desk-scale training defaults; the published setting is batch 32, lr 0.002
TOY_TRAIN = {"epochs": 30, "batch_size": 8, "lr": 0.005}


def default_run_config(task: str = "mrc") -> dict:
    model = ModelConfig() if task == "mrc" else NliConfig()
    return {"task": task, "seed": 0, "model": model.to_dict(), "train": dict(TOY_TRAIN)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise UsageError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return cfg


def load_run_config(path, overrides=(), paper_dims: bool = False, task: str | None = None) -> dict:
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = default_run_config(user.get("task", task or "mrc"))
        _merge(cfg, user, "")
    else:
        cfg = default_run_config(task or "mrc")
    if paper_dims:
        paper = ModelConfig.paper() if cfg["task"] == "mrc" else NliConfig.paper()
        for k in ("input", "hidden", "paper_dims") + (("att_k",) if cfg["task"] == "mrc" else ()):
            cfg["model"][k] = paper.to_dict()[k]
    apply_overrides(cfg, overrides)
    cfg["model"]["seed"] = cfg["seed"]
    return cfg


def _merge(base: dict, user: dict, prefix: str) -> None:
    for k, v in user.items():
        if k not in base:
            raise UsageError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def model_config(cfg: dict):
    try:
        if cfg["task"] == "mrc":
            mc = ModelConfig.from_dict(cfg["model"])
        elif cfg["task"] == "nli":
            mc = NliConfig.from_dict(cfg["model"])
        else:
            raise UsageError(f"unknown task {cfg['task']!r}")
        mc.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc
    return mc


def build_model(cfg: dict, train, extra=()):
    mc = model_config(cfg)
    if cfg["task"] == "mrc":
        return MrcModel.for_examples(mc, train, extra)
    return NliModel.for_examples(mc, list(train) + list(extra))


def _load_data(path, task: str | None = None):
    try:
        data = load_dataset(path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from exc
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    if not data:
        raise UsageError(f"dataset {path} is empty")
    want = {"mrc": MrcExample, "nli": NliExample}.get(task)
    if want is not None and not isinstance(data[0], want):
        raise UsageError(f"dataset {path} does not hold {task} examples")
    return data


def _prepare_out(out) -> Path:
    out = Path(out)
    if not out.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=out.name + ".tmp"))
        try:
            os.rename(tmp, out)
        except OSError:
            tmp.rmdir()
            if not out.is_dir():
                raise
    return out


def write_manifest(out: Path, command: str, cfg: dict, argv, extra=None) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "seed": cfg.get("seed") if cfg else None,
        "versions": {"fusionnet": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    (out / "run.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, argv) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.task == "mrc":
        data = gen_synthetic_mrc(args.n, seed=args.seed)
    else:
        data = gen_synthetic_nli(args.n, seed=args.seed)
    save_dataset(out, data)
    print(f"wrote {len(data)} {args.task} examples to {out}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = load_run_config(args.config, args.set, args.paper_dims)
    train = _load_data(args.train, cfg["task"])
    dev = _load_data(args.dev, cfg["task"]) if args.dev else []
    out = _prepare_out(args.out)
    write_manifest(out, "train", cfg, argv, {"train": str(args.train), "dev": str(args.dev) if args.dev else None})
    model = build_model(cfg, train, dev)
    tc = cfg["train"]
    state = new_train_state(tc["lr"])
    for _ in range(tc["epochs"]):
        rec = train_epoch(model, train, state, tc["batch_size"], dev)
        append_metrics(out / "metrics.jsonl", rec)
        print(json.dumps(rec), flush=True)
        save_checkpoint(out / "last.json", model, state)
    save_checkpoint(out / "model.json", model)
    print(f"checkpoint written to {out / 'model.json'}")
    return 0


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args, argv) -> int:
    ck = _checkpoint(args.ckpt)
    data = _load_data(args.data)
    metrics = evaluate(ck.model, data)
    print(json.dumps(metrics))
    return 0


def cmd_ensemble(args, argv) -> int:
    models = [_checkpoint(p).model for p in args.ckpts.split(",") if p]
    if not models:
        raise UsageError("--ckpts lists no checkpoints")
    data = _load_data(args.data)
    preds = {ex.id: ensemble_predict(models, ex, args.seed) for ex in data}
    if isinstance(data[0], NliExample):
        acc = 100.0 * sum(preds[ex.id] == ex.label for ex in data) / len(data)
        print(json.dumps({"accuracy": acc, "members": len(models)}))
    else:
        rep = evaluate_predictions(preds, data)
        print(json.dumps({"em": 100.0 * rep.em, "f1": 100.0 * rep.f1, "members": len(models)}))
    return 0


def cmd_dump_attention(args, argv) -> int:
    ck = _checkpoint(args.ckpt)
    data = {ex.id: ex for ex in _load_data(args.data)}
    if args.id not in data:
        raise UsageError(f"no example with id {args.id!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model = ck.model
    state = model.encode(data[args.id]) if isinstance(model, MrcModel) else model.forward(data[args.id])
    n = export_attention(state, args.id, out)
    print(f"wrote {n} attention maps to {out}")
    return 0


def gradcheck_example() -> MrcExample:
    """The fixed 6-token context / 3-token question used by ``gradcheck``."""
    return MrcExample(
        id="gradcheck",
        context_tokens=["k1", "=", "v1", ";", "k2", "v2"],
        question_tokens=["what", "is", "k1"],
        answer_start=2,
        answer_end=2,
        answers=["v1"],
        pos=["NN", "SYM", "NN", "PUNCT", "NN", "NN"],
        ner=["O", "O", "ENT", "O", "O", "ENT"],
    )


def run_gradcheck(cfg: dict, max_coords=GRADCHECK_MAX_COORDS, seed: int = 0):
    if cfg["task"] != "mrc":
        raise UsageError("gradcheck runs on the reading-comprehension model")
    ex = gradcheck_example()
    model = build_model(cfg, [ex])
    dims = dimension_report(model.cfg, model.encode(ex))
    rep = grad_check_report(
        lambda: model.loss(ex), model.trainable(), eps=GRADCHECK_EPS,
        max_coords=max_coords, seed=seed, order=GRADCHECK_ORDER,
    )
    return rep, dims


def cmd_gradcheck(args, argv) -> int:
    cfg = load_run_config(args.config, args.set, args.paper_dims)
    t0 = time.time()
    rep, dims = run_gradcheck(cfg, args.max_coords or None, args.seed)
    print("dims " + json.dumps(dims))
    print(
        f"max relative error {rep.max_rel_error:.3e} over {rep.checked} coordinates "
        f"({rep.on_kink} on a kink) in {time.time() - t0:.1f}s"
    )
    if not np.isfinite(rep.max_rel_error):
        return 3
    return 0 if rep.max_rel_error < GRADCHECK_TOL else 1


# ---------------------------------------------------------------------------
# ablation grids


def ablation_cells(grid: str, base: dict):
    """``(row labels, run config)`` for every cell of the grid."""
    cells = []
    if grid == "scorers":
        for kind in ScorerKind:
            cfg = json.loads(json.dumps(base))
            cfg["model"]["scorer"] = kind.value
            cells.append(((SCORER_LABELS[kind],), cfg))
    elif grid == "configs":
        for fusion, self_mode, c_label, s_label in CONFIG_GRID:
            cfg = json.loads(json.dumps(base))
            cfg["model"]["fusion_mode"] = fusion
            cfg["model"]["self_mode"] = self_mode
            cells.append(((c_label, s_label), cfg))
    else:
        raise UsageError(f"unknown grid {grid!r}")
    return cells


def run_ablation(grid: str, base: dict, train, dev, out: Path | None = None) -> list[dict]:
    rows = []
    for labels, cfg in ablation_cells(grid, base):
        model = build_model(cfg, train, dev)
        tc = cfg["train"]
        t0 = time.time()
        fit(model, train, None, tc["epochs"], tc["batch_size"], tc["lr"])
        full = evaluate_predictions({ex.id: model.answer(ex) for ex in dev}, dev)
        low = [r for r in full.records if r["family"] == "low_cue"]
        row = {
            "labels": list(labels),
            "em": 100.0 * full.em,
            "f1": 100.0 * full.f1,
            "low_cue_em": 100.0 * sum(r["em"] for r in low) / len(low) if low else float("nan"),
            "seconds": time.time() - t0,
        }
        rows.append(row)
        if out is not None:
            append_metrics(out / "cells.jsonl", row)
        print(json.dumps(row), flush=True)
    return rows


def format_table(grid: str, rows) -> str:
    if grid == "scorers":
        head = ["Attention Function", "EM / F1", "low-cue EM"]
    else:
        head = ["Configuration C", "Self C", "EM / F1", "low-cue EM"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = list(r["labels"]) + [f"{r['em']:.1f} / {r['f1']:.1f}", f"{r['low_cue_em']:.1f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def directional_note(rows) -> str | None:
    by = {tuple(r["labels"]): r for r in rows}
    hi, fa = by.get(("High-Level", "None")), by.get(("FA Multi-Level", "FA"))
    if hi is None or fa is None:
        return None
    holds = fa["low_cue_em"] >= hi["low_cue_em"]
    return (
        f"FA Multi-Level/FA low-cue EM {fa['low_cue_em']:.1f} vs High-Level {hi['low_cue_em']:.1f}: "
        f"expected ordering {'holds' if holds else 'does not hold'} in this run"
    )


def cmd_ablate(args, argv) -> int:
    cfg = load_run_config(args.config, args.set, args.paper_dims)
    if cfg["task"] != "mrc":
        raise UsageError("ablation grids run on the reading-comprehension task")
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    train = _load_data(args.train, "mrc") if args.train else gen_synthetic_mrc(args.n_train, seed=cfg["seed"])
    dev = _load_data(args.dev, "mrc") if args.dev else gen_synthetic_mrc(args.n_dev, seed=cfg["seed"] + 1)
    out = _prepare_out(args.out)
    write_manifest(out, "ablate", cfg, argv, {"grid": args.grid, "n_train": len(train), "n_dev": len(dev)})
    rows = run_ablation(args.grid, cfg, train, dev, out)
    table = format_table(args.grid, rows)
    note = directional_note(rows) if args.grid == "configs" else None
    text = table + ("\n\n" + note if note else "") + "\n"
    (out / f"table_{args.grid}.md").write_text(text, encoding="utf-8")
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionnet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--paper-dims", action="store_true", help="use the published dimensions")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--task", choices=("mrc", "nli"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    common(p)
    p.add_argument("--grid", choices=("scorers", "configs"), required=True)
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-dev", type=int, default=100)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    common(p)
    p.add_argument("--max-coords", type=int, default=GRADCHECK_MAX_COORDS, help="coordinates per tensor (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ensemble", help="majority-vote several checkpoints")
    p.add_argument("--ckpts", required=True, help="comma-separated manifest paths")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("dump-attention", help="export the attention maps of one example")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"fusionnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"fusionnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"fusionnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
