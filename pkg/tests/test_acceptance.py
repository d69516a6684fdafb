"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints (see
conftest.py). Run alone with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""
import json
import time

import numpy as np
import pytest

from fusionnet.attention import ScorerKind, new_scorer, score, score_matrix
from fusionnet.cli import (
    ablation_cells,
    build_model,
    default_run_config,
    directional_note,
    format_table,
    gradcheck_example,
    load_run_config,
    run_ablation,
    run_gradcheck,
)
from fusionnet.data import em_f1, export_attention, gen_synthetic_mrc, gen_synthetic_nli
from fusionnet.dropout import DropoutPolicy, dropout_mask
from fusionnet.encoder import InputConfig
from fusionnet.heads import NliConfig, NliModel, decode_span
from fusionnet.model import CONFIG_GRID, ModelConfig, MrcModel, dimension_report
from fusionnet.tensor import ParamStore, Tensor, grad_check, mul, sum_
from fusionnet.train import (
    AdamaxState,
    adamax_step,
    ensemble_predict,
    evaluate,
    fit,
    load_checkpoint,
    new_train_state,
    save_checkpoint,
    train_epoch,
)

RESULTS = {}

TITLES = {
    1: "gradient fidelity",
    2: "published-dimension conformance",
    3: "desk-scale learnability (MRC)",
    4: "ablation harness",
    5: "decode oracle",
    6: "metric oracle",
    7: "attention algebra",
    8: "optimizer/dropout contracts",
    9: "ensemble and persistence",
    10: "NLI path",
}

TINY = dict(input=InputConfig(6, 4, 2, 2), hidden=8, att_k=6)


def report(n, checks, detail):
    """Record criterion ``n`` and fail the test unless every check holds."""
    failed = [name for name, ok in checks.items() if not ok]
    RESULTS[n] = (not failed, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed, RESULTS[n][1]


def test_criterion_01_gradient_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(0)
    scorer_err = {}
    for kind in ScorerKind:
        p = new_scorer(ParamStore(4), "s", kind, 5, 4)
        A = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        B = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        scorer_err[kind.value] = grad_check(lambda: sum_(mul(score_matrix(p, A, B), w)), [A, B] + p.tensors())
    cfg = default_run_config()
    assert cfg["model"]["fusion_mode"] == "fa_multi_level" and cfg["model"]["self_mode"] == "fully_aware"
    ex = gradcheck_example()
    assert (len(ex.context_tokens), len(ex.question_tokens)) == (6, 3)
    rep, _ = run_gradcheck(cfg)
    seconds = time.time() - t0
    worst_scorer = max(scorer_err.values())
    report(1, {
        "scorers < 1e-4": worst_scorer < 1e-4,
        "full model < 1e-4": rep.max_rel_error < 1e-4,
        "runtime < 120 s": seconds < 120,
    }, f"scorers max {worst_scorer:.2e}, full model {rep.max_rel_error:.2e} over {rep.checked} coords, {seconds:.1f}s")


def test_criterion_02_paper_dims():
    t0 = time.time()
    cfg = load_run_config(None, paper_dims=True)
    ex = gradcheck_example()
    model = build_model(cfg, [ex])
    dims = dimension_report(model.cfg, model.encode(ex))
    nli_cfg = load_run_config(None, paper_dims=True, task="nli")
    nex = gen_synthetic_nli(1, seed=0)[0]
    pooled = build_model(nli_cfg, [nex]).forward(nex).pooled.shape
    seconds = time.time() - t0
    want = {"context_input": 921, "question_input": 900, "h_low": 250, "h_high": 250,
            "fusion_how": 1400, "self_how": 2400, "att_k": 250}
    checks = {f"{k} == {v}": dims.get(k) == v for k, v in want.items()}
    checks["NLI pooled 2400"] = pooled == (2400,)
    checks["runtime < 60 s"] = seconds < 60
    report(2, checks, " ".join(f"{k}={dims.get(k)}" for k in want) + f" nli_pooled={pooled[0]}, {seconds:.1f}s")


def test_criterion_03_mrc_learnability():
    train, dev = gen_synthetic_mrc(200, seed=0), gen_synthetic_mrc(100, seed=1)
    cfg = default_run_config()
    tc = cfg["train"]
    model = build_model(cfg, train, dev)
    assert model.cfg.hidden == 32
    t0 = time.time()
    fit(model, train, None, tc["epochs"], tc["batch_size"], tc["lr"])
    seconds = time.time() - t0
    train_em, dev_em = evaluate(model, train)["em"], evaluate(model, dev)["em"]
    report(3, {
        "train EM >= 95": train_em >= 95.0,
        "dev EM >= 80": dev_em >= 80.0,
        "runtime < 600 s": seconds < 600,
    }, f"train EM {train_em:.1f}, dev EM {dev_em:.1f} after {tc['epochs']} epochs, {seconds:.0f}s")


def test_criterion_04_ablation_harness(tmp_path):
    base = default_run_config()
    base["model"].update(hidden=8, att_k=6)
    base["train"]["epochs"] = 6
    train, dev = gen_synthetic_mrc(40, seed=0), gen_synthetic_mrc(20, seed=1)
    tables, rows_by_grid = {}, {}
    for grid in ("configs", "scorers"):
        rows = run_ablation(grid, base, train, dev)
        rows_by_grid[grid] = rows
        tables[grid] = format_table(grid, rows)
    labels = [tuple(r["labels"]) for r in rows_by_grid["configs"]]
    want_configs = [(c, s) for _, _, c, s in CONFIG_GRID]
    want_scorers = [lab for lab, _ in ablation_cells("scorers", base)]
    note = directional_note(rows_by_grid["configs"])
    finite = all(np.isfinite(r["em"]) for rows in rows_by_grid.values() for r in rows)
    report(4, {
        "every Table 6 configuration row ran": labels == want_configs,
        "six scorer cells ran": [tuple(r["labels"]) for r in rows_by_grid["scorers"]] == want_scorers,
        "labeled tables": all(f"| {r['labels'][0]} |" in tables[g] for g, rows in rows_by_grid.items() for r in rows),
        "finite metrics": finite,
        "directional note": note is not None,
    }, f"{len(labels)} configuration cells + {len(want_scorers)} scorer cells; {note}")


def brute_force(ps, pe, max_len):
    best, arg = -1.0, None
    for s in range(len(ps)):
        for e in range(s, min(len(ps), s + max_len + 1)):
            if ps[s] * pe[e] > best:
                best, arg = ps[s] * pe[e], (s, e)
    return arg


def test_criterion_05_decode_oracle():
    rng = np.random.default_rng(5)
    mismatches = bad_len = 0
    for trial in range(10_000):
        m = int(rng.integers(1, 51))
        if trial % 10 == 0:
            # flat distributions stress the tie-break
            ps, pe = np.full(m, 1.0 / m), np.full(m, 1.0 / m)
        else:
            alpha = float(rng.choice([0.1, 1.0, 10.0]))
            ps, pe = rng.dirichlet(np.full(m, alpha)), rng.dirichlet(np.full(m, alpha))
        s, e = decode_span(ps, pe, 15)
        mismatches += (s, e) != brute_force(ps, pe, 15)
        bad_len += not (0 <= e - s <= 15 and e < m)
    report(5, {"zero mismatches": mismatches == 0, "0 <= e-s <= 15": bad_len == 0},
           f"10000 distributions, {mismatches} mismatches, {bad_len} length violations")


def test_criterion_06_metric_oracle():
    from test_data import EM_F1_CASES

    wrong = [(p, g) for p, g, em, f1 in EM_F1_CASES if em_f1(p, g) != (em, pytest.approx(f1, abs=1e-15))]
    has_bag = any(f1 == 0.8 for _, _, _, f1 in EM_F1_CASES)
    report(6, {">= 20 cases": len(EM_F1_CASES) >= 20, "0.8 bag-F1 case": has_bag, "all exact": not wrong},
           f"{len(EM_F1_CASES)} hand-computed cases, {len(wrong)} wrong")


def random_models(rng):
    """Small MRC and NLI models over every fusion configuration and scorer."""
    data = gen_synthetic_mrc(40, seed=int(rng.integers(1 << 30)))
    models = []
    for mode, self_mode, _, _ in CONFIG_GRID:
        for kind in ScorerKind:
            cfg = ModelConfig(**TINY, fusion_mode=mode, self_mode=self_mode, scorer=kind.value,
                              seed=int(rng.integers(1 << 30)))
            models.append(MrcModel.for_examples(cfg, data))
    nli = gen_synthetic_nli(40, seed=int(rng.integers(1 << 30)))
    for variant in ("standard", "fully_aware", "multi_level"):
        cfg = NliConfig(input=InputConfig(6, 4, 2, 2), hidden=8, variant=variant, seed=int(rng.integers(1 << 30)))
        models.append(NliModel.for_examples(cfg, nli))
    return models, data, nli


def test_criterion_07_attention_algebra(tmp_path):
    rng = np.random.default_rng(7)
    models, data, nli = random_models(rng)
    forwards = rows = 0
    worst = 0.0
    exported = tmp_path / "att.jsonl"
    while forwards < 1000:
        model = models[forwards % len(models)]
        if isinstance(model, MrcModel):
            ex = data[int(rng.integers(len(data)))]
            drop = DropoutPolicy(0.4, seed=forwards) if forwards % 2 else None
            state = model.encode(ex, drop)
        else:
            ex = nli[int(rng.integers(len(nli)))]
            state = model.forward(ex)
        for att in state.attention.values():
            worst = max(worst, float(np.abs(att.weights.sum(axis=1) - 1.0).max()))
            rows += att.weights.shape[0]
        if forwards % 50 == 0:
            export_attention(state, ex.id, exported)
        forwards += 1
    for line in exported.read_text().splitlines():
        rec = json.loads(line)
        w = np.array(rec["weights"]).reshape(rec["rows"], rec["cols"])
        worst = max(worst, float(np.abs(w.sum(axis=1) - 1.0).max()))
    asym = 0
    for trial in range(1000):
        kind = ScorerKind.SYMMETRIC if trial % 2 else ScorerKind.SYMMETRIC_NL
        d, k = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        p = new_scorer(ParamStore(trial), "s", kind, d, k)
        p.D.data = rng.normal(size=k)
        x, y = Tensor(rng.normal(size=d)), Tensor(rng.normal(size=d))
        asym += score(p, x, y).item() != score(p, y, x).item()
    report(7, {"rows sum to 1 +- 1e-9": worst <= 1e-9, "exact symmetry": asym == 0},
           f"{forwards} forwards, {rows} rows, worst |row sum - 1| {worst:.1e}; {asym}/1000 asymmetric scores")


def test_criterion_08_optimizer_dropout():
    p, st = Tensor(np.zeros(1), requires_grad=True), AdamaxState()
    adamax_step([p], [np.array([1.0])], st)
    # bias-corrected closed form: -(lr / (1 - b1)) * m1 / (u1 + eps) with m1 = 0.1, u1 = 1
    closed_form = -(0.002 / (1 - 0.9)) * 0.1 / (1.0 + 1e-8)
    step_err = abs(p.data[0] - closed_form)
    mask = dropout_mask((10**6,), 0.4, (0, "acceptance"))
    kept = float((mask > 0).mean())
    drop = DropoutPolicy(0.4, seed=3)
    out = drop(Tensor(np.ones((9, 64))), "seq").data
    again = drop(Tensor(np.ones((4, 64))), "seq").data
    shared = bool(np.all(out == out[0])) and np.array_equal(again[0], out[0])
    report(8, {
        "Adamax step within 1e-12": step_err <= 1e-12,
        "kept fraction 0.6 +- 0.002": abs(kept - 0.6) <= 0.002,
        "shared mask over time": shared,
    }, f"step {p.data[0]:.12f} (closed form {closed_form:.12f}), kept {kept:.4f}, shared mask {shared}")


class _Fixed:
    def __init__(self, text):
        self.text = text

    def answer(self, example):
        return self.text


def test_criterion_09_ensemble_persistence(tmp_path):
    data = gen_synthetic_mrc(30, seed=9)
    members = [_Fixed("A"), _Fixed("B"), _Fixed("C")]
    picks = {seed: [ensemble_predict(members, ex, seed=seed) for ex in data] for seed in (0, 1)}
    deterministic = all(picks[s] == [ensemble_predict(members, ex, seed=s) for ex in data] for s in picks)
    majority = all(ensemble_predict([_Fixed("A"), _Fixed("B"), _Fixed("A")], ex, seed=5) == "A" for ex in data)

    model = MrcModel.for_examples(ModelConfig(**TINY), data)
    state = fit(model, data, epochs=1, batch_size=6)
    before = [model.distribution(ex)[0] for ex in data]
    ck = load_checkpoint(save_checkpoint(tmp_path / "ck", model, state))
    after = [ck.model.distribution(ex)[0] for ex in data]
    bitwise = all(
        a.p_start.tobytes() == b.p_start.tobytes() and a.p_end.tobytes() == b.p_end.tobytes()
        for a, b in zip(before, after)
    )
    same_answers = [model.answer(ex) for ex in data] == [ck.model.answer(ex) for ex in data]
    report(9, {
        "voting deterministic per seed": deterministic,
        "majority wins": majority,
        "checkpoint bitwise": bitwise and same_answers,
    }, f"tie-breaks differ across seeds: {picks[0] != picks[1]}; {len(data)} predictions bitwise identical: {bitwise}")


# desk-scale NLI setting: the published dropout 0.3 ends near 95% at this size
NLI_TRAIN = {"epochs": 30, "batch_size": 8, "lr": 0.005, "dropout": 0.1}


def test_criterion_10_nli_path():
    train = gen_synthetic_nli(300, seed=0)
    cfg = NliConfig(variant="multi_level", dropout=NLI_TRAIN["dropout"])
    model = NliModel.for_examples(cfg, train)
    st = new_train_state(NLI_TRAIN["lr"])
    t0 = time.time()
    for _ in range(NLI_TRAIN["epochs"]):
        train_epoch(model, train, st, NLI_TRAIN["batch_size"])
    seconds = time.time() - t0
    acc = evaluate(model, train)["accuracy"]

    nex = train[0]
    paper = NliModel.for_examples(NliConfig.paper("multi_level"), [nex])
    state = paper.forward(nex)
    shapes = state.u_p.shape[1] == 600 and state.pooled.shape == (2400,)
    report(10, {
        "train accuracy >= 95": acc >= 95.0,
        "runtime < 600 s": seconds < 600,
        "published shapes": shapes,
    }, f"multi_level (fully-aware) accuracy {acc:.1f}% on 300 examples after {NLI_TRAIN['epochs']} epochs, "
       f"{seconds:.0f}s; published-size u {state.u_p.shape[1]}, pooled {state.pooled.shape[0]}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
