import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusionnet.attention import AttentionWeights
from fusionnet.data import (
    DatasetError,
    MrcExample,
    NliExample,
    em_f1,
    evaluate_predictions,
    export_attention,
    gen_synthetic_mrc,
    gen_synthetic_nli,
    key_matcher_oracle,
    load_dataset,
    normalize_answer,
    save_dataset,
    tokenize,
)
from fusionnet.encoder import InputConfig
from fusionnet.model import ModelConfig, MrcModel


class TestTokenize:
    def test_punctuation(self):
        assert tokenize("Alpine Rhine.") == ["Alpine", "Rhine", "."]

    def test_empty(self):
        assert tokenize("") == []

    def test_double_space(self):
        assert tokenize("a  b") == ["a", "b"]

    def test_leading_and_inner(self):
        assert tokenize('"U.S." (yes)') == ['"', "U.S", ".", '"', "(", "yes", ")"]


class TestLoad:
    def write(self, path, recs):
        path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        return path

    def test_rejects_out_of_range_span(self, tmp_path):
        rec = {"id": "a", "context_tokens": ["x", "y"], "question_tokens": ["q"], "answer_start": 0, "answer_end": 2}
        path = self.write(tmp_path / "d.jsonl", [rec])
        with pytest.raises(DatasetError, match=r"d.jsonl:1: .*\(0, 2\)"):
            load_dataset(path)

    def test_round_trip(self, tmp_path):
        data = gen_synthetic_mrc(5, seed=1)
        save_dataset(tmp_path / "d.jsonl", data)
        assert load_dataset(tmp_path / "d.jsonl") == data

    def test_nli_round_trip(self, tmp_path):
        data = gen_synthetic_nli(4, seed=1)
        save_dataset(tmp_path / "n.jsonl", data)
        assert load_dataset(tmp_path / "n.jsonl") == data

    def test_missing_tags_accepted(self, tmp_path):
        rec = {"id": "a", "context_tokens": ["x", "y"], "question_tokens": ["q"], "answer_start": 1, "answer_end": 1}
        (ex,) = load_dataset(self.write(tmp_path / "d.jsonl", [rec]))
        assert ex.pos is None and ex.answers == ["y"]
        model = MrcModel.for_examples(ModelConfig(input=InputConfig(4, 2, 0, 0), hidden=4, att_k=4), [ex])
        assert model.encode(ex).u_c.shape == (2, 4)

    def test_raw_text_record(self, tmp_path):
        rec = {"id": "r", "context": "The Alpine Rhine flows north.", "question": "What flows?", "answers": ["Alpine Rhine"]}
        (ex,) = load_dataset(self.write(tmp_path / "d.jsonl", [rec]))
        assert (ex.answer_start, ex.answer_end) == (1, 2)

    def test_answer_not_found(self, tmp_path):
        rec = {"id": "r", "context": "a b", "question": "q", "answers": ["zzz"]}
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(self.write(tmp_path / "d.jsonl", [rec]))

    def test_bad_json(self, tmp_path):
        (tmp_path / "d.jsonl").write_text("{not json\n")
        with pytest.raises(DatasetError, match=":1:"):
            load_dataset(tmp_path / "d.jsonl")

    def test_tag_length_mismatch(self):
        with pytest.raises(DatasetError):
            MrcExample("x", ["a", "b"], ["q"], 0, 0, pos=["NN"])

    def test_bad_nli_label(self):
        with pytest.raises(DatasetError):
            NliExample("x", ["a"], ["b"], "maybe")


class TestSyntheticMrc:
    def test_deterministic(self):
        assert gen_synthetic_mrc(20, seed=4) == gen_synthetic_mrc(20, seed=4)
        assert gen_synthetic_mrc(20, seed=4) != gen_synthetic_mrc(20, seed=5)

    def test_spans_in_bounds(self):
        for ex in gen_synthetic_mrc(300, seed=0):
            assert 0 <= ex.answer_start <= ex.answer_end < len(ex.context_tokens)
            assert len(ex.pos) == len(ex.ner) == len(ex.context_tokens)

    def test_oracle_solves_plain_family(self):
        data = gen_synthetic_mrc(300, seed=2)
        plain = [ex for ex in data if ex.family == "plain"]
        assert plain
        preds = {ex.id: ex.span_text(*key_matcher_oracle(ex)) for ex in plain}
        assert evaluate_predictions(preds, plain).em == 1.0

    def test_oracle_solves_low_cue_family(self):
        data = [ex for ex in gen_synthetic_mrc(200, seed=3) if ex.family == "low_cue"]
        assert data
        assert all(key_matcher_oracle(ex) == (ex.answer_start, ex.answer_end) for ex in data)

    def test_low_cue_shares_template(self):
        for ex in gen_synthetic_mrc(100, seed=6):
            if ex.family == "low_cue":
                template = ex.question_tokens[2]
                assert ex.context_tokens.count(template) == 2

    def test_bad_args(self):
        with pytest.raises(ValueError):
            gen_synthetic_mrc(0)
        with pytest.raises(ValueError):
            gen_synthetic_mrc(3, context_len_range=(4, 6))


class TestSyntheticNli:
    def test_balanced(self):
        for n in (30, 31, 32, 300):
            counts = Counter(ex.label for ex in gen_synthetic_nli(n, seed=0))
            assert max(counts.values()) - min(counts.values()) <= 1

    def test_rules(self):
        for ex in gen_synthetic_nli(150, seed=1):
            p, h = ex.premise_tokens, ex.hypothesis_tokens
            if ex.label == "entailment":
                assert h == [p[0], "is", "a", p[-1]]
            elif ex.label == "contradiction":
                assert h == [p[0], "is", "not", "a", p[-1]]
            else:
                assert "not" not in h and h != [p[0], "is", "a", p[-1]]

    def test_deterministic(self):
        assert gen_synthetic_nli(12, seed=3) == gen_synthetic_nli(12, seed=3)


# (prediction, golds, em, f1), worked out by hand
EM_F1_CASES = [
    ("The Alpine Rhine.", ["alpine rhine"], 1.0, 1.0),
    ("alpine rhine forms", ["alpine rhine"], 0.0, 0.8),
    ("cat", ["dog"], 0.0, 0.0),
    ("", [""], 1.0, 1.0),
    ("", ["x"], 0.0, 0.0),
    ("the", ["a"], 1.0, 1.0),
    ("Paris", ["paris", "London"], 1.0, 1.0),
    ("London city", ["paris", "london"], 0.0, 2 / 3),
    ("a b c d", ["a b"], 0.0, 0.5),
    ("x y", ["y x"], 0.0, 1.0),
    ("x x y", ["x y"], 0.0, 0.8),
    ("x", ["x x"], 0.0, 2 / 3),
    ("Hello, World!", ["hello world"], 1.0, 1.0),
    ("  spaced   out  ", ["spaced out"], 1.0, 1.0),
    ("an apple", ["Apple"], 1.0, 1.0),
    ("U.S.", ["US"], 1.0, 1.0),
    ("one two three four", ["two three"], 0.0, 2 / 3),
    ("1990", ["1990s"], 0.0, 0.0),
    ("theater", ["the ater"], 0.0, 0.0),
    ("rock-n-roll", ["rocknroll"], 1.0, 1.0),
    ("x y z", ["a b", "y z w"], 0.0, 2 / 3),
    ("v1 v2", ["v1"], 0.0, 2 / 3),
]


class TestMetrics:
    @pytest.mark.parametrize("pred,golds,em,f1", EM_F1_CASES)
    def test_cases(self, pred, golds, em, f1):
        got_em, got_f1 = em_f1(pred, golds)
        assert got_em == em
        assert got_f1 == pytest.approx(f1, abs=1e-15)

    def test_case_count(self):
        assert len(EM_F1_CASES) >= 20

    def test_no_golds(self):
        with pytest.raises(ValueError):
            em_f1("x", [])

    def test_normalize(self):
        assert normalize_answer("The  Quick, brown fox!") == "quick brown fox"

    words = st.lists(st.text("bcdefghijklmnopqrstuvwxyz", min_size=1, max_size=6), min_size=1, max_size=4)

    @given(words, words, st.sampled_from(["", "the ", "a ", "An "]), st.sampled_from(["", ".", "!", ","]),
           st.booleans())
    @settings(max_examples=200, deadline=None)
    def test_decoration_invariance(self, pred, gold, article, punct, upper):
        p, g = " ".join(pred), " ".join(gold)
        decorated = article + (p.upper() if upper else p) + punct
        assert em_f1(decorated, [g]) == em_f1(p, [g])
        assert em_f1(p, [article + g + punct]) == em_f1(p, [g])
        em, f1 = em_f1(p, [g])
        if em == 1.0:
            assert f1 == 1.0

    def test_report_fractions(self):
        data = gen_synthetic_mrc(4, seed=0)
        preds = {data[0].id: data[0].answers[0], data[1].id: "nonsense"}
        rep = evaluate_predictions(preds, data)
        assert rep.em == 0.25
        assert len(rep.records) == 4


class TestExportAttention:
    def model_state(self, mode, self_mode):
        data = gen_synthetic_mrc(2, seed=0)
        cfg = ModelConfig(input=InputConfig(6, 4, 2, 2), hidden=8, att_k=6, fusion_mode=mode, self_mode=self_mode)
        return MrcModel.for_examples(cfg, data).encode(data[0])

    def test_full_model_levels(self, tmp_path):
        path = tmp_path / "a.jsonl"
        n = export_attention(self.model_state("fa_multi_level", "fully_aware"), "e0", path)
        recs = [json.loads(x) for x in path.read_text().splitlines()]
        assert n == 5
        assert {r["level"] for r in recs} == {"word", "low", "high", "understanding", "self"}
        for r in recs:
            w = np.array(r["weights"]).reshape(r["rows"], r["cols"])
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
            assert r["example_id"] == "e0"

    def test_high_level_single(self, tmp_path):
        path = tmp_path / "a.jsonl"
        export_attention(self.model_state("high_level", "none"), "e0", path)
        assert [json.loads(x)["level"] for x in path.read_text().splitlines()] == ["high"]

    def test_rejects_non_stochastic(self, tmp_path):
        class S:
            attention = {"bad": AttentionWeights(np.array([[0.5, 0.6]]), "bad")}

        path = tmp_path / "a.jsonl"
        with pytest.raises(ValueError):
            export_attention(S(), "x", path)
        assert not path.exists()
