import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchdistill import corpus as cp
from branchdistill import evaluation as ev
from branchdistill import model as md
from branchdistill.errors import InvalidConfig, NoValidSpan


def brute_force_decode(z_s, z_e, valid, max_answer_length):
    """Independent oracle: exhaustive scan over all (s, e) pairs with
    explicit lexicographic tie-breaking."""
    best = None
    best_score = None
    for s in range(len(z_s)):
        if not valid[s]:
            continue
        for e in range(s, min(s + max_answer_length, len(z_s))):
            if not valid[e]:
                continue
            score = z_s[s] + z_e[e]
            if best_score is None or score > best_score:
                best, best_score = (s, e), score
    if best is None:
        raise NoValidSpan("oracle: nothing valid")
    return best


class TestDecodeSpan:
    def test_unconstrained_argmax(self):
        assert ev.decode_span([5.0, 0.0, 0.0], [0.0, 0.0, 5.0], [True] * 3, 3) == (0, 2)

    def test_length_one_constraint(self):
        z_s = np.array([1.0, 4.0, 0.0])
        z_e = np.array([2.0, 1.0, 3.0])
        assert ev.decode_span(z_s, z_e, [True] * 3, 1) == (1, 1)

    def test_ties_prefer_smaller_start_then_end(self):
        zeros = np.zeros(4)
        assert ev.decode_span(zeros, zeros, [True] * 4, 2) == (0, 0)
        assert ev.decode_span(zeros, zeros, [False, True, True, True], 2) == (1, 1)

    def test_no_valid_position(self):
        with pytest.raises(NoValidSpan):
            ev.decode_span([1.0, 2.0], [1.0, 2.0], [False, False], 3)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        z_s = rng.normal(size=10)
        z_e = rng.normal(size=10)
        valid = rng.random(10) > 0.3
        valid[4] = True
        base = ev.decode_span(z_s, z_e, valid, 5)
        assert ev.decode_span(z_s + 17.5, z_e, valid, 5) == base
        assert ev.decode_span(z_s, z_e - 3.25, valid, 5) == base

    @given(st.data())
    @settings(deadline=None, max_examples=200)
    def test_matches_brute_force_oracle(self, data):
        length = data.draw(st.integers(2, 12))
        # small integer grid forces plenty of ties
        z_s = np.array(data.draw(st.lists(st.integers(-3, 3), min_size=length, max_size=length)), dtype=float)
        z_e = np.array(data.draw(st.lists(st.integers(-3, 3), min_size=length, max_size=length)), dtype=float)
        valid = np.array(data.draw(st.lists(st.booleans(), min_size=length, max_size=length)))
        if not valid.any():
            valid[data.draw(st.integers(0, length - 1))] = True
        maxlen = data.draw(st.integers(1, length + 2))
        assert ev.decode_span(z_s, z_e, valid, maxlen) == brute_force_decode(z_s, z_e, valid, maxlen)


class TestMetrics:
    def test_exact_match_basic(self):
        assert ev.exact_match(["a", "b"], ["a", "b"]) == 1
        assert ev.exact_match(["a", "b"], ["a", "c"]) == 0
        assert ev.exact_match([], []) == 1

    def test_f1_hand_evaluated_overlap(self):
        # overlap 2 of 3 on both sides -> P = R = 2/3 -> F1 = 2/3
        f1 = ev.f1_score(["cat", "sat", "down"], ["the", "cat", "sat"])
        assert abs(f1 - 2 / 3) <= 1e-12

    def test_f1_identical_and_disjoint(self):
        assert ev.f1_score(["x", "y"], ["x", "y"]) == 1.0
        assert ev.f1_score(["x"], ["y"]) == 0.0
        assert ev.f1_score([], []) == 1.0
        assert ev.f1_score([], ["y"]) == 0.0

    def test_f1_counts_multiplicity(self):
        assert abs(ev.f1_score(["a", "a"], ["a"]) - 2 / 3) <= 1e-12

    token_lists = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=6)

    @given(token_lists, token_lists)
    @settings(deadline=None)
    def test_f1_symmetry_and_bounds(self, x, y):
        assert ev.f1_score(x, y) == ev.f1_score(y, x)
        assert 0.0 <= ev.f1_score(x, y) <= 1.0

    @given(token_lists)
    @settings(deadline=None)
    def test_exact_match_implies_full_f1(self, x):
        assert ev.f1_score(x, x) == 1.0
        assert ev.exact_match(x, x) == 1


def fixed_layout_samples(n, lang="en"):
    """Passages with the answer always at passage position (1, 1)."""
    samples = []
    for i in range(n):
        samples.append(cp.Sample(
            id=f"s{i}",
            question_tokens=("what", f"cue{i % 3}"),
            passage_tokens=(f"cue{i % 3}", f"ans{i % 4:02d}", "eoa", f"w{i % 5}"),
            gold_start=1,
            gold_end=1,
            passage_lang=lang,
            question_lang=lang,
        ))
    return samples


class TestEvaluate:
    def _zero_model(self, vocab, max_len=16):
        config = md.ModelConfig(vocab_size=vocab.size, hidden=8, ffn=8, max_len=max_len, layers=0)
        model = md.init_model(config, seed=0)
        for p in model.params.values():
            p[:] = 0.0
        return model

    def test_oracle_biases_give_perfect_scores(self):
        samples = fixed_layout_samples(10)
        vocab = md.Vocabulary.from_samples(samples)
        model = self._zero_model(vocab)
        # every sample's gold sits at the same packed position
        enc = md.tokenize_and_index(samples[0], vocab, model.config.max_len)
        model.params["start_bias"][enc.gold_start] = 10.0
        model.params["end_bias"][enc.gold_end] = 10.0
        report = ev.evaluate(model, samples, vocab)
        assert report.overall_em == 1.0
        assert report.overall_f1 == 1.0

    def test_uniform_logits_match_first_position_baseline(self):
        # all-equal logits decode to the first valid pair; EM must equal the
        # fraction of golds sitting exactly there
        records = cp.generate_synthetic_corpus(
            40, ["en"], cp.NoiseSpec(seed=1),
            cp.TaskSpec(seed=1, passage_min=4, passage_max=7, rare_vocab_size=20),
        )
        samples = cp.build_translate_train(records, "en").samples
        vocab = md.Vocabulary.from_samples(samples)
        model = self._zero_model(vocab, max_len=32)
        expected = sum(1 for s in samples if (s.gold_start, s.gold_end) == (0, 0)) / len(samples)
        report = ev.evaluate(model, samples, vocab)
        assert report.overall_em == expected

    def test_counts_include_skips(self):
        samples = fixed_layout_samples(6)
        long_passage = tuple(f"w{i}" for i in range(40))
        samples.append(cp.Sample(
            id="long", question_tokens=("what",), passage_tokens=long_passage,
            gold_start=39, gold_end=39, passage_lang="en", question_lang="en",
        ))
        vocab = md.Vocabulary.from_samples(samples)
        model = self._zero_model(vocab)
        report = ev.evaluate(model, samples, vocab)
        assert report.skips == 1
        assert sum(c.n for c in report.cells) == 6
        assert report.n == 6

    def test_order_invariance(self):
        samples = fixed_layout_samples(8) + fixed_layout_samples(8, lang="es")
        vocab = md.Vocabulary.from_samples(samples)
        model = self._zero_model(vocab)
        forward = ev.evaluate(model, samples, vocab)
        backward = ev.evaluate(model, samples[::-1], vocab)
        assert forward.to_dict() == backward.to_dict()

    def test_report_json_round_trip(self, tmp_path):
        samples = fixed_layout_samples(5)
        vocab = md.Vocabulary.from_samples(samples)
        report = ev.evaluate(self._zero_model(vocab), samples, vocab)
        report.save(tmp_path / "report.json")
        loaded = ev.EvalReport.load(tmp_path / "report.json")
        assert loaded.to_dict() == report.to_dict()


def report_from_cells(cells):
    report = ev.EvalReport(
        cells=[ev.CellMetrics(*c) for c in cells],
    )
    report.n = sum(c.n for c in report.cells)
    report.overall_em = sum(c.em * c.n for c in report.cells) / report.n
    report.overall_f1 = sum(c.f1 * c.n for c in report.cells) / report.n
    return report


class TestCompareRuns:
    def test_single_report_has_zero_deltas(self):
        report = report_from_cells([("en", "en", 0.5, 0.6, 10)])
        comparison = ev.compare_runs([report], ["only"])
        assert comparison["rows"][0]["cells"]["en/en"]["em_delta"] == 0.0

    def test_identical_reports_have_zero_deltas(self):
        report = report_from_cells([("en", "en", 0.5, 0.6, 10), ("en", "es", 0.4, 0.5, 10)])
        comparison = ev.compare_runs([report, report], ["a", "b"])
        for row in comparison["rows"]:
            for cell in row["cells"].values():
                assert cell["em_delta"] == 0.0 and cell["f1_delta"] == 0.0

    def test_delta_arithmetic(self):
        base = report_from_cells([("en", "en", 0.50, 0.70, 10)])
        run = report_from_cells([("en", "en", 0.54, 0.73, 10)])
        comparison = ev.compare_runs([base, run], ["base", "run"], baseline=0)
        cell = comparison["rows"][1]["cells"]["en/en"]
        assert abs(cell["em_delta"] - 0.04) <= 1e-12
        assert abs(cell["f1_delta"] - 0.03) <= 1e-12

    def test_mismatched_grids_rejected(self):
        a = report_from_cells([("en", "en", 0.5, 0.6, 10)])
        b = report_from_cells([("es", "es", 0.5, 0.6, 10)])
        with pytest.raises(InvalidConfig):
            ev.compare_runs([a, b], ["a", "b"])

    def test_render_marks_baseline(self):
        report = report_from_cells([("en", "en", 0.5, 0.6, 10)])
        text = ev.render_comparison(ev.compare_runs([report, report], ["a", "b"], baseline=1))
        lines = text.splitlines()
        assert any(line.endswith("*") and line.startswith("b") for line in lines)
        assert "0.500 / 0.600" in text


class TestMergeReports:
    def test_disjoint_merge(self):
        a = report_from_cells([("en", "en", 1.0, 1.0, 10)])
        b = report_from_cells([("es", "es", 0.5, 0.5, 30)])
        merged = ev.merge_reports([a, b])
        assert merged.n == 40
        assert abs(merged.overall_em - (10 * 1.0 + 30 * 0.5) / 40) <= 1e-12
        assert merged.grid_keys() == [("en", "en"), ("es", "es")]

    def test_overlapping_cells_rejected(self):
        a = report_from_cells([("en", "en", 1.0, 1.0, 10)])
        with pytest.raises(InvalidConfig):
            ev.merge_reports([a, a])
