import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchdistill import distill as ds
from branchdistill import numerics as nm
from branchdistill.errors import (
    IncompleteLogits,
    InvalidConfig,
    InvalidLabel,
    InvalidParameter,
)

from _gradcheck import check_gradients

finite_floats = st.floats(min_value=-20.0, max_value=20.0, allow_nan=False)


def one_hot(length, index):
    v = np.zeros(length)
    v[index] = 1.0
    return v


def record(z_s, z_e, sample_id="s", teacher_id="t"):
    return ds.LogitRecord(
        sample_id=sample_id, teacher_id=teacher_id,
        z_s=np.asarray(z_s, dtype=float), z_e=np.asarray(z_e, dtype=float),
    )


class TestNllLoss:
    def test_one_hot_at_gold_is_zero(self):
        assert ds.nll_loss(one_hot(5, 2), one_hot(5, 4), 2, 4) == 0.0

    def test_uniform_over_ten(self):
        uniform = np.full(10, 0.1)
        assert abs(ds.nll_loss(uniform, uniform, 3, 7) - 2 * math.log(10.0)) <= 1e-12

    def test_hand_evaluated_logs(self):
        p_s = np.array([0.5, 0.5])
        p_e = np.array([0.25, 0.75])
        expected = math.log(2.0) + math.log(4.0)
        assert abs(ds.nll_loss(p_s, p_e, 0, 0) - expected) <= 1e-12

    def test_out_of_range_gold(self):
        with pytest.raises(InvalidLabel):
            ds.nll_loss(one_hot(3, 0), one_hot(3, 0), 0, 3)


class TestAggregateLogits:
    def test_single_teacher_identity(self):
        r = record([1.0, -2.0, 3.0], [0.0, 4.0, -1.0])
        z_s, z_e = ds.aggregate_logits([r], ds.fixed_weights(1))
        np.testing.assert_array_equal(z_s, r.z_s)
        np.testing.assert_array_equal(z_e, r.z_e)

    def test_symmetric_pair(self):
        a = record([1.0, 3.0], [1.0, 3.0])
        b = record([3.0, 1.0], [3.0, 1.0])
        z_s, _ = ds.aggregate_logits([a, b], ds.fixed_weights(2))
        np.testing.assert_allclose(z_s, [2.0, 2.0], atol=1e-12)

    def test_hand_computed_weighting(self):
        a = record([0.0, 3.0], [0.0, 0.0])
        b = record([3.0, 0.0], [0.0, 0.0])
        weights = ds.TeacherWeights(start=np.array([2 / 3, 1 / 3]), end=np.array([0.5, 0.5]))
        z_s, _ = ds.aggregate_logits([a, b], weights)
        np.testing.assert_allclose(z_s, [1.0, 2.0], atol=1e-12)

    def test_missing_teacher(self):
        with pytest.raises(IncompleteLogits):
            ds.aggregate_logits([record([1.0], [1.0])], ds.fixed_weights(2))

    def test_invalid_weights(self):
        bad = ds.TeacherWeights(start=np.array([0.7, 0.7]), end=np.array([0.5, 0.5]))
        with pytest.raises(InvalidParameter):
            ds.aggregate_logits([record([1.0], [1.0]), record([2.0], [2.0])], bad)

    @given(st.lists(st.lists(finite_floats, min_size=3, max_size=3), min_size=2, max_size=4),
           st.floats(min_value=-3.0, max_value=3.0))
    @settings(deadline=None)
    def test_linearity(self, teacher_rows, alpha):
        records = [record(row, row) for row in teacher_rows]
        scaled = [record(alpha * np.array(row), alpha * np.array(row)) for row in teacher_rows]
        weights = ds.fixed_weights(len(records))
        z_s, _ = ds.aggregate_logits(records, weights)
        z_s_scaled, _ = ds.aggregate_logits(scaled, weights)
        np.testing.assert_allclose(z_s_scaled, alpha * z_s, atol=1e-9)


class TestKdLoss:
    def test_matching_logits_give_scaled_entropies(self):
        rng = np.random.default_rng(0)
        z_s = rng.normal(size=8)
        z_e = rng.normal(size=8)
        for tau in (1.0, 2.0, 4.0):
            expected = tau * tau * (
                nm.entropy(nm.softmax_temperature(z_s, tau))
                + nm.entropy(nm.softmax_temperature(z_e, tau))
            )
            assert abs(ds.kd_loss(z_s, z_e, z_s, z_e, tau) - expected) <= 1e-9

    def test_sharp_agreement_is_near_zero(self):
        z = np.array([50.0, 0.0, 0.0])
        assert ds.kd_loss(z, z, z, z, 1.0) <= 1e-6

    def test_temperature_squared_factor(self):
        # doubling logits and temperature keeps the distributions fixed,
        # so only the tau^2 factor changes
        rng = np.random.default_rng(1)
        z_t_s, z_t_e = rng.normal(size=6), rng.normal(size=6)
        z_s_s, z_s_e = rng.normal(size=6), rng.normal(size=6)
        at_tau_1 = ds.kd_loss(z_t_s, z_t_e, z_s_s, z_s_e, 1.0)
        at_tau_2 = ds.kd_loss(2 * z_t_s, 2 * z_t_e, 2 * z_s_s, 2 * z_s_e, 2.0)
        assert abs(at_tau_2 - 4.0 * at_tau_1) <= 1e-12

    def test_non_positive_temperature(self):
        z = np.zeros(4)
        with pytest.raises(InvalidParameter):
            ds.kd_loss(z, z, z, z, 0.0)

    @given(st.lists(finite_floats, min_size=2, max_size=6),
           st.lists(finite_floats, min_size=2, max_size=6),
           st.floats(min_value=0.5, max_value=4.0))
    @settings(deadline=None)
    def test_gibbs_lower_bound(self, a, b, tau):
        length = min(len(a), len(b))
        z_t = np.array(a[:length])
        z_s = np.array(b[:length])
        floor = tau * tau * 2 * nm.entropy(nm.softmax_temperature(z_t, tau))
        assert ds.kd_loss(z_t, z_t, z_s, z_s, tau) >= floor - 1e-9

    def test_gradient_matches_softened_difference(self):
        # d kd / d student_z = tau * (p_student - p_teacher) per position
        rng = np.random.default_rng(2)
        tau = 2.0
        teacher_p = nm.softmax_temperature(rng.normal(size=(2, 5)), tau)
        student_z = rng.normal(size=(2, 5))

        zt = nm.Tensor(student_z, requires_grad=True)
        result = SimpleNamespace(z_s_t=zt, z_e_t=nm.Tensor(np.zeros((2, 5))))
        loss = ds.batch_kd(result, teacher_p, np.full((2, 5), 0.2), tau)
        nm.backward(loss)
        expected = tau * (nm.softmax_temperature(student_z, tau) - teacher_p) / 2
        np.testing.assert_allclose(zt.grad, expected, atol=1e-12)

        def value():
            fresh = SimpleNamespace(z_s_t=nm.Tensor(student_z), z_e_t=nm.Tensor(np.zeros((2, 5))))
            return float(ds.batch_kd(fresh, teacher_p, np.full((2, 5), 0.2), tau).data)

        check_gradients(value, {"z": student_z}, {"z": zt.grad})


class TestTotalLoss:
    def test_pure_hard_label(self):
        breakdown = ds.total_loss(2.0, 1.0, lambda1=1.0, lambda2=0.0)
        assert breakdown.total == 2.0

    def test_default_halves(self):
        breakdown = ds.total_loss(2.0, 1.0)
        assert abs(breakdown.total - 1.5) <= 1e-12

    def test_pure_distillation(self):
        assert ds.total_loss(2.0, 1.0, lambda1=0.0, lambda2=1.0).total == 1.0

    def test_breakdown_identity(self):
        breakdown = ds.total_loss(0.731, 2.113, lambda1=0.3, lambda2=0.9)
        assert abs(breakdown.total - (0.3 * 0.731 + 0.9 * 2.113)) <= 1e-12

    def test_negative_weights_rejected(self):
        with pytest.raises(InvalidParameter):
            ds.total_loss(1.0, 1.0, lambda1=-0.1)


class TestFixedWeights:
    @pytest.mark.parametrize("k,expected", [(3, 1 / 3), (1, 1.0), (4, 0.25)])
    def test_uniform(self, k, expected):
        weights = ds.fixed_weights(k)
        np.testing.assert_allclose(weights.start, expected, atol=1e-15)
        np.testing.assert_allclose(weights.end, expected, atol=1e-15)

    def test_zero_teachers(self):
        with pytest.raises(InvalidConfig):
            ds.fixed_weights(0)


class TestImpurityWeights:
    def test_identical_teachers_are_exactly_uniform(self):
        z = np.array([0.4, -1.0, 2.2])
        for sign in (1, -1):
            w = ds.impurity_weights([z, z.copy(), z.copy()], sign)
            assert w[0] == w[1] == w[2]
            assert abs(w.sum() - 1.0) <= 1e-12

    def test_worked_example_entropies(self):
        # teacher A: p = [1/2, 1/2, 0] -> impurity ln 2; teacher B: one-hot -> 0
        z_half = np.array([0.0, 0.0, -1e9])
        z_sharp = np.array([0.0, -1e9, -1e9])
        w_plus = ds.impurity_weights([z_half, z_sharp], sign=1)
        np.testing.assert_allclose(w_plus, [2 / 3, 1 / 3], atol=1e-9)
        w_minus = ds.impurity_weights([z_half, z_sharp], sign=-1)
        np.testing.assert_allclose(w_minus, [1 / 3, 2 / 3], atol=1e-9)

    def test_bad_sign(self):
        with pytest.raises(InvalidParameter):
            ds.impurity_weights([np.zeros(3)], sign=2)

    def test_empty_teacher_list(self):
        with pytest.raises(InvalidConfig):
            ds.impurity_weights([])

    @given(st.lists(st.lists(finite_floats, min_size=4, max_size=4), min_size=1, max_size=5),
           st.sampled_from([1, -1]))
    @settings(deadline=None)
    def test_simplex(self, rows, sign):
        w = ds.impurity_weights([np.array(r) for r in rows], sign)
        assert np.all(w >= 0.0)
        assert abs(w.sum() - 1.0) <= 1e-9

    def test_shift_of_impurities_leaves_weights_unchanged(self):
        rng = np.random.default_rng(3)
        impurities = np.array([nm.entropy(nm.softmax_temperature(rng.normal(size=6), 1.0))
                               for _ in range(4)])
        base = nm.softmax_temperature(impurities, 1.0)
        shifted = nm.softmax_temperature(impurities + 11.75, 1.0)
        np.testing.assert_allclose(shifted, base, atol=1e-12)


class TestLogitStore:
    def _records(self, n, max_len=6, seed=0):
        rng = np.random.default_rng(seed)
        return [
            record(rng.normal(size=max_len), rng.normal(size=max_len),
                   sample_id=f"s{i}", teacher_id="en")
            for i in range(n)
        ]

    def test_round_trip(self, tmp_path):
        records = self._records(5)
        path = tmp_path / "en.logits"
        ds.write_logit_store(path, "en", 6, records)
        store = ds.LogitStore(path)
        assert store.teacher_id == "en"
        assert store.count == 5
        for r in records:
            loaded = store.get(r.sample_id)
            np.testing.assert_array_equal(loaded.z_s, r.z_s)
            np.testing.assert_array_equal(loaded.z_e, r.z_e)

    def test_missing_sample(self, tmp_path):
        path = tmp_path / "en.logits"
        ds.write_logit_store(path, "en", 6, self._records(2))
        with pytest.raises(IncompleteLogits):
            ds.LogitStore(path).get("absent")

    def test_duplicate_sample_id_rejected(self, tmp_path):
        records = self._records(2)
        records[1] = record(records[1].z_s, records[1].z_e, sample_id=records[0].sample_id)
        with pytest.raises(InvalidConfig):
            ds.write_logit_store(tmp_path / "dup.logits", "en", 6, records)

    def test_write_is_deterministic(self, tmp_path):
        records = self._records(4)
        ds.write_logit_store(tmp_path / "a.logits", "en", 6, records)
        ds.write_logit_store(tmp_path / "b.logits", "en", 6, records)
        assert (tmp_path / "a.logits").read_bytes() == (tmp_path / "b.logits").read_bytes()
