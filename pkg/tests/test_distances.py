import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffkd.distances import (
    correlation_terms,
    dist_correlation_distance,
    kl_divergence_distance,
    make_distance,
    mse_distance,
)
from diffkd.errors import ConfigError, ShapeError


def kl_oracle(p, q):
    """Direct sum p_i * log(p_i / q_i) in Python floats."""
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


class TestMse:
    def test_identical_inputs(self):
        x = torch.randn(3, 4)
        assert mse_distance(x, x).item() == 0.0

    def test_unit_gap(self):
        assert mse_distance(torch.ones(2, 5), torch.zeros(2, 5)).item() == 1.0

    def test_hand_computed_value(self):
        a = torch.tensor([[1.0, 3.0]])
        b = torch.tensor([[2.0, 1.0]])
        assert mse_distance(a, b).item() == pytest.approx(2.5, abs=1e-6)

    def test_symmetric(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.randn(4, 6, generator=g), torch.randn(4, 6, generator=g)
        torch.testing.assert_close(mse_distance(a, b), mse_distance(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_distance(torch.zeros(2, 2), torch.zeros(2, 3))


class TestKl:
    def test_identical_logits_give_zero_for_any_temperature(self):
        logits = torch.randn(5, 7, generator=torch.Generator().manual_seed(1))
        for temp in (0.5, 1.0, 4.0):
            value = kl_divergence_distance(logits, logits, temp).item()
            assert abs(value) <= 1e-9

    def test_quarter_three_quarter_against_uniform(self):
        teacher = torch.tensor([[0.0, math.log(3.0)]], dtype=torch.float64)
        student = torch.zeros(1, 2, dtype=torch.float64)
        value = kl_divergence_distance(student, teacher, 1.0).item()
        oracle = kl_oracle([0.25, 0.75], [0.5, 0.5])
        assert value == pytest.approx(oracle, abs=1e-9)
        assert value == pytest.approx(0.1308, abs=1e-4)

    def test_non_negative(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(20):
            s, t = torch.randn(4, 6, generator=g), torch.randn(4, 6, generator=g)
            assert kl_divergence_distance(s, t).item() >= -1e-9

    def test_asymmetric_on_generic_pair(self):
        s = torch.tensor([[0.0, 1.0, 3.0]])
        t = torch.tensor([[2.0, 0.0, 1.0]])
        forward = kl_divergence_distance(s, t).item()
        backward = kl_divergence_distance(t, s).item()
        assert abs(forward - backward) > 1e-3

    def test_temperature_scaling_convention(self):
        # at tau the value equals tau^2 * KL of the tau-softened distributions
        s = torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64)
        t = torch.tensor([[0.0, 1.0, 2.0]], dtype=torch.float64)
        tau = 3.0
        p = torch.softmax(t / tau, dim=1)[0]
        q = torch.softmax(s / tau, dim=1)[0]
        oracle = tau * tau * kl_oracle(p.tolist(), q.tolist())
        assert kl_divergence_distance(s, t, tau).item() == pytest.approx(oracle, abs=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError, match="temperature"):
            kl_divergence_distance(torch.zeros(2, 2), torch.zeros(2, 2), 0.0)
        with pytest.raises(ShapeError):
            kl_divergence_distance(torch.zeros(2, 2, 2), torch.zeros(2, 2, 2))


class TestCorrelation:
    def test_identical_inputs_give_zero(self):
        x = torch.randn(4, 6, generator=torch.Generator().manual_seed(3))
        assert dist_correlation_distance(x, x).item() == pytest.approx(0.0, abs=1e-9)

    def test_global_affine_invariance(self):
        t = torch.randn(4, 6, generator=torch.Generator().manual_seed(4)).double()
        s = 2.0 * t + 1.0
        assert dist_correlation_distance(s, t).item() == pytest.approx(0.0, abs=1e-9)

    def test_per_row_affine_invariance(self):
        g = torch.Generator().manual_seed(5)
        t = torch.randn(5, 8, generator=g).double()
        scales = torch.rand(5, 1, generator=g).double() + 0.1
        shifts = torch.randn(5, 1, generator=g).double()
        s = scales * t + shifts
        assert dist_correlation_distance(s, t).item() == pytest.approx(0.0, abs=1e-9)
        assert dist_correlation_distance(t, s).item() == pytest.approx(0.0, abs=1e-9)

    def test_anticorrelated_single_row_inter_term(self):
        teacher = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        student = torch.tensor([[3.0, 2.0, 1.0]], dtype=torch.float64)
        inter, intra = correlation_terms(student, teacher)
        assert inter.item() == pytest.approx(2.0, abs=1e-9)
        # one sample per class column: zero variance, correlation defined as 0
        assert intra.item() == pytest.approx(1.0, abs=1e-9)

    def test_zero_variance_row_counts_as_zero_correlation(self):
        teacher = torch.tensor([[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]]).double()
        student = torch.tensor([[5.0, 5.0, 5.0], [0.0, 1.0, 2.0]]).double()
        inter, _ = correlation_terms(student, teacher)
        # first row contributes 0 correlation, second contributes 1
        assert inter.item() == pytest.approx(1.0 - 0.5, abs=1e-9)

    @given(
        scale=st.floats(0.05, 20.0),
        shift=st.floats(-5.0, 5.0),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=40, deadline=None)
    def test_affine_invariance_property(self, scale, shift, seed):
        t = torch.randn(3, 5, generator=torch.Generator().manual_seed(seed)).double()
        s = scale * t + shift
        assert dist_correlation_distance(s, t).item() == pytest.approx(0.0, abs=1e-9)


class TestDispatch:
    def test_known_kinds(self):
        a = torch.randn(2, 4)
        assert make_distance("mse")(a, a).item() == 0.0
        assert make_distance("kl", 2.0)(a, a).item() == pytest.approx(0.0, abs=1e-9)
        assert make_distance("dist")(a, a).item() == pytest.approx(0.0, abs=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown distance"):
            make_distance("wasserstein")

    def test_bad_temperature(self):
        with pytest.raises(ConfigError, match="temperature"):
            make_distance("kl", 0.0)
