import math

import numpy as np
import numpy.testing as npt
import pytest

from symcons import autodiff as ad
from symcons.autodiff import ComputationTape, Tensor, gradient_check
from symcons.objective import (
    LambdaSchedule,
    LossBreakdown,
    combined_loss,
    cross_entropy,
    js_divergence,
    kl_divergence,
    lambda_at,
)


def random_prob_pair(rng, n=2):
    p = rng.random(n) + 1e-3
    q = rng.random(n) + 1e-3
    return p / p.sum(), q / q.sum()


class TestCrossEntropy:
    def test_certainty_is_zero(self):
        assert cross_entropy(1, np.array([0.0, 1.0])) == 0.0

    def test_hand_value(self):
        npt.assert_allclose(cross_entropy(1, np.array([0.25, 0.75])), -math.log(0.75), atol=1e-12)
        npt.assert_allclose(cross_entropy(1, np.array([0.25, 0.75])), 0.287682, atol=1e-6)

    def test_clamp_floor(self):
        value = cross_entropy(0, np.array([0.0, 1.0]))
        npt.assert_allclose(value, -math.log(1e-7), atol=1e-9)
        npt.assert_allclose(value, 16.1181, atol=1e-4)

    def test_batch_is_mean_of_rows(self):
        probs = np.array([[0.25, 0.75], [0.9, 0.1]])
        targets = np.array([1, 0])
        expected = (-math.log(0.75) - math.log(0.9)) / 2
        npt.assert_allclose(cross_entropy(targets, probs), expected, atol=1e-12)

    def test_invalid_class_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy(2, np.array([0.5, 0.5]))

    def test_invalid_probabilities_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            cross_entropy(0, np.array([0.5, 0.4]))
        with pytest.raises(ValueError, match="nonnegative"):
            cross_entropy(0, np.array([-0.5, 1.5]))


class TestKLDivergence:
    def test_identity_is_zero(self):
        p = np.array([0.3, 0.7])
        assert kl_divergence(p, p) == 0.0

    def test_hand_value(self):
        p = np.array([0.5, 0.5])
        q = np.array([0.25, 0.75])
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        npt.assert_allclose(kl_divergence(p, q), expected, atol=1e-12)
        npt.assert_allclose(kl_divergence(p, q), 0.143841, atol=1e-6)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p, q = random_prob_pair(rng)
            assert kl_divergence(p, q) >= 0.0

    def test_zero_support_terms_contribute_zero(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.5, 0.5])
        npt.assert_allclose(kl_divergence(p, q), math.log(2), atol=1e-9)

    def test_zero_iff_close(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p, q = random_prob_pair(rng)
            d = kl_divergence(p, q)
            if np.max(np.abs(p - q)) > 1e-6:
                assert d > 0.0
        p = np.array([0.4, 0.6])
        assert kl_divergence(p, p.copy()) == 0.0


class TestJSDivergence:
    def test_identity_is_zero(self):
        p = np.array([0.2, 0.8])
        assert js_divergence(p, p) == 0.0

    def test_disjoint_supports_reach_ln2(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.0, 1.0])
        npt.assert_allclose(js_divergence(p, q), math.log(2), atol=1e-9)

    def test_symmetry_on_random_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            p, q = random_prob_pair(rng)
            npt.assert_allclose(js_divergence(p, q), js_divergence(q, p), atol=1e-12)

    def test_bounded_by_ln2(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            p, q = random_prob_pair(rng)
            d = js_divergence(p, q)
            assert 0.0 <= d <= math.log(2) + 1e-12


class TestCombinedLoss:
    def test_lambda_zero_reduces_to_double_ce(self):
        p = np.array([0.3, 0.7])
        q = np.array([0.6, 0.4])
        out = combined_loss(1, p, q, lam=0.0, div="kl")
        npt.assert_allclose(out.total, out.ce_l2r + out.ce_r2l, atol=1e-15)
        npt.assert_allclose(out.divergence * 0.0, 0.0)

    def test_identical_distributions_have_zero_divergence(self):
        p = np.array([0.3, 0.7])
        out = combined_loss(1, p, p.copy(), lam=10.0, div="js")
        assert out.divergence == 0.0
        npt.assert_allclose(out.total, 2 * cross_entropy(1, p), atol=1e-15)

    def test_hand_value_of_combined_objective(self):
        # independent evaluation of the three closed-form terms
        p = np.array([0.3, 0.7])
        q = np.array([0.6, 0.4])
        lam = 10.0
        ce_a = -math.log(0.7)
        ce_b = -math.log(0.4)
        kl = 0.3 * math.log(0.3 / 0.6) + 0.7 * math.log(0.7 / 0.4)
        out = combined_loss(1, p, q, lam=lam, div="kl")
        npt.assert_allclose(out.ce_l2r, ce_a, atol=1e-12)
        npt.assert_allclose(out.ce_r2l, ce_b, atol=1e-12)
        npt.assert_allclose(out.divergence, kl, atol=1e-12)
        npt.assert_allclose(out.total, ce_a + ce_b + lam * kl, atol=1e-12)

    def test_kl_direction_is_l2r_given_r2l(self):
        p = np.array([0.9, 0.1])
        q = np.array([0.5, 0.5])
        out = combined_loss(0, p, q, lam=1.0, div="kl")
        npt.assert_allclose(out.divergence, kl_divergence(p, q), atol=1e-15)
        assert out.divergence != pytest.approx(kl_divergence(q, p))

    def test_kl_direction_variants(self):
        p = np.array([0.9, 0.1])
        q = np.array([0.5, 0.5])
        reverse = combined_loss(0, p, q, lam=1.0, div="kl", kl_direction="reverse")
        npt.assert_allclose(reverse.divergence, kl_divergence(q, p), atol=1e-15)
        symmetric = combined_loss(0, p, q, lam=1.0, div="kl", kl_direction="symmetric")
        expected = 0.5 * (kl_divergence(p, q) + kl_divergence(q, p))
        npt.assert_allclose(symmetric.divergence, expected, atol=1e-15)
        with pytest.raises(ValueError, match="kl_direction"):
            combined_loss(0, p, q, lam=1.0, div="kl", kl_direction="sideways")

    def test_total_invariant_by_construction(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p, q = random_prob_pair(rng)
            lam = float(rng.random() * 20)
            out = combined_loss(int(rng.integers(0, 2)), p, q, lam=lam, div="js")
            assert out.total == out.ce_l2r + out.ce_r2l + out.lam * out.divergence

    def test_divergence_shrinks_to_zero_along_mixture_path(self):
        # 1-parameter family q_t = (1-t) q + t p: divergence decreases to 0
        p = np.array([0.8, 0.2])
        q = np.array([0.3, 0.7])
        prev = None
        for t in np.linspace(0.0, 1.0, 11):
            qt = (1 - t) * q + t * p
            out = combined_loss(1, p, qt / qt.sum(), lam=3.0, div="kl")
            if prev is not None:
                assert out.divergence <= prev + 1e-12
            prev = out.divergence
        assert prev == 0.0

    def test_rejects_negative_lambda_and_unknown_divergence(self):
        p = np.array([0.5, 0.5])
        with pytest.raises(ValueError):
            combined_loss(0, p, p, lam=-1.0, div="kl")
        with pytest.raises(ValueError):
            combined_loss(0, p, p, lam=1.0, div="hellinger")

    def test_tensor_route_matches_float_route_and_is_differentiable(self):
        rng = np.random.default_rng(5)
        logits_a = Tensor(rng.normal(size=(2, 2)), requires_grad=True, name="la")
        logits_b = Tensor(rng.normal(size=(2, 2)), requires_grad=True, name="lb")
        targets = np.array([1, 0])
        for div in ("kl", "js"):
            with ComputationTape() as tape:
                p = ad.softmax(logits_a)
                q = ad.softmax(logits_b)
                out = combined_loss(targets, p, q, lam=4.0, div=div)
            float_out = combined_loss(targets, p.data, q.data, lam=4.0, div=div)
            npt.assert_allclose(out.total, float_out.total, atol=1e-12)
            assert out.node is not None and out.node.item() == out.total

    def test_gradient_through_softmax_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits_a = Tensor(rng.normal(size=(2, 2)), requires_grad=True, name="la")
        logits_b = Tensor(rng.normal(size=(2, 2)), requires_grad=True, name="lb")
        targets = np.array([1, 0])
        for div in ("kl", "js"):
            report = gradient_check(
                lambda div=div: combined_loss(
                    targets, ad.softmax(logits_a), ad.softmax(logits_b), lam=4.0, div=div
                ).node,
                [logits_a, logits_b],
                h=1e-5,
                tol=1e-4,
            )
            assert report.passed, f"{div}: {report.max_rel_err}"


class TestLambdaSchedule:
    def test_linear_endpoints(self):
        sched = LambdaSchedule(lambda_max=100.0, total_steps=50, shape="linear")
        assert lambda_at(sched, 0) == 0.0
        assert lambda_at(sched, 50) == 100.0
        assert lambda_at(sched, 25) == 50.0

    def test_saturates_beyond_total_steps(self):
        sched = LambdaSchedule(lambda_max=100.0, total_steps=10)
        assert lambda_at(sched, 999) == 100.0

    def test_monotone_nondecreasing(self):
        sched = LambdaSchedule(lambda_max=7.0, total_steps=33)
        values = [lambda_at(sched, t) for t in range(60)]
        assert values == sorted(values)

    def test_constant_shape(self):
        sched = LambdaSchedule(lambda_max=5.0, total_steps=10, shape="constant")
        assert lambda_at(sched, 0) == 5.0
        assert lambda_at(sched, 3) == 5.0

    def test_linear_requires_positive_total_steps(self):
        sched = LambdaSchedule(lambda_max=1.0, total_steps=0, shape="linear")
        with pytest.raises(ValueError):
            lambda_at(sched, 1)

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lambda_at(LambdaSchedule(), -1)
