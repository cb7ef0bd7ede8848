import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dianet.errors import ShapeError
from dianet.ndcore import Tensor, grad_check
from dianet.objective import LAMBDA_SWEEP, accuracy, consistency_loss, cross_entropy, total_loss

finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


class TestCrossEntropy:
    @pytest.mark.parametrize("k", [2, 3, 5, 6])
    def test_uniform_logits_give_log_k(self, k):
        ce = cross_entropy(Tensor(np.zeros((4, k))), np.arange(4) % k)
        assert abs(ce.item() - math.log(k)) < 1e-6

    def test_confident_and_right(self):
        logits = Tensor(np.array([[50.0, 0.0, 0.0]]))
        assert cross_entropy(logits, [0]).item() < 1e-12

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(3, 4))
        labels = np.array([1, 3, 0])
        x = Tensor(z, requires_grad=True)
        cross_entropy(x, labels).backward()
        p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        p[np.arange(3), labels] -= 1
        np.testing.assert_allclose(x.grad, p / 3, atol=1e-12)

    def test_matches_finite_differences(self):
        report = grad_check(lambda x: cross_entropy(x, [2, 0]), np.random.default_rng(1).normal(size=(2, 3)))
        assert report.passed, str(report)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0])


class TestConsistency:
    def test_identical_features_give_zero(self):
        f = Tensor(np.random.default_rng(0).normal(size=(5, 16)))
        assert abs(consistency_loss(f, f).item()) <= 1e-7

    def test_opposite_features_give_two(self):
        f = np.random.default_rng(0).normal(size=(3, 8))
        assert consistency_loss(Tensor(f), Tensor(-f)).item() == pytest.approx(2.0)

    def test_orthogonal_features_give_one(self):
        assert consistency_loss(Tensor(np.eye(2)[:1]), Tensor(np.eye(2)[1:])).item() == pytest.approx(1.0)

    def test_zero_vector_is_finite(self):
        out = consistency_loss(Tensor(np.zeros((1, 4))), Tensor(np.ones((1, 4))))
        assert out.item() == pytest.approx(1.0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=finite), arrays(np.float64, (3, 6), elements=finite))
    def test_bounded(self, a, b):
        assert 0.0 <= consistency_loss(Tensor(a), Tensor(b)).item() <= 2.0 + 1e-12

    def test_parallel_rows_do_not_round_below_zero(self):
        ones = Tensor(np.ones((3, 6)))
        assert consistency_loss(ones, ones).item() >= 0.0

    def test_gradient(self):
        rng = np.random.default_rng(4)
        other = Tensor(rng.normal(size=(2, 5)))
        report = grad_check(lambda x: consistency_loss(x, other), rng.normal(size=(2, 5)))
        assert report.passed, str(report)


class TestTotal:
    @pytest.fixture
    def batch(self):
        rng = np.random.default_rng(2)
        return (
            Tensor(rng.normal(size=(4, 3)), requires_grad=True),
            np.array([0, 1, 2, 1]),
            Tensor(rng.normal(size=(4, 8)), requires_grad=True),
            Tensor(rng.normal(size=(4, 8)), requires_grad=True),
        )

    def test_lambda_zero_is_ce(self, batch):
        logits, labels, f1, f2 = batch
        total, br = total_loss(logits, labels, f1, f2, lam=0.0)
        assert total.item() == cross_entropy(logits, labels).item() == br.total == br.ce

    @pytest.mark.parametrize("lam", LAMBDA_SWEEP)
    def test_breakdown_adds_up(self, batch, lam):
        total, br = total_loss(*batch, lam=lam)
        assert br.total == pytest.approx(br.ce + lam * br.cons, abs=1e-12)
        assert total.item() == pytest.approx(br.total)

    def test_consistency_reaches_both_streams(self, batch):
        logits, labels, f1, f2 = batch
        total_loss(logits, labels, f1, f2, lam=0.5)[0].backward()
        assert np.any(f1.grad != 0) and np.any(f2.grad != 0)

    def test_single_stream_has_no_consistency(self, batch):
        logits, labels, f1, _ = batch
        _, br = total_loss(logits, labels, f1, None, lam=1.0)
        assert br.cons == 0.0 and br.total == br.ce

    def test_negative_lambda(self, batch):
        with pytest.raises(ValueError):
            total_loss(*batch, lam=-0.1)


class TestAccuracy:
    def test_fraction(self):
        assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy([], [])
