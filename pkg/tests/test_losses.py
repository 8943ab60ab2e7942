import numpy as np
import pytest

from otrom.neuralnet.losses import (
    frozen_plan_objective,
    mse_loss,
    sinkhorn_batch_loss,
)
from otrom.sinkhorn import SinkhornParams


class TestMseLoss:
    def test_zero_when_equal(self):
        y = np.random.default_rng(0).normal(size=(4, 6))
        loss, grad = mse_loss(y, y)
        assert loss == 0.0
        np.testing.assert_allclose(grad, 0.0)

    def test_single_sample_values(self):
        loss, grad = mse_loss(np.array([[0.0]]), np.array([[2.0]]))
        assert loss == pytest.approx(4.0)
        np.testing.assert_allclose(grad, [[4.0]])

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=(3, 5))
        y_nn = rng.normal(size=(3, 5))
        _, grad = mse_loss(y, y_nn)
        h = 1e-7
        for idx in rng.choice(15, size=10, replace=False):
            p = y_nn.copy().ravel(); p[idx] += h
            m = y_nn.copy().ravel(); m[idx] -= h
            fd = (mse_loss(y, p.reshape(3, 5))[0] - mse_loss(y, m.reshape(3, 5))[0]) / (2 * h)
            assert grad.ravel()[idx] == pytest.approx(fd, rel=1e-8, abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


class TestSinkhornBatchLoss:
    def params(self):
        return SinkhornParams(epsilon=1.0, max_iter=5000, tol=1e-11)

    def test_identical_batches_zero(self):
        y = np.random.default_rng(2).normal(size=(4, 8))
        loss, grad = sinkhorn_batch_loss(y, y.copy(), epsilon=0.1, params=self.params())
        assert abs(loss) <= 1e-8
        assert np.linalg.norm(grad) <= 1e-6

    def test_batch_size_one_closed_form(self):
        loss, grad = sinkhorn_batch_loss(np.array([[0.0]]), np.array([[1.0]]),
                                         epsilon=1e-3, params=self.params())
        assert loss == pytest.approx(1.0, rel=1e-6)
        np.testing.assert_allclose(grad, [[2.0]], rtol=1e-6)

    def test_gradient_matches_frozen_plan_fd(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=(4, 8))
        y_nn = y + 0.3 * rng.normal(size=(4, 8))
        eps = 0.05 * float(np.max(np.sum((y[:, None] - y_nn[None]) ** 2, axis=-1)))
        loss, grad, plans = sinkhorn_batch_loss(y, y_nn, epsilon=eps,
                                                params=self.params(),
                                                return_plans=True)
        h = 1e-6
        worst = 0.0
        for idx in rng.choice(y_nn.size, size=32, replace=False):
            p = y_nn.copy().ravel(); p[idx] += h
            m = y_nn.copy().ravel(); m[idx] -= h
            fd = (frozen_plan_objective(y, p.reshape(4, 8), plans)
                  - frozen_plan_objective(y, m.reshape(4, 8), plans)) / (2 * h)
            ana = grad.ravel()[idx]
            worst = max(worst, abs(ana - fd) / max(1.0, abs(fd)))
        assert worst < 1e-3

    def test_loss_value_consistent_with_frozen_objective(self):
        rng = np.random.default_rng(4)
        y = rng.normal(size=(3, 5))
        y_nn = rng.normal(size=(3, 5))
        loss, _, plans = sinkhorn_batch_loss(y, y_nn, epsilon=0.5,
                                             params=self.params(), return_plans=True)
        assert loss == pytest.approx(frozen_plan_objective(y, y_nn, plans), rel=1e-12)

    def test_permuted_batch_near_zero_for_small_eps(self):
        # same point set in shuffled order: an assignment with zero cost exists
        rng = np.random.default_rng(5)
        y = rng.normal(size=(5, 4))
        perm = rng.permutation(5)
        loss, _ = sinkhorn_batch_loss(y, y[perm], epsilon=1e-4, params=self.params())
        assert abs(loss) <= 1e-3

    def test_batch_shape_mismatch(self):
        with pytest.raises(ValueError):
            sinkhorn_batch_loss(np.zeros((2, 3)), np.zeros((3, 3)), epsilon=0.1)
