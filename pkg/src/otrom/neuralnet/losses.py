"""Reconstruction losses with analytic gradients.

The transport loss treats each sample in a batch as one atom of a
uniform measure in output space and debiases the regularized cost with
the two self terms. Its gradient holds the converged plans fixed, which
is exact at the scaling fixed point and avoids differentiating through
the iteration.
"""
from __future__ import annotations

import numpy as np

from ..sinkhorn import SinkhornParams, sinkhorn_plan

__all__ = ["mse_loss", "sinkhorn_batch_loss"]


def mse_loss(y: np.ndarray, y_nn: np.ndarray):
    """Mean over samples of the squared Euclidean gap; gradient wrt y_nn."""
    y = np.asarray(y, dtype=np.float64)
    y_nn = np.asarray(y_nn, dtype=np.float64)
    if y.shape != y_nn.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_nn.shape}")
    n = y.shape[0] if y.ndim > 1 else 1
    diff = y_nn - y
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


def _pairwise_sq(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _plan(C: np.ndarray, epsilon: float, params: SinkhornParams | None):
    n, m = C.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    if params is None:
        params = SinkhornParams(epsilon=epsilon)
    solver = SinkhornParams(epsilon=epsilon, max_iter=params.max_iter,
                            tol=params.tol, log_domain=params.log_domain,
                            epsilon_scaling=params.epsilon_scaling)
    return sinkhorn_plan(a, b, C, solver)


def sinkhorn_batch_loss(y: np.ndarray, y_nn: np.ndarray, epsilon: float,
                        params: SinkhornParams | None = None,
                        return_plans: bool = False):
    """Debiased transport loss between batches of output vectors.

    ``y`` and ``y_nn`` are (N, d) batches viewed as uniform measures on
    N atoms with the squared Euclidean ground cost in R^d. Returns the
    loss and its gradient with respect to ``y_nn``, differentiated with
    the three converged plans held fixed.
    """
    y = np.asarray(y, dtype=np.float64).reshape(y.shape[0], -1)
    y_nn = np.asarray(y_nn, dtype=np.float64).reshape(y_nn.shape[0], -1)
    if y.shape != y_nn.shape:
        raise ValueError(f"batch shapes differ: {y.shape} vs {y_nn.shape}")
    if np.array_equal(y, y_nn):
        if return_plans:
            n = y.shape[0]
            eye = np.eye(n) / n
            return 0.0, np.zeros_like(y_nn), (eye, eye, eye)
        return 0.0, np.zeros_like(y_nn)

    C_cross = _pairwise_sq(y, y_nn)
    C_self_y = _pairwise_sq(y, y)
    C_self_n = _pairwise_sq(y_nn, y_nn)

    sol_cross = _plan(C_cross, epsilon, params)
    sol_self_y = _plan(C_self_y, epsilon, params)
    sol_self_n = _plan(C_self_n, epsilon, params)
    loss = sol_cross.reg_cost - 0.5 * sol_self_y.reg_cost - 0.5 * sol_self_n.reg_cost

    # d<P,C>/dy_j with P fixed: cross cost C_ij = |x_i - y_j|^2 gives
    # 2(c_j y_j - P^T x)_j with c = column sums; the self term touches
    # both indices of C_kl = |y_k - y_l|^2.
    P = sol_cross.plan
    col = P.sum(axis=0)
    grad_cross = 2.0 * (col[:, None] * y_nn - P.T @ y)

    Q = sol_self_n.plan
    row = Q.sum(axis=1)
    colq = Q.sum(axis=0)
    grad_self = 2.0 * ((row + colq)[:, None] * y_nn - Q @ y_nn - Q.T @ y_nn)

    grad = grad_cross - 0.5 * grad_self
    if return_plans:
        return float(loss), grad, (P, sol_self_y.plan, Q)
    return float(loss), grad


def frozen_plan_objective(y, y_nn, plans):
    """Loss surface with the plans fixed; finite differences of this
    function are what the analytic gradient must match."""
    y = np.asarray(y, dtype=np.float64).reshape(y.shape[0], -1)
    y_nn = np.asarray(y_nn, dtype=np.float64).reshape(y_nn.shape[0], -1)
    P, Qy, Qn = plans
    cross = float(np.sum(P * _pairwise_sq(y, y_nn)))
    self_y = float(np.sum(Qy * _pairwise_sq(y, y)))
    self_n = float(np.sum(Qn * _pairwise_sq(y_nn, y_nn)))
    return cross - 0.5 * self_y - 0.5 * self_n
