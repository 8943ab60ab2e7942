"""Entropic optimal transport solvers.

The core is the matrix-scaling fixed-point iteration for the
regularized transport problem, in a direct form and a log-stabilized
form with an epsilon warm-start schedule. On top of it sit the
regularized transport cost, the debiased divergence, fixed-support
entropic barycenters, a batched solver specialized to measures sharing
one structured grid (separable quadratic cost), and two exact
small-instance solvers used as test oracles.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from . import _fastpath
from .measures import (
    CostMatrix,
    DiscreteMeasure,
    MeasureError,
    cost_matrix,
    tensor_axes,
)

__all__ = [
    "SinkhornError",
    "StabilizationRequiredError",
    "SinkhornDivergedError",
    "SinkhornParams",
    "SinkhornSolution",
    "sinkhorn_plan",
    "sinkhorn_distance",
    "sinkhorn_divergence",
    "entropic_barycenter",
    "exact_ot_1d",
    "exact_ot_bruteforce",
    "grid_transport_costs",
]

# Log-domain stabilization kicks in below this fraction of the largest cost.
LOG_DOMAIN_EPS_FRACTION = 1e-2

# Warm-start schedule: start at _SCHEDULE_START * max(C) and shrink by
# _SCHEDULE_RATIO per stage until the target epsilon is reached.
_SCHEDULE_START = 0.1
_SCHEDULE_RATIO = 0.2
_SCHEDULE_STAGE_TOL = 1e-6
_SCHEDULE_STAGE_CAP = 200

_PROB_SUM_TOL = 1e-8


class SinkhornError(RuntimeError):
    """Base class for scaling-iteration failures."""


class StabilizationRequiredError(SinkhornError):
    """Direct-mode scaling over/underflowed; rerun with log_domain=True."""


class SinkhornDivergedError(SinkhornError):
    """NaN appeared in the iterates."""

    def __init__(self, iteration: int):
        super().__init__(f"scaling iteration produced NaN at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class SinkhornParams:
    """Solver configuration.

    ``log_domain=None`` selects the stabilized form automatically when
    epsilon is small relative to the largest cost entry. The epsilon
    warm-start schedule only accelerates the log-domain solve; the
    returned fixed point is always the one at the target epsilon.
    """

    epsilon: float
    max_iter: int = 20_000
    tol: float = 1e-9
    log_domain: bool | None = None
    epsilon_scaling: bool = True
    record_trace: bool = False

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class SinkhornSolution:
    """Converged coupling with its scaling variables and diagnostics.

    ``dual_u`` / ``dual_v`` are the scaling vectors of the direct
    iteration, or the log-potentials when the stabilized form ran.
    """

    plan: np.ndarray
    dual_u: np.ndarray
    dual_v: np.ndarray
    reg_cost: float
    iterations: int
    marginal_err: float
    log_domain: bool
    cost_trace: np.ndarray | None = None
    dual_trace: np.ndarray | None = None


def _logsumexp(M: np.ndarray, axis: int) -> np.ndarray:
    """Stable logsumexp that maps all -inf slices to -inf without NaN."""
    m = np.max(M, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(M - m_safe), axis=axis)
    with np.errstate(divide="ignore"):
        out = np.log(s) + np.squeeze(m_safe, axis=axis)
    return np.where(np.isfinite(np.squeeze(m, axis=axis)), out, -np.inf)


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def _epsilon_schedule(eps_target: float, max_cost: float, enabled: bool,
                      max_iter: int) -> list[float]:
    """Geometric epsilon sequence ending exactly at the target value."""
    start = _SCHEDULE_START * max_cost
    if not enabled or max_cost <= 0.0 or eps_target >= start:
        return [eps_target]
    stages: list[float] = []
    eps = start
    while eps > eps_target * 1.0000001:
        stages.append(eps)
        eps *= _SCHEDULE_RATIO
    stages.append(eps_target)
    # With a tiny iteration budget the warm-start stages are not worth it.
    if max_iter < 50 * len(stages):
        return [eps_target]
    return stages


def _check_probability(w: np.ndarray, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise MeasureError(f"{name} is empty")
    if np.any(w < 0.0):
        raise MeasureError(f"{name} has negative entries")
    if abs(float(w.sum()) - 1.0) > _PROB_SUM_TOL:
        raise MeasureError(f"{name} does not sum to 1 (sum={float(w.sum())!r})")
    return w


def _solve_direct(a, b, C, params: SinkhornParams):
    eps = params.epsilon
    K = np.exp(-C / eps)
    n, m = C.shape
    v = np.ones(m)
    u = np.zeros(n)
    iters = 0
    trace = [] if params.record_trace else None
    dual_trace = [] if params.record_trace else None
    err = np.inf
    while iters < params.max_iter:
        Kv = K @ v
        if np.any((Kv == 0.0) & (a > 0.0)):
            raise StabilizationRequiredError(
                "kernel column sums underflowed; rerun with log_domain=True"
            )
        u = np.divide(a, Kv, out=np.zeros_like(a), where=Kv > 0.0)
        KTu = K.T @ u
        if np.any((KTu == 0.0) & (b > 0.0)):
            raise StabilizationRequiredError(
                "kernel row sums underflowed; rerun with log_domain=True"
            )
        v = np.divide(b, KTu, out=np.zeros_like(b), where=KTu > 0.0)
        iters += 1
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            if np.any(np.isnan(u)) or np.any(np.isnan(v)):
                raise SinkhornDivergedError(iters)
            raise StabilizationRequiredError(
                "scaling variables overflowed; rerun with log_domain=True"
            )
        row = u * (K @ v)
        err = float(np.abs(row - a).sum())
        if np.isnan(err):
            raise SinkhornDivergedError(iters)
        if trace is not None:
            P = u[:, None] * K * v[None, :]
            trace.append(float(np.sum(P * C)))
            lu = np.log(np.where(u > 0, u, 1.0))
            lv = np.log(np.where(v > 0, v, 1.0))
            dual_trace.append(eps * float(a @ lu + b @ lv - P.sum()))
        if err <= params.tol:
            break
    plan = u[:, None] * K * v[None, :]
    return plan, u, v, iters, err, trace, dual_trace


def _solve_log(a, b, C, params: SinkhornParams):
    eps_target = params.epsilon
    la = _log_weights(a)
    lb = _log_weights(b)
    n, m = C.shape
    f = np.zeros(n)
    g = np.zeros(m)
    iters = 0
    trace = [] if params.record_trace else None
    dual_trace = [] if params.record_trace else None
    err = np.inf
    stages = _epsilon_schedule(eps_target, float(C.max()), params.epsilon_scaling,
                               params.max_iter)
    for eps in stages:
        final_stage = eps == stages[-1]
        stage_tol = params.tol if final_stage else max(_SCHEDULE_STAGE_TOL, params.tol)
        stage_cap = params.max_iter if final_stage else _SCHEDULE_STAGE_CAP
        Ce = C / eps
        F = f / eps
        G = g / eps
        T = _logsumexp(G[None, :] - Ce, axis=1)
        stage_iters = 0
        while iters < params.max_iter and stage_iters < stage_cap:
            F = la - T
            G = lb - _logsumexp(F[:, None] - Ce, axis=0)
            T = _logsumexp(G[None, :] - Ce, axis=1)
            iters += 1
            stage_iters += 1
            err = float(np.abs(np.exp(F + T) - a).sum())
            if np.isnan(err):
                raise SinkhornDivergedError(iters)
            if trace is not None:
                P = np.exp(F[:, None] + G[None, :] - Ce)
                trace.append(float(np.sum(P * C)))
                fa = np.where(a > 0, F, 0.0)
                gb = np.where(b > 0, G, 0.0)
                dual_trace.append(eps * float(a @ fa + b @ gb - P.sum()))
            if err <= stage_tol:
                break
        f = eps * F
        g = eps * G
    plan = np.exp((f[:, None] + g[None, :] - C) / eps_target)
    return plan, f, g, iters, err, trace, dual_trace


def sinkhorn_plan(a, b, C: CostMatrix | np.ndarray,
                  params: SinkhornParams) -> SinkhornSolution:
    """Scale a coupling until both marginals match ``a`` and ``b``.

    Iterates the alternating row/column scaling until the L1 marginal
    violation drops below ``params.tol`` or ``params.max_iter`` sweeps
    ran. The returned plan satisfies the fixed-point form
    ``P_ij = u_i exp(-C_ij / eps) v_j``.
    """
    entries = C.entries if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    a = _check_probability(a, "source weights")
    b = _check_probability(b, "target weights")
    if entries.shape != (a.size, b.size):
        raise MeasureError(
            f"cost matrix shape {entries.shape} does not match weights "
            f"({a.size}, {b.size})"
        )
    max_cost = float(entries.max()) if entries.size else 0.0
    use_log = params.log_domain
    if use_log is None:
        use_log = params.epsilon < LOG_DOMAIN_EPS_FRACTION * max_cost
    if use_log:
        plan, du, dv, iters, err, trace, dual_trace = _solve_log(a, b, entries, params)
    else:
        plan, du, dv, iters, err, trace, dual_trace = _solve_direct(a, b, entries, params)
    col_err = float(np.abs(plan.sum(axis=0) - b).sum())
    return SinkhornSolution(
        plan=plan,
        dual_u=du,
        dual_v=dv,
        reg_cost=float(np.sum(plan * entries)),
        iterations=iters,
        marginal_err=max(err, col_err),
        log_domain=bool(use_log),
        cost_trace=None if trace is None else np.asarray(trace),
        dual_trace=None if dual_trace is None else np.asarray(dual_trace),
    )


# ---------------------------------------------------------------------------
# Separable solver for measures sharing one structured grid
# ---------------------------------------------------------------------------

_GRID_CHUNK = 48  # pairs per batched solve; keeps temporaries ~tens of MB


def _grid_softmin_numpy(phi, cxe, cye):
    """logsumexp_{iy,ix}(phi[b,iy,ix] - cye[iy,jy] - cxe[ix,jx]) for all (jy,jx)."""
    A = _logsumexp(phi[:, :, :, None] - cxe[None, None, :, :], axis=2)  # (B,ny,jx)
    return _logsumexp(A[:, :, None, :] - cye[None, :, :, None], axis=1)  # (B,jy,jx)


def _grid_softmin(phi, cxe, cye, use_numba):
    if use_numba:
        tmp = np.empty_like(phi)
        out = np.empty_like(phi)
        _fastpath.softmin_x(phi, cxe, tmp)
        _fastpath.softmin_y(tmp, cye, out)
        return out
    return _grid_softmin_numpy(phi, cxe, cye)


def _grid_plan_costs(F, G, cx, cy, eps, use_numba):
    """Transport cost <P, C> per batch element from converged log-scalings."""
    if use_numba:
        out = np.empty(F.shape[0])
        _fastpath.plan_costs(np.ascontiguousarray(F), np.ascontiguousarray(G),
                             cx, cy, eps, out)
        return out
    ny, nx = F.shape[1], F.shape[2]
    C4 = (cy[:, None, :, None] + cx[None, :, None, :]).reshape(ny, nx, ny, nx)
    # Plan entries with -inf potentials exponentiate to an exact zero.
    C4e = C4 / eps
    costs = np.empty(F.shape[0])
    for bi in range(F.shape[0]):
        logP = F[bi][:, :, None, None] + G[bi][None, None, :, :] - C4e
        costs[bi] = float(np.sum(np.exp(logP) * C4))
    return costs


def grid_transport_costs(wa: np.ndarray, wb: np.ndarray, x: np.ndarray,
                         y: np.ndarray, params: SinkhornParams,
                         use_numba: bool | None = None) -> np.ndarray:
    """Batched regularized transport costs on a shared tensor grid.

    ``wa`` and ``wb`` hold probability weights shaped ``(B, ny, nx)``;
    the quadratic ground cost separates along the axes, so every scaling
    update reduces one axis at a time instead of touching the full
    ``(ny*nx)^2`` cost matrix. Returns ``<P, C>`` per pair, solved to the
    same fixed point as the dense log-domain iteration.
    """
    wa = np.ascontiguousarray(wa, dtype=np.float64)
    wb = np.ascontiguousarray(wb, dtype=np.float64)
    if wa.shape != wb.shape or wa.ndim != 3:
        raise ValueError("weight batches must share shape (B, ny, nx)")
    if use_numba is None:
        use_numba = _fastpath.HAVE_NUMBA
    cx = (x[:, None] - x[None, :]) ** 2
    cy = (y[:, None] - y[None, :]) ** 2
    max_cost = float(cx.max() + cy.max())
    out = np.empty(wa.shape[0])
    for lo in range(0, wa.shape[0], _GRID_CHUNK):
        hi = min(lo + _GRID_CHUNK, wa.shape[0])
        out[lo:hi] = _grid_costs_chunk(wa[lo:hi], wb[lo:hi], cx, cy,
                                       max_cost, params, use_numba)
    return out


def _grid_costs_chunk(wa, wb, cx, cy, max_cost, params: SinkhornParams,
                      use_numba: bool):
    B = wa.shape[0]
    la = _log_weights(wa)
    lb = _log_weights(wb)
    f = np.zeros_like(wa)
    g = np.zeros_like(wb)
    iters = np.zeros(B, dtype=np.int64)
    stages = _epsilon_schedule(params.epsilon, max_cost, params.epsilon_scaling,
                               params.max_iter)
    for eps in stages:
        final_stage = eps == stages[-1]
        stage_tol = params.tol if final_stage else max(_SCHEDULE_STAGE_TOL, params.tol)
        stage_cap = params.max_iter if final_stage else _SCHEDULE_STAGE_CAP
        cxe = cx / eps
        cye = cy / eps
        F = f / eps
        G = g / eps
        # Pairs leave the active set the moment they converge, so each
        # pair's trajectory only depends on its own data, never on what
        # else shares the batch.
        active = np.arange(B)
        T = _grid_softmin(G, cxe, cye, use_numba)
        stage_iters = 0
        while active.size and stage_iters < stage_cap:
            Fa = la[active] - T
            Ga = lb[active] - _grid_softmin(Fa, cxe, cye, use_numba)
            Ta = _grid_softmin(Ga, cxe, cye, use_numba)
            stage_iters += 1
            iters[active] += 1
            err = np.abs(np.exp(Fa + Ta) - wa[active]).sum(axis=(1, 2))
            if np.any(np.isnan(err)):
                raise SinkhornDivergedError(int(iters.max()))
            F[active] = Fa
            G[active] = Ga
            keep = (err > stage_tol) & (iters[active] < params.max_iter)
            active = active[keep]
            T = Ta[keep]
        f = eps * F
        g = eps * G
    eps = stages[-1]
    return _grid_plan_costs(f / eps, g / eps, cx, cy, eps, use_numba)


def _grid_fast_costs(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float,
                     params: SinkhornParams, geometry_axes):
    """Route one pair through the separable solver (p=2 tensor grids only)."""
    x, y = geometry_axes
    ny, nx = y.size, x.size
    wa = mu.weights.reshape(1, ny, nx)
    wb = nu.weights.reshape(1, ny, nx)
    return float(grid_transport_costs(wa, wb, x, y, params)[0])


def _shared_grid_axes(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float):
    """Axes of a common tensor-product support, or None."""
    if p != 2.0 or mu.dim != 2 or not np.array_equal(mu.support, nu.support):
        return None
    xs = np.unique(mu.support[:, 0])
    ys = np.unique(mu.support[:, 1])
    if xs.size * ys.size != mu.n_atoms:
        return None
    xx, yy = np.meshgrid(xs, ys)
    rebuilt = np.column_stack([xx.ravel(), yy.ravel()])
    if np.array_equal(rebuilt, mu.support):
        return xs, ys
    return None


# Above this support size a dense plan solve is wasteful when the
# separable route is available.
_GRID_FAST_MIN_ATOMS = 512


def sinkhorn_distance(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float,
                      params: SinkhornParams) -> float:
    """Regularized transport cost ``<P, C>`` at the converged plan."""
    axes = None
    if mu.n_atoms >= _GRID_FAST_MIN_ATOMS:
        axes = _shared_grid_axes(mu, nu, p)
    if axes is not None:
        return _grid_fast_costs(mu, nu, p, params, axes)
    C = cost_matrix(mu, nu, p)
    return sinkhorn_plan(mu.weights, nu.weights, C, params).reg_cost


def _canonical_pair(mu: DiscreteMeasure, nu: DiscreteMeasure):
    """Deterministic argument order so the divergence is exactly symmetric."""
    key_mu = mu.support.tobytes() + mu.weights.tobytes()
    key_nu = nu.support.tobytes() + nu.weights.tobytes()
    return (mu, nu) if key_mu <= key_nu else (nu, mu)


def sinkhorn_divergence(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float,
                        params: SinkhornParams) -> float:
    """Debiased divergence W(mu,nu) - W(mu,mu)/2 - W(nu,nu)/2.

    The self terms make the value vanish for identical measures. The
    two arguments are reordered deterministically before solving, so the
    result is bitwise symmetric in (mu, nu).
    """
    mu, nu = _canonical_pair(mu, nu)
    if np.array_equal(mu.support, nu.support) and np.array_equal(mu.weights, nu.weights):
        return 0.0
    cross = sinkhorn_distance(mu, nu, p, params)
    self_mu = sinkhorn_distance(mu, mu, p, params)
    self_nu = sinkhorn_distance(nu, nu, p, params)
    return cross - 0.5 * self_mu - 0.5 * self_nu


# ---------------------------------------------------------------------------
# Fixed-support entropic barycenters
# ---------------------------------------------------------------------------


def entropic_barycenter(measures: list[DiscreteMeasure], alphas,
                        params: SinkhornParams) -> DiscreteMeasure:
    """Weighted barycenter of measures sharing one support.

    Runs log-domain iterative scaling projections with the quadratic
    ground cost on the common support. A degenerate weight vector (all
    mass on one measure) returns that measure exactly, matching the
    unregularized limit.
    """
    if not measures:
        raise MeasureError("need at least one measure")
    alphas = np.asarray(alphas, dtype=np.float64).ravel()
    if alphas.size != len(measures):
        raise MeasureError("one interpolation weight per measure is required")
    if np.any(alphas < -1e-12) or abs(float(alphas.sum()) - 1.0) > 1e-9:
        raise MeasureError("interpolation weights must be convex")
    support = measures[0].support
    for m in measures[1:]:
        if not np.array_equal(m.support, support):
            raise MeasureError("all measures must share one support")

    for k, alpha in enumerate(alphas):
        if alpha >= 1.0 - 1e-12:
            return measures[k]
    active = [(float(alpha), m) for alpha, m in zip(alphas, measures) if alpha > 0.0]

    C = cost_matrix(active[0][1], active[0][1], p=2.0).entries
    lK = -C / params.epsilon
    weights = np.array([alpha for alpha, _ in active])
    lbs = [_log_weights(m.weights) for _, m in active]
    n = support.shape[0]
    lus = [np.zeros(n) for _ in active]
    lvs = [np.zeros(n) for _ in active]
    prev = np.full(n, 1.0 / n)
    for _ in range(params.max_iter):
        lrows = []
        for k in range(len(active)):
            lvs[k] = lbs[k] - _logsumexp(lus[k][:, None] + lK, axis=0)
            lrows.append(lus[k] + _logsumexp(lK + lvs[k][None, :], axis=1))
        la = weights @ np.stack(lrows)
        la = la - _logsumexp(la[None, :], axis=1)[0]
        for k in range(len(active)):
            lus[k] = la - _logsumexp(lK + lvs[k][None, :], axis=1)
        a = np.exp(la)
        change = float(np.abs(a - prev).sum())
        prev = a
        if change <= max(params.tol, 1e-12):
            break
    a = prev / prev.sum()
    return DiscreteMeasure(support=support, weights=a)


# ---------------------------------------------------------------------------
# Exact small-instance solvers (test oracles)
# ---------------------------------------------------------------------------


def exact_ot_1d(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 2.0) -> float:
    """Exact W_p^p for 1D supports via monotone matching of sorted atoms."""
    if mu.dim != 1 or nu.dim != 1:
        raise MeasureError("exact 1D transport requires one-dimensional supports")
    xi = np.argsort(mu.support[:, 0], kind="stable")
    yi = np.argsort(nu.support[:, 0], kind="stable")
    xs, ws = mu.support[xi, 0], mu.weights[xi].copy()
    ys, vs = nu.support[yi, 0], nu.weights[yi].copy()
    cost = 0.0
    i = j = 0
    while i < xs.size and j < ys.size:
        flow = min(ws[i], vs[j])
        if flow > 0.0:
            cost += flow * abs(xs[i] - ys[j]) ** p
        ws[i] -= flow
        vs[j] -= flow
        if ws[i] <= 1e-15:
            i += 1
        if j < ys.size and vs[j] <= 1e-15:
            j += 1
    return cost


def exact_ot_bruteforce(a, b, C: CostMatrix | np.ndarray) -> float:
    """Exact minimum of <P, C> over the transport polytope (tiny instances).

    Uniform equal-size marginals are minimized over all assignment
    permutations; general marginals fall back to an exact linear
    program. Supports at most 6 atoms per side.
    """
    entries = C.entries if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    a = _check_probability(a, "source weights")
    b = _check_probability(b, "target weights")
    n, m = entries.shape
    if n > 6 or m > 6:
        raise ValueError("brute-force oracle is limited to 6 atoms per side")
    if n == m and np.allclose(a, 1.0 / n) and np.allclose(b, 1.0 / n):
        best = np.inf
        for perm in itertools.permutations(range(n)):
            best = min(best, sum(entries[i, perm[i]] for i in range(n)) / n)
        return float(best)
    # One marginal constraint is redundant; dropping it keeps the LP full rank.
    A_eq = []
    b_eq = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m:(i + 1) * m] = 1.0
        A_eq.append(row)
        b_eq.append(a[i])
    for j in range(m - 1):
        col = np.zeros(n * m)
        col[j::m] = 1.0
        A_eq.append(col)
        b_eq.append(b[j])
    res = optimize.linprog(entries.ravel(), A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                           bounds=(0, None), method="highs")
    if not res.success:
        raise SinkhornError(f"exact transport LP failed: {res.message}")
    return float(res.fun)
