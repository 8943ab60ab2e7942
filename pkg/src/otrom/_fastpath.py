"""Compiled kernels for the separable grid transport solver.

The loops mirror the numpy reference implementations in
``otrom.sinkhorn`` exactly: reductions run sequentially inside each
output element, so results do not depend on the thread count. When
numba is unavailable the solver falls back to the numpy path.
"""
from __future__ import annotations

import numpy as np

try:
    import numba

    # The default TBB layer probe warns on older TBB builds; the
    # workqueue layer is always available and scheduling-independent.
    numba.config.THREADING_LAYER = "workqueue"
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f
        return deco

    prange = range


@njit(parallel=True, fastmath=False, cache=True)
def softmin_x(phi, cxe, out):
    """out[b, iy, jx] = logsumexp_ix(phi[b, iy, ix] - cxe[ix, jx])."""
    B, ny, nx = phi.shape
    for b in prange(B):
        for iy in range(ny):
            for jx in range(nx):
                m = -np.inf
                for ix in range(nx):
                    v = phi[b, iy, ix] - cxe[ix, jx]
                    if v > m:
                        m = v
                if m == -np.inf:
                    out[b, iy, jx] = -np.inf
                    continue
                s = 0.0
                for ix in range(nx):
                    s += np.exp(phi[b, iy, ix] - cxe[ix, jx] - m)
                out[b, iy, jx] = np.log(s) + m


@njit(parallel=True, fastmath=False, cache=True)
def softmin_y(A, cye, out):
    """out[b, jy, jx] = logsumexp_iy(A[b, iy, jx] - cye[iy, jy])."""
    B, ny, nx = A.shape
    for b in prange(B):
        for jy in range(ny):
            for jx in range(nx):
                m = -np.inf
                for iy in range(ny):
                    v = A[b, iy, jx] - cye[iy, jy]
                    if v > m:
                        m = v
                if m == -np.inf:
                    out[b, jy, jx] = -np.inf
                    continue
                s = 0.0
                for iy in range(ny):
                    s += np.exp(A[b, iy, jx] - cye[iy, jy] - m)
                out[b, jy, jx] = np.log(s) + m


@njit(parallel=True, fastmath=False, cache=True)
def plan_costs(F, G, cx, cy, eps, out):
    """out[b] = <P_b, C> with P_b = exp(F_b + G_b - C/eps), C = cx (+) cy."""
    B, ny, nx = F.shape
    for b in prange(B):
        total = 0.0
        for iy in range(ny):
            for ix in range(nx):
                fv = F[b, iy, ix]
                if fv == -np.inf:
                    continue
                for jy in range(ny):
                    cyy = cy[iy, jy]
                    for jx in range(nx):
                        gv = G[b, jy, jx]
                        if gv == -np.inf:
                            continue
                        c = cyy + cx[ix, jx]
                        total += np.exp(fv + gv - c / eps) * c
        out[b] = total
