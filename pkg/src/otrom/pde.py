"""Full-order snapshot generators on structured grids.

Three parametrized benchmark families: a Poisson problem with a
traveling Gaussian source, a convection-dominated transport problem
with vanishing diffusivity, and a viscous Burgers evolution whose
space-time history becomes one square raster. The elliptic problems use
five-point differences with first-order upwinding for convection; the
evolution problem runs an adaptive second/third-order Runge-Kutta
integration over a method-of-lines semi-discretization.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import spsolve

from .kpod import SnapshotMatrix
from .measures import Field, GridGeometry, unit_grid

__all__ = [
    "SolverError",
    "ProblemSpec",
    "poisson_spec",
    "advection_spec",
    "burgers_spec",
    "problem_spec",
    "solve_poisson",
    "solve_advection",
    "solve_burgers",
    "sample_parameters",
    "generate_snapshots",
]

PARAMETER_DOMAINS = {
    "poisson": ((0.2, 0.8), (0.2, 0.8)),
    "advection": ((0.0, 10.0),),
    "burgers": ((0.2, 0.4),),
}


class SolverError(RuntimeError):
    """A full-order solve failed; the message names the parameter."""


@dataclass(frozen=True)
class ProblemSpec:
    """Benchmark selection plus its physical constants.

    ``grid_n`` is the output raster size per axis. The Burgers history
    is integrated on ``burgers_nodes`` spatial nodes and sampled at as
    many instants before being thinned to the raster.
    """

    kind: str
    grid_n: int = 32
    source_sigma: float = 0.1
    source_amplitude: float = 100.0
    advection_forcing: float = 1.0
    viscosity: float = 5e-3
    final_time: float = 1.0
    burgers_nodes: int = 129

    def __post_init__(self):
        if self.kind not in PARAMETER_DOMAINS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.grid_n < 3:
            raise ValueError("grid must have at least 3 nodes per axis")

    @property
    def parameter_domain(self) -> tuple[tuple[float, float], ...]:
        return PARAMETER_DOMAINS[self.kind]

    @property
    def parameter_dim(self) -> int:
        return len(self.parameter_domain)

    def geometry(self) -> GridGeometry:
        return unit_grid(self.grid_n, self.grid_n)


def poisson_spec(grid_n: int = 32) -> ProblemSpec:
    return ProblemSpec(kind="poisson", grid_n=grid_n)


def advection_spec(grid_n: int = 32) -> ProblemSpec:
    return ProblemSpec(kind="advection", grid_n=grid_n)


def burgers_spec(grid_n: int = 32, viscosity: float = 5e-3,
                 final_time: float = 1.0) -> ProblemSpec:
    return ProblemSpec(kind="burgers", grid_n=grid_n, viscosity=viscosity,
                       final_time=final_time)


def problem_spec(kind: str, **kwargs) -> ProblemSpec:
    return ProblemSpec(kind=kind, **kwargs)


def _laplacian_1d(m: int, h: float) -> sparse.csr_matrix:
    main = np.full(m, -2.0)
    off = np.ones(m - 1)
    return sparse.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def _upwind_1d(m: int, h: float) -> sparse.csr_matrix:
    # first-order upwind for a positive transport speed
    main = np.ones(m)
    lower = -np.ones(m - 1)
    return sparse.diags([lower, main], [-1, 0], format="csr") / h


def solve_poisson(mu, grid_n: int = 32) -> Field:
    """Laplacian equals a Gaussian source centered at mu, zero boundary.

    Discretized with the five-point stencil on the full node grid;
    boundary nodes are pinned to zero and the interior block is solved
    directly. The sign convention keeps the equation exactly as posed,
    so the interior values come out negative for a positive source.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    n = grid_n
    h = 1.0 / (n - 1)
    x = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(x, x)
    sigma = 0.1
    f = (100.0 / (2.0 * sigma)) * np.exp(
        -((X - mu[0]) ** 2 + (Y - mu[1]) ** 2) / (2.0 * sigma**2)
    )
    m = n - 2
    L = _laplacian_1d(m, h)
    eye = sparse.identity(m, format="csr")
    A = sparse.kron(eye, L) + sparse.kron(L, eye)
    rhs = f[1:-1, 1:-1].ravel()
    try:
        u_int = spsolve(A.tocsc(), rhs)
    except Exception as exc:  # pragma: no cover - singular systems do not occur
        raise SolverError(f"linear solve failed for mu={tuple(mu)}") from exc
    img = np.zeros((n, n))
    img[1:-1, 1:-1] = u_int.reshape(m, m)
    return Field(values=img.ravel(), geometry=unit_grid(n, n))


def poisson_residual(field: Field, mu) -> float:
    """Max-norm residual of the interior stencil equations."""
    n = field.geometry.nx
    h = 1.0 / (n - 1)
    u = field.as_image()
    x = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(x, x)
    sigma = 0.1
    mu = np.asarray(mu, dtype=float).ravel()
    f = (100.0 / (2.0 * sigma)) * np.exp(
        -((X - mu[0]) ** 2 + (Y - mu[1]) ** 2) / (2.0 * sigma**2)
    )
    lap = (u[1:-1, 2:] + u[1:-1, :-2] + u[2:, 1:-1] + u[:-2, 1:-1]
           - 4.0 * u[1:-1, 1:-1]) / h**2
    return float(np.abs(lap - f[1:-1, 1:-1]).max())


def solve_advection(mu: float, grid_n: int = 32,
                    forcing: float = 1.0) -> Field:
    """Convection-diffusion balance with unit diagonal drift.

    Diffusivity is ``10**-mu``; as it vanishes, the unit forcing piles
    the solution up against the outflow corner at (1, 1). First-order
    upwinding keeps the system matrix an M-matrix for every parameter,
    hence the discrete solution stays nonnegative.
    """
    mu = float(mu)
    n = grid_n
    h = 1.0 / (n - 1)
    alpha = 10.0 ** (-mu)
    m = n - 2
    L = _laplacian_1d(m, h)
    U = _upwind_1d(m, h)
    eye = sparse.identity(m, format="csr")
    A = -alpha * (sparse.kron(eye, L) + sparse.kron(L, eye)) \
        + sparse.kron(eye, U) + sparse.kron(U, eye)
    rhs = np.full(m * m, forcing)
    try:
        u_int = spsolve(A.tocsc(), rhs)
    except Exception as exc:  # pragma: no cover
        raise SolverError(f"linear solve failed for mu={mu}") from exc
    img = np.zeros((n, n))
    img[1:-1, 1:-1] = u_int.reshape(m, m)
    return Field(values=img.ravel(), geometry=unit_grid(n, n))


def _burgers_rhs(t, u, h, nu):
    du = np.zeros_like(u)
    # conservative upwind flux for nonnegative states: F_{i+1/2} = u_i^2 / 2
    flux = 0.5 * u * u
    du[1:-1] = -(flux[1:-1] - flux[:-2]) / h \
        + nu * (u[2:] - 2.0 * u[1:-1] + u[:-2]) / h**2
    return du


def solve_burgers(mu: float, spec: ProblemSpec | None = None) -> Field:
    """Viscous Burgers evolution of a parametrized box initial state.

    Integrates on ``burgers_nodes`` spatial nodes with an adaptive
    RK23 stepper, samples as many equispaced instants, then thins both
    axes to the output raster. The raster rows sweep time (rescaled to
    the unit interval) and the columns sweep space.
    """
    if spec is None:
        spec = burgers_spec()
    mu = float(mu)
    n_nodes = spec.burgers_nodes
    h = 1.0 / (n_nodes - 1)
    x = np.linspace(0.0, 1.0, n_nodes)
    u0 = np.where((x >= mu) & (x < mu + 0.2), 1.0, 0.0)
    u0[0] = u0[-1] = 0.0
    t_eval = np.linspace(0.0, spec.final_time, n_nodes)
    sol = solve_ivp(
        _burgers_rhs, (0.0, spec.final_time), u0, method="RK23",
        t_eval=t_eval, args=(h, spec.viscosity), rtol=1e-6, atol=1e-9,
    )
    if not sol.success:
        raise SolverError(
            f"time integration stalled for mu={mu} at t={sol.t[-1]:.4f}"
        )
    history = sol.y.T  # (time, space)
    idx = np.round(np.linspace(0, n_nodes - 1, spec.grid_n)).astype(int)
    img = history[np.ix_(idx, idx)]
    return Field(values=img.ravel(), geometry=unit_grid(spec.grid_n, spec.grid_n))


def sample_parameters(spec: ProblemSpec, n_samples: int) -> np.ndarray:
    """Uniform tensor grid over the parameter box, endpoints included.

    The two-parameter family needs a perfect-square count so the grid
    is square.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    domain = spec.parameter_domain
    if spec.parameter_dim == 2:
        side = int(round(np.sqrt(n_samples)))
        if side * side != n_samples:
            raise ValueError(
                f"{n_samples} samples cannot form a square parameter grid"
            )
        g0 = np.linspace(domain[0][0], domain[0][1], side)
        g1 = np.linspace(domain[1][0], domain[1][1], side)
        return np.array([(a, b) for a in g0 for b in g1])
    lo, hi = domain[0]
    return np.linspace(lo, hi, n_samples)[:, None]


def _solve_one(spec: ProblemSpec, mu: np.ndarray) -> np.ndarray:
    if spec.kind == "poisson":
        return solve_poisson(mu, spec.grid_n).values
    if spec.kind == "advection":
        return solve_advection(float(mu[0]), spec.grid_n,
                               forcing=spec.advection_forcing).values
    return solve_burgers(float(mu[0]), spec).values


def generate_snapshots(spec: ProblemSpec, n_samples: int,
                       threads: int = 1) -> SnapshotMatrix:
    """Solve the full-order problem over the parameter grid.

    Parameter instances are independent, so the sweep parallelizes
    freely; columns land at fixed positions regardless of the thread
    count.
    """
    params = sample_parameters(spec, n_samples)
    n_nodes = spec.grid_n ** 2
    data = np.empty((n_nodes, params.shape[0]))

    def solve_into(j: int):
        try:
            data[:, j] = _solve_one(spec, params[j])
        except SolverError:
            raise
        except Exception as exc:
            raise SolverError(f"solve failed at parameter index {j}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(solve_into, range(params.shape[0])))
    else:
        for j in range(params.shape[0]):
            solve_into(j)
    return SnapshotMatrix(data=data, params=params, geometry=spec.geometry())
