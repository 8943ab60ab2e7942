"""Kernel-based snapshot reduction.

A Gram matrix of pairwise kernel values over the training snapshots is
diagonalized to obtain reduced coordinates ``Z = V*^T G`` and a forward
map ``z = V*^T [kernel(u, u_i)]_i`` for unseen fields. The transport
kernel evaluates ``0.5 m2(mu) + 0.5 m2(nu) - S_eps(mu, nu)`` on the
mass-normalized snapshots; with the plain inner product the whole
construction collapses to classical POD.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .measures import (
    DiscreteMeasure,
    Field,
    GridGeometry,
    MeasureError,
    normalize_field,
    second_moment,
    tensor_axes,
)
from .sinkhorn import SinkhornParams, grid_transport_costs, sinkhorn_divergence

__all__ = [
    "KernelError",
    "GramComputationError",
    "SnapshotMatrix",
    "KernelSpec",
    "GramMatrix",
    "KpodModel",
    "PodBasis",
    "compute_gram",
    "eigendecompose",
    "reduce",
    "forward_map",
    "forward_map_batch",
    "pod_svd",
    "spectrum_report",
]

KERNEL_KINDS = ("inner_product", "sinkhorn_kernel", "wasserstein_exponential")

# Eigenvalues below -NEG_EIG_REL * max|lambda| flag an indefinite kernel.
NEG_EIG_REL = 1e-10


class KernelError(ValueError):
    """Invalid kernel specification or mismatched kernel usage."""


class GramComputationError(RuntimeError):
    """A pairwise kernel evaluation failed; the message names the pair."""


@dataclass(frozen=True)
class SnapshotMatrix:
    """Column-wise solution matrix with its grid and parameter values."""

    data: np.ndarray
    params: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        params = np.ascontiguousarray(np.atleast_2d(np.asarray(self.params, dtype=np.float64)))
        if params.shape[0] != data.shape[1]:
            # accept (param_dim, N_s) input handed over transposed
            if params.shape[1] == data.shape[1]:
                params = params.T.copy()
            else:
                raise ValueError(
                    f"{data.shape[1]} snapshot columns but {params.shape[0]} parameter rows"
                )
        if data.shape[0] != self.geometry.n_nodes:
            raise ValueError(
                f"snapshots have {data.shape[0]} rows for {self.geometry.n_nodes} grid nodes"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("snapshot matrix contains non-finite entries")
        data.setflags(write=False)
        params.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "params", params)

    @property
    def n_dofs(self) -> int:
        return self.data.shape[0]

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[1]

    def column_field(self, j: int) -> Field:
        return Field(values=self.data[:, j], geometry=self.geometry)

    def select(self, indices) -> "SnapshotMatrix":
        idx = np.asarray(indices, dtype=int)
        return SnapshotMatrix(
            data=self.data[:, idx], params=self.params[idx], geometry=self.geometry
        )


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice with its regularization scales."""

    kind: str
    epsilon: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}")
        if self.kind in ("sinkhorn_kernel", "wasserstein_exponential"):
            if self.epsilon is None or self.epsilon <= 0.0:
                raise KernelError("transport kernels need epsilon > 0")
        if self.kind == "wasserstein_exponential":
            if self.sigma is None or self.sigma <= 0.0:
                raise KernelError("the exponential kernel needs sigma > 0")


@dataclass(frozen=True)
class GramMatrix:
    """Pairwise kernel values; exactly symmetric by construction."""

    entries: np.ndarray
    kernel: KernelSpec

    def __post_init__(self):
        entries = np.ascontiguousarray(np.asarray(self.entries, dtype=np.float64))
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError("Gram matrix must be square")
        if not np.array_equal(entries, entries.T):
            raise ValueError("Gram matrix must be exactly symmetric")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class KpodModel:
    """Truncated eigenpairs of a Gram matrix plus the training data.

    ``eigvecs`` columns are orthonormal and ``eigvals`` strictly positive
    in descending order; negative eigenvalues of an indefinite kernel are
    kept in ``dropped_eigvals`` for diagnostics.
    """

    kernel: KernelSpec
    eigvals: np.ndarray
    eigvecs: np.ndarray
    k: int
    train_data: np.ndarray
    geometry: GridGeometry | None
    dropped_eigvals: tuple[float, ...] = ()

    def __post_init__(self):
        ev = np.ascontiguousarray(np.asarray(self.eigvals, dtype=np.float64))
        V = np.ascontiguousarray(np.asarray(self.eigvecs, dtype=np.float64))
        data = np.ascontiguousarray(np.asarray(self.train_data, dtype=np.float64))
        if V.shape != (data.shape[1], ev.size):
            raise ValueError("eigvecs must be (n_train, k) aligned with eigvals")
        if ev.size and np.any(np.diff(ev) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        for a in (ev, V, data):
            a.setflags(write=False)
        object.__setattr__(self, "eigvals", ev)
        object.__setattr__(self, "eigvecs", V)
        object.__setattr__(self, "train_data", data)

    @property
    def n_train(self) -> int:
        return self.train_data.shape[1]

    def train_measures(self) -> list[DiscreteMeasure]:
        return [
            normalize_field(Field(values=self.train_data[:, j], geometry=self.geometry))
            for j in range(self.n_train)
        ]


def _normalized_weights(S: SnapshotMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-snapshot probability weights (N_s, ny, nx) and second moments."""
    g = S.geometry
    W = np.empty((S.n_snapshots, g.ny, g.nx))
    m2 = np.empty(S.n_snapshots)
    for j in range(S.n_snapshots):
        m = normalize_field(S.column_field(j))
        W[j] = m.weights.reshape(g.ny, g.nx)
        m2[j] = second_moment(m)
    return W, m2


def _pairwise_divergences(S: SnapshotMatrix, epsilon: float,
                          params: SinkhornParams, threads: int) -> tuple[np.ndarray, np.ndarray]:
    """Upper-triangle transport divergences between normalized snapshots."""
    W, m2 = _normalized_weights(S)
    n = S.n_snapshots
    solver = SinkhornParams(
        epsilon=epsilon, max_iter=params.max_iter, tol=params.tol,
        log_domain=params.log_domain, epsilon_scaling=params.epsilon_scaling,
    )
    axes = tensor_axes(S.geometry)
    ii, jj = np.triu_indices(n, k=1)
    if axes is not None:
        x, y = axes
        selfs = grid_transport_costs(W, W, x, y, solver)
        cross = np.empty(ii.size)
        # fixed-size chunks keep results identical for any thread count
        chunks = [(lo, min(lo + 96, ii.size)) for lo in range(0, ii.size, 96)]

        def run_chunk(bounds):
            lo, hi = bounds
            cross[lo:hi] = grid_transport_costs(W[ii[lo:hi]], W[jj[lo:hi]], x, y, solver)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run_chunk, chunks))
        else:
            for bounds in chunks:
                run_chunk(bounds)
        div = cross - 0.5 * (selfs[ii] + selfs[jj])
    else:
        measures = [normalize_field(S.column_field(j)) for j in range(n)]
        div = np.array([
            sinkhorn_divergence(measures[i], measures[j], 2.0, solver)
            for i, j in zip(ii, jj)
        ])
    bad = np.flatnonzero(~np.isfinite(div))
    if bad.size:
        i, j = int(ii[bad[0]]), int(jj[bad[0]])
        raise GramComputationError(
            f"transport divergence failed for snapshot pair ({i}, {j})"
        )
    return div, m2


def _mirror_upper(M: np.ndarray) -> np.ndarray:
    """Exact symmetry: the strict lower triangle copies the upper one."""
    return np.triu(M) + np.triu(M, 1).T


def compute_gram(S: SnapshotMatrix, kernel: KernelSpec,
                 params: SinkhornParams | None = None,
                 threads: int = 1) -> GramMatrix:
    """Assemble the kernel Gram matrix over all snapshot pairs.

    Only the upper triangle is computed and then mirrored, so the result
    is exactly symmetric and independent of ``threads``. The transport
    kernels run on the mass-normalized snapshots; divergence self-terms
    vanish identically, which puts the second moments on the diagonal.
    """
    n = S.n_snapshots
    if n < 2:
        raise ValueError("need at least 2 snapshots")
    if kernel.kind == "inner_product":
        G = S.data.T @ S.data
        return GramMatrix(entries=_mirror_upper(G), kernel=kernel)
    if params is None:
        params = SinkhornParams(epsilon=kernel.epsilon)
    div, m2 = _pairwise_divergences(S, kernel.epsilon, params, threads)
    ii, jj = np.triu_indices(n, k=1)
    G = np.zeros((n, n))
    if kernel.kind == "sinkhorn_kernel":
        G[ii, jj] = 0.5 * (m2[ii] + m2[jj]) - div
        G[np.diag_indices(n)] = m2
    else:
        G[ii, jj] = np.exp(-(div ** 2) / kernel.sigma)
        G[np.diag_indices(n)] = 1.0
    return GramMatrix(entries=_mirror_upper(G), kernel=kernel)


def eigendecompose(G: GramMatrix, k: int,
                   snapshots: SnapshotMatrix | None = None) -> KpodModel:
    """Leading eigenpairs of the Gram matrix, descending.

    Negative eigenvalues past the indefiniteness threshold are excluded
    from the retained modes and surfaced in ``dropped_eigvals``; the
    effective latent dimension can therefore end up below ``k``.
    """
    if not 1 <= k <= G.size:
        raise ValueError(f"latent dimension {k} outside [1, {G.size}]")
    vals, vecs = np.linalg.eigh(G.entries)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    threshold = -NEG_EIG_REL * float(np.abs(vals).max()) if vals.size else 0.0
    dropped = tuple(float(v) for v in vals[vals < threshold])
    keep = np.flatnonzero(vals > 0.0)[:k]
    if keep.size == 0:
        raise ValueError("Gram matrix has no positive eigenvalues")
    if snapshots is not None:
        train_data = snapshots.data
        geometry = snapshots.geometry
    else:
        train_data = np.zeros((0, G.size))
        geometry = None
    return KpodModel(
        kernel=G.kernel,
        eigvals=vals[keep],
        eigvecs=vecs[:, keep],
        k=int(keep.size),
        train_data=train_data,
        geometry=geometry,
        dropped_eigvals=dropped,
    )


def reduce(model: KpodModel, G: GramMatrix) -> np.ndarray:
    """Reduced coordinates of the training set, ``Z = V*^T G`` (k x N_s)."""
    if G.size != model.eigvecs.shape[0]:
        raise ValueError(
            f"Gram size {G.size} does not match model ({model.eigvecs.shape[0]})"
        )
    if G.kernel != model.kernel:
        raise KernelError("Gram matrix was built with a different kernel")
    return model.eigvecs.T @ G.entries


def forward_map_batch(model: KpodModel, data: np.ndarray,
                      params: SinkhornParams | None = None,
                      threads: int = 1) -> np.ndarray:
    """Latent coordinates for new snapshot columns, ``z = V*^T g(u)``.

    ``data`` holds fields column-wise on the training geometry. Each
    kernel evaluation pairs one new field with one training snapshot;
    transport kernels batch all pairs through the grid solver.
    """
    if model.train_data.size == 0:
        raise ValueError("model was built without training snapshots")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] != model.train_data.shape[0]:
        raise MeasureError(
            f"field has {data.shape[0]} dofs, training geometry has "
            f"{model.train_data.shape[0]}"
        )
    n_new = data.shape[1]
    n_tr = model.n_train
    if model.kernel.kind == "inner_product":
        g = model.train_data.T @ data  # (n_tr, n_new)
        return model.eigvecs.T @ g
    if params is None:
        params = SinkhornParams(epsilon=model.kernel.epsilon)
    solver = SinkhornParams(
        epsilon=model.kernel.epsilon, max_iter=params.max_iter, tol=params.tol,
        log_domain=params.log_domain, epsilon_scaling=params.epsilon_scaling,
    )
    geom = model.geometry
    train_S = SnapshotMatrix(data=model.train_data,
                             params=np.zeros((n_tr, 1)), geometry=geom)
    W_tr, m2_tr = _normalized_weights(train_S)
    new_S = SnapshotMatrix(data=data, params=np.zeros((n_new, 1)), geometry=geom)
    W_new, m2_new = _normalized_weights(new_S)
    axes = tensor_axes(geom)
    if axes is not None:
        x, y = axes
        self_tr = grid_transport_costs(W_tr, W_tr, x, y, solver)
        self_new = grid_transport_costs(W_new, W_new, x, y, solver)
        tt, nn = np.meshgrid(np.arange(n_tr), np.arange(n_new), indexing="ij")
        tt, nn = tt.ravel(), nn.ravel()
        cross = np.empty(tt.size)
        chunks = [(lo, min(lo + 96, tt.size)) for lo in range(0, tt.size, 96)]

        def run_chunk(bounds):
            lo, hi = bounds
            cross[lo:hi] = grid_transport_costs(W_tr[tt[lo:hi]], W_new[nn[lo:hi]],
                                                x, y, solver)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run_chunk, chunks))
        else:
            for bounds in chunks:
                run_chunk(bounds)
        div = (cross - 0.5 * (self_tr[tt] + self_new[nn])).reshape(n_tr, n_new)
    else:
        tr_measures = [normalize_field(train_S.column_field(j)) for j in range(n_tr)]
        new_measures = [normalize_field(new_S.column_field(j)) for j in range(n_new)]
        div = np.array([
            [sinkhorn_divergence(tr_measures[i], new_measures[j], 2.0, solver)
             for j in range(n_new)]
            for i in range(n_tr)
        ])
    if model.kernel.kind == "sinkhorn_kernel":
        g = 0.5 * (m2_tr[:, None] + m2_new[None, :]) - div
    else:
        g = np.exp(-(div ** 2) / model.kernel.sigma)
    return model.eigvecs.T @ g


def forward_map(model: KpodModel, u_new: Field,
                params: SinkhornParams | None = None) -> np.ndarray:
    """Latent vector of a single field on the training geometry."""
    if model.geometry is not None and u_new.geometry.n_nodes != model.geometry.n_nodes:
        raise MeasureError("field geometry does not match the training geometry")
    return forward_map_batch(model, u_new.values[:, None], params)[:, 0]


@dataclass(frozen=True)
class PodBasis:
    """Truncated left singular basis with projection and reconstruction."""

    basis: np.ndarray
    singular_values: np.ndarray
    k: int

    def project(self, u: np.ndarray) -> np.ndarray:
        return self.basis.T @ u

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return self.basis @ z


def pod_svd(S: SnapshotMatrix, k: int) -> PodBasis:
    """Classical reduced basis from the thin SVD of the snapshot matrix."""
    if not 1 <= k <= min(S.n_dofs, S.n_snapshots):
        raise ValueError(f"rank {k} outside [1, {min(S.n_dofs, S.n_snapshots)}]")
    U, s, _ = np.linalg.svd(S.data, full_matrices=False)
    return PodBasis(basis=U[:, :k], singular_values=s, k=k)


def spectrum_report(obj: GramMatrix | SnapshotMatrix) -> np.ndarray:
    """Eigen or singular values normalized by the leading one."""
    if isinstance(obj, GramMatrix):
        vals = np.sort(np.linalg.eigvalsh(obj.entries))[::-1]
    elif isinstance(obj, SnapshotMatrix):
        vals = np.linalg.svd(obj.data, compute_uv=False)
    else:
        raise TypeError("expected a GramMatrix or SnapshotMatrix")
    lead = vals[0] if vals.size and vals[0] != 0.0 else 1.0
    return vals / lead
