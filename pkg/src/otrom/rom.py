"""Offline/online pipeline orchestration.

Splits the snapshot set, builds the reduction (transport-kernel or
classical), trains the chosen network variant, and evaluates relative
reconstruction errors on held-out parameters. Every resolved default
lands in the bundle manifest so a run can be reproduced from it alone.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .kpod import (
    GramMatrix,
    KernelSpec,
    KpodModel,
    PodBasis,
    SnapshotMatrix,
    compute_gram,
    eigendecompose,
    forward_map_batch,
    pod_svd,
)
from .kpod import reduce as kpod_reduce
from .measures import GridGeometry
from .neuralnet import (
    NetworkParams,
    TrainConfig,
    TrainResult,
    build_conv_autoencoder,
    build_ff_autoencoder,
    forward,
    train_autoencoder,
    train_decoder,
)
from .pde import ProblemSpec, generate_snapshots
from .sinkhorn import SinkhornParams

__all__ = [
    "PipelineError",
    "Split",
    "Variant",
    "RomConfig",
    "RomBundle",
    "EvalReport",
    "split_dataset",
    "standardize_rows",
    "evaluate",
    "pod_projection_errors",
    "run_offline",
    "dlrom_baseline",
    "plane_fit_r2",
]

REDUCTIONS = ("kpod", "pod", "none")
ARCHITECTURES = ("ff", "cae")
MODES = ("autoencoder", "decoder")


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass(frozen=True)
class Split:
    """Disjoint train/test index sets drawn from a seeded permutation."""

    train_indices: np.ndarray
    test_indices: np.ndarray
    rate: float
    seed: int

    def __post_init__(self):
        tr = np.ascontiguousarray(np.asarray(self.train_indices, dtype=np.int64))
        te = np.ascontiguousarray(np.asarray(self.test_indices, dtype=np.int64))
        if np.intersect1d(tr, te).size:
            raise ValueError("train and test sets overlap")
        tr.setflags(write=False)
        te.setflags(write=False)
        object.__setattr__(self, "train_indices", tr)
        object.__setattr__(self, "test_indices", te)


def split_dataset(S: SnapshotMatrix | int, rate: float, seed: int) -> Split:
    """Seeded random split without replacement; |train| = round(rate * N)."""
    n = S if isinstance(S, int) else S.n_snapshots
    if not 0.0 < rate < 1.0:
        raise ValueError("training fraction must lie strictly between 0 and 1")
    n_train = int(np.floor(rate * n + 0.5))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"rate {rate} leaves an empty train or test set")
    perm = np.random.default_rng(seed).permutation(n)
    return Split(
        train_indices=np.sort(perm[:n_train]),
        test_indices=np.sort(perm[n_train:]),
        rate=rate,
        seed=seed,
    )


def standardize_rows(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale each row to zero mean, unit deviation.

    Zero-variance rows keep scale one. Returns (standardized, center,
    scale); the transformation inverts exactly.
    """
    center = Z.mean(axis=1)
    scale = Z.std(axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    return (Z - center[:, None]) / scale[:, None], center, scale


@dataclass(frozen=True)
class Variant:
    """One cell of the comparison grid."""

    reduction: str = "kpod"
    architecture: str = "cae"
    loss: str = "sinkhorn"
    mode: str = "autoencoder"

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.reduction == "none" and self.mode == "decoder":
            raise ValueError("decoder mode needs a reduction for its inputs")

    def tag(self) -> str:
        return f"{self.reduction}-{self.architecture}-{self.loss}-{self.mode}"


@dataclass(frozen=True)
class RomConfig:
    """Everything the offline stage needs besides the problem itself."""

    n_samples: int = 100
    train_rate: float = 0.7
    split_seed: int = 0
    k: int = 5
    kernel_epsilon_scale: float = 1e-3
    kernel_sigma: float = 1.0
    sinkhorn_tol: float = 1e-7
    sinkhorn_max_iter: int = 20_000
    train: TrainConfig = field(default_factory=TrainConfig)
    threads: int = 1

    def sinkhorn_params(self, epsilon: float) -> SinkhornParams:
        return SinkhornParams(epsilon=epsilon, max_iter=self.sinkhorn_max_iter,
                              tol=self.sinkhorn_tol)


@dataclass
class RomBundle:
    """Trained reduction + network with the full resolved configuration."""

    variant: Variant
    net: NetworkParams
    kpod_model: KpodModel | None
    pod_basis: PodBasis | None
    latent_center: np.ndarray
    latent_scale: np.ndarray
    sample_center: float
    sample_scale: float
    geometry: GridGeometry
    split: Split
    config: RomConfig
    kernel_epsilon: float | None
    manifest: dict[str, str]
    history: list


@dataclass
class EvalReport:
    """Relative errors over a test set plus per-sample error fields."""

    per_sample_eps: np.ndarray
    mean_eps: float
    error_fields: np.ndarray
    params: np.ndarray


def _as_batches(data_cols: np.ndarray, geometry: GridGeometry,
                architecture: str) -> np.ndarray:
    """Columns to sample-major network batches."""
    batch = data_cols.T
    if architecture == "cae":
        return batch.reshape(-1, 1, geometry.ny, geometry.nx)
    return batch


def _flatten_batches(batch: np.ndarray) -> np.ndarray:
    return batch.reshape(batch.shape[0], -1).T


def reconstruct(bundle: RomBundle, data_cols: np.ndarray,
                threads: int = 1) -> np.ndarray:
    """Reduced-order reconstructions of the given snapshot columns."""
    geom = bundle.geometry
    scaled = (data_cols - bundle.sample_center) / bundle.sample_scale
    if bundle.variant.mode == "autoencoder":
        X = _as_batches(scaled, geom, bundle.variant.architecture)
        out, _ = forward(bundle.net, X)
    else:
        if bundle.variant.reduction == "kpod":
            params = bundle.config.sinkhorn_params(bundle.kernel_epsilon or 1.0)
            Z = forward_map_batch(bundle.kpod_model, data_cols, params,
                                  threads=threads)
        else:
            Z = bundle.pod_basis.project(data_cols)
        Zs = (Z - bundle.latent_center[:, None]) / bundle.latent_scale[:, None]
        out, _ = forward(bundle.net, Zs.T)
    recon_cols = _flatten_batches(out)
    return recon_cols * bundle.sample_scale + bundle.sample_center


def evaluate(bundle: RomBundle, S_test: SnapshotMatrix,
             threads: int = 1) -> EvalReport:
    """Relative L2 errors of the bundle's reconstructions.

    The error field of each sample is the absolute nodal gap scaled by
    the sample's norm, so its own norm reproduces the scalar error.
    """
    if S_test.geometry.n_nodes != bundle.geometry.n_nodes:
        raise PipelineError("stage 'evaluate': test geometry mismatch")
    recon = reconstruct(bundle, S_test.data, threads=threads)
    norms = np.sqrt(np.mean(S_test.data ** 2, axis=0))
    gaps = S_test.data - recon
    eps = np.sqrt(np.mean(gaps ** 2, axis=0)) / norms
    fields = np.abs(gaps) / norms
    return EvalReport(
        per_sample_eps=eps,
        mean_eps=float(eps.mean()),
        error_fields=fields.T,
        params=S_test.params,
    )


def pod_projection_errors(S_train: SnapshotMatrix, S_test: SnapshotMatrix,
                          k_list, evaluate_on: str = "test") -> dict[int, float]:
    """Mean relative error of direct projection onto the leading basis.

    ``evaluate_on`` selects the columns the error is averaged over:
    held-out columns ("test") or the basis' own training columns
    ("train"). The published reference table for the Poisson family is
    reproduced by the training-set average.
    """
    cols = {"test": S_test.data, "train": S_train.data}[evaluate_on]
    out: dict[int, float] = {}
    U, _, _ = np.linalg.svd(S_train.data, full_matrices=False)
    for k in k_list:
        if k > S_train.n_snapshots:
            raise ValueError(f"rank {k} exceeds training set size")
        Uk = U[:, :k]
        resid = cols - Uk @ (Uk.T @ cols)
        eps = np.linalg.norm(resid, axis=0) / np.linalg.norm(cols, axis=0)
        out[int(k)] = float(eps.mean())
    return out


def _train_latents(problem: ProblemSpec, variant: Variant, cfg: RomConfig,
                   S_train: SnapshotMatrix, gram: GramMatrix | None):
    """Reduction stage: latent coordinates plus the fitted reduction."""
    if variant.reduction == "pod":
        basis = pod_svd(S_train, cfg.k)
        Z = basis.project(S_train.data)
        return None, basis, Z, None, gram
    if variant.reduction == "none":
        return None, None, None, None, gram
    max_cost = 2.0  # squared diameter of the unit square
    kernel_eps = cfg.kernel_epsilon_scale * max_cost
    kernel = KernelSpec(kind="sinkhorn_kernel", epsilon=kernel_eps)
    if gram is None:
        gram = compute_gram(S_train, kernel, cfg.sinkhorn_params(kernel_eps),
                            threads=cfg.threads)
    model = eigendecompose(gram, cfg.k, snapshots=S_train)
    Z = kpod_reduce(model, gram)
    return model, None, Z, kernel_eps, gram


def run_offline(problem: ProblemSpec, variant: Variant, cfg: RomConfig,
                snapshots: SnapshotMatrix | None = None,
                gram: GramMatrix | None = None) -> RomBundle:
    """Full offline stage for one variant.

    Generates (or reuses) snapshots, splits them, fits the reduction,
    trains the network, and returns a bundle whose manifest records
    every resolved choice. Stage failures carry the stage name.
    """
    timings: dict[str, float] = {}

    def staged(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"stage '{name}': {exc}") from exc
        timings[name] = time.perf_counter() - t0
        return out

    if snapshots is None:
        snapshots = staged("snapshots", generate_snapshots, problem,
                           cfg.n_samples, cfg.threads)
    split = staged("split", split_dataset, snapshots, cfg.train_rate,
                   cfg.split_seed)
    S_train = snapshots.select(split.train_indices)

    model, basis, Z, kernel_eps, gram = staged(
        "reduction", _train_latents, problem, variant, cfg, S_train, gram)

    u_center = float(S_train.data.mean())
    u_scale = float(S_train.data.std())
    if u_scale <= 0.0:
        u_scale = 1.0
    scaled_train = (S_train.data - u_center) / u_scale

    if Z is not None:
        Z_std, z_center, z_scale = standardize_rows(Z)
    else:
        Z_std = None
        z_center = np.zeros(cfg.k)
        z_scale = np.ones(cfg.k)

    geom = snapshots.geometry
    k_eff = model.k if model is not None else cfg.k

    def build_and_train():
        if variant.architecture == "cae":
            net = build_conv_autoencoder(geom.ny, geom.nx, k_eff,
                                         seed=cfg.train.seed)
        else:
            net = build_ff_autoencoder(geom.n_nodes, k_eff, seed=cfg.train.seed)
        if variant.mode == "autoencoder":
            batches = _as_batches(scaled_train, geom, variant.architecture)
            targets = None if Z_std is None else Z_std.T
            return train_autoencoder(net, batches, targets, cfg.train)
        decoder = net.decoder()
        targets = _as_batches(scaled_train, geom, variant.architecture)
        return train_decoder(decoder, Z_std.T, targets, cfg.train)

    result: TrainResult = staged("training", build_and_train)

    manifest = _build_manifest(problem, variant, cfg, split, kernel_eps,
                               u_center, u_scale, k_eff, result, timings)
    return RomBundle(
        variant=variant,
        net=result.params,
        kpod_model=model,
        pod_basis=basis,
        latent_center=z_center,
        latent_scale=z_scale,
        sample_center=u_center,
        sample_scale=u_scale,
        geometry=geom,
        split=split,
        config=cfg,
        kernel_epsilon=kernel_eps,
        manifest=manifest,
        history=result.history,
    )


def dlrom_baseline(problem: ProblemSpec, cfg: RomConfig,
                   snapshots: SnapshotMatrix | None = None) -> RomBundle:
    """Unconstrained convolutional autoencoder reference.

    Same architecture and bottleneck as the reduced variants, squared
    error loss, and no latent penalty.
    """
    train = replace(cfg.train, loss="mse", lam=0.0)
    baseline_cfg = replace(cfg, train=train)
    variant = Variant(reduction="none", architecture="cae", loss="mse",
                      mode="autoencoder")
    return run_offline(problem, variant, baseline_cfg, snapshots=snapshots)


def plane_fit_r2(Z: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Coefficient of determination of an affine fit per latent row.

    Each latent coordinate is regressed on the (two-dimensional)
    parameters; a zero-variance coordinate reports zero explained
    variance.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] < 2:
        raise ValueError("plane fit needs two-dimensional parameters")
    if params.shape[0] != Z.shape[1] or params.shape[0] < 3:
        raise ValueError("need one parameter row per latent column, at least 3")
    A = np.column_stack([params[:, 0], params[:, 1], np.ones(params.shape[0])])
    if np.linalg.matrix_rank(A) < 3:
        raise ValueError("parameter design matrix is rank deficient")
    out = np.empty(Z.shape[0])
    for r in range(Z.shape[0]):
        coef, *_ = np.linalg.lstsq(A, Z[r], rcond=None)
        resid = Z[r] - A @ coef
        total = float(np.sum((Z[r] - Z[r].mean()) ** 2))
        out[r] = 0.0 if total == 0.0 else 1.0 - float(np.sum(resid**2)) / total
    return out


def _build_manifest(problem, variant, cfg, split, kernel_eps, u_center,
                    u_scale, k_eff, result, timings) -> dict[str, str]:
    m: dict[str, str] = {}
    m["problem.kind"] = problem.kind
    m["problem.grid_n"] = str(problem.grid_n)
    m["problem.viscosity"] = repr(problem.viscosity)
    m["problem.final_time"] = repr(problem.final_time)
    m["problem.source_sigma"] = repr(problem.source_sigma)
    m["problem.advection_forcing"] = repr(problem.advection_forcing)
    m["variant"] = variant.tag()
    m["samples.count"] = str(cfg.n_samples)
    m["split.rate"] = repr(cfg.train_rate)
    m["split.seed"] = str(cfg.split_seed)
    m["split.n_train"] = str(split.train_indices.size)
    m["split.n_test"] = str(split.test_indices.size)
    m["reduction.k"] = str(cfg.k)
    m["reduction.k_effective"] = str(k_eff)
    m["reduction.kernel_epsilon"] = "none" if kernel_eps is None else repr(kernel_eps)
    m["reduction.kernel_epsilon_scale"] = repr(cfg.kernel_epsilon_scale)
    m["reduction.latent_standardized"] = "true"
    m["sinkhorn.tol"] = repr(cfg.sinkhorn_tol)
    m["sinkhorn.max_iter"] = str(cfg.sinkhorn_max_iter)
    m["samples.center"] = repr(u_center)
    m["samples.scale"] = repr(u_scale)
    t = cfg.train
    m["train.loss"] = t.loss
    m["train.epochs"] = str(t.epochs)
    m["train.pretrain_epochs"] = str(t.pretrain_epochs if t.loss == "sinkhorn" else 0)
    m["train.learning_rate"] = repr(t.learning_rate)
    m["train.batch_size"] = str(t.batch_size)
    m["train.lambda"] = repr(t.lam)
    m["train.patience"] = str(t.patience)
    m["train.seed"] = str(t.seed)
    m["train.val_fraction"] = repr(t.val_fraction)
    m["train.sinkhorn_epsilon_scale"] = repr(t.sinkhorn_epsilon_scale)
    m["train.activation"] = "elu"
    m["train.dropout_keep"] = "0.9"
    m["train.optimizer"] = "adam(lr recorded above, betas 0.9/0.999)"
    m["train.epochs_ran"] = str(len(result.history))
    m["train.best_epoch"] = str(result.best_epoch)
    m["train.best_val"] = repr(result.best_val)
    m["threads"] = str(cfg.threads)
    for name, dt in timings.items():
        m[f"wall_time.{name}"] = f"{dt:.3f}"
    return m
