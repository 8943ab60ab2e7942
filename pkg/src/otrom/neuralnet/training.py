"""Mini-batch training with adaptive-moment updates.

Two entry points cover the two network roles: ``train_decoder`` fits a
latent-to-field map alone, ``train_autoencoder`` fits the full stack
and can add a penalty tying the bottleneck to precomputed reduced
coordinates. Transport-loss runs start with a squared-error warm-up
phase so samples and reconstructions stay coupled; early stopping with
weight restore runs inside the final phase.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..sinkhorn import SinkhornParams
from .layers import NetworkParams, backward, forward, forward_with_latent
from .losses import mse_loss, sinkhorn_batch_loss

__all__ = [
    "TrainingDivergedError",
    "TrainConfig",
    "EpochRecord",
    "TrainResult",
    "train_decoder",
    "train_autoencoder",
]

LOSS_KINDS = ("mse", "sinkhorn")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Full training contract; every field lands in the run manifest."""

    loss: str = "mse"
    epochs: int = 1000
    pretrain_epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 16
    lam: float = 1.0
    patience: int = 50
    seed: int = 0
    val_fraction: float = 0.1
    sinkhorn_epsilon_scale: float = 1e-2
    sinkhorn_max_iter: int = 5000
    sinkhorn_tol: float = 1e-9

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lam < 0.0:
            raise ValueError("penalty weight must be nonnegative")
        if self.loss == "sinkhorn" and not 0 <= self.pretrain_epochs < self.epochs:
            raise ValueError("pretrain_epochs must lie in [0, epochs)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def loss_params(self) -> SinkhornParams:
        return SinkhornParams(epsilon=1.0, max_iter=self.sinkhorn_max_iter,
                              tol=self.sinkhorn_tol)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    recon_loss: float
    penalty_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = np.inf


class _Adam:
    """Adaptive-moment step on a nested list of weight arrays."""

    def __init__(self, weights, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(a) for a in lw] for lw in weights]
        self.v = [[np.zeros_like(a) for a in lw] for lw in weights]

    def step(self, weights, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for li, (lw, lg) in enumerate(zip(weights, grads)):
            for ai, g in enumerate(lg):
                m = self.m[li][ai]
                v = self.v[li][ai]
                m += (1.0 - self.beta1) * (g - m)
                v += (1.0 - self.beta2) * (g * g - v)
                lw[ai] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _batch_recon_loss(cfg: TrainConfig, phase: str, target, output):
    """Active reconstruction loss and its gradient for one batch."""
    if cfg.loss == "sinkhorn" and phase == "sinkhorn":
        flat_t = target.reshape(target.shape[0], -1)
        flat_o = output.reshape(output.shape[0], -1)
        diff = flat_t[:, None, :] - flat_o[None, :, :]
        max_c = float(np.einsum("ijk,ijk->ij", diff, diff).max())
        if max_c <= 0.0:
            return 0.0, np.zeros_like(output)
        eps = cfg.sinkhorn_epsilon_scale * max_c
        loss, grad = sinkhorn_batch_loss(flat_t, flat_o, eps, cfg.loss_params())
        return loss, grad.reshape(output.shape)
    return mse_loss(target, output)


def _split_validation(n: int, cfg: TrainConfig, rng: np.random.Generator):
    n_val = int(round(cfg.val_fraction * n))
    if n_val < 1 or n - n_val < 1:
        return np.arange(n), np.empty(0, dtype=int)
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _phase_of(cfg: TrainConfig, epoch: int) -> str:
    if cfg.loss == "sinkhorn" and epoch < cfg.pretrain_epochs:
        return "mse_pretrain"
    return "sinkhorn" if cfg.loss == "sinkhorn" else "mse"


def _final_phase(cfg: TrainConfig) -> str:
    return "sinkhorn" if cfg.loss == "sinkhorn" else "mse"


def _train_loop(net: NetworkParams, inputs, recon_targets, latent_targets,
                cfg: TrainConfig, with_penalty: bool) -> TrainResult:
    n = inputs.shape[0]
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _split_validation(n, cfg, rng)
    weights = net.mutable_weights()
    opt = _Adam(weights, cfg.learning_rate)
    result = TrainResult(params=net)
    best_weights = None
    stall = 0
    use_penalty = with_penalty and cfg.lam > 0.0 and latent_targets is not None

    for epoch in range(cfg.epochs):
        phase = _phase_of(cfg, epoch)
        order = rng.permutation(train_idx.size)
        recon_sum = pen_sum = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            sel = train_idx[order[lo:lo + cfg.batch_size]]
            xb = inputs[sel]
            tb = recon_targets[sel]
            if use_penalty:
                out, latent, caches = forward_with_latent(
                    net, xb, train_mode=True, rng=rng, weights=weights)
            else:
                out, caches = forward(net, xb, train_mode=True, rng=rng,
                                      weights=weights)
                latent = None
            recon, grad_out = _batch_recon_loss(cfg, phase, tb, out)
            inject = None
            pen = 0.0
            if use_penalty:
                pen, grad_latent = mse_loss(latent_targets[sel], latent)
                inject = {net.bottleneck_index: cfg.lam * grad_latent}
            _, grads = backward(net, caches, grad_out, inject=inject,
                                weights=weights)
            opt.step(weights, grads)
            recon_sum += recon * sel.size
            pen_sum += pen * sel.size
        recon_epoch = recon_sum / train_idx.size
        pen_epoch = pen_sum / train_idx.size
        total_epoch = recon_epoch + cfg.lam * pen_epoch
        if not np.isfinite(total_epoch):
            raise TrainingDivergedError(epoch)

        if val_idx.size:
            val_loss = _evaluate_loss(net, weights, inputs[val_idx],
                                      recon_targets[val_idx],
                                      None if latent_targets is None
                                      else latent_targets[val_idx],
                                      cfg, phase, use_penalty)
        else:
            val_loss = total_epoch
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch)
        result.history.append(EpochRecord(
            epoch=epoch, phase=phase, train_loss=total_epoch,
            recon_loss=recon_epoch, penalty_loss=pen_epoch, val_loss=val_loss))

        # best-weight tracking restarts when the objective switches
        if phase == _final_phase(cfg):
            if val_loss < result.best_val:
                result.best_val = val_loss
                result.best_epoch = epoch
                best_weights = [[a.copy() for a in lw] for lw in weights]
                stall = 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break

    if best_weights is None:
        best_weights = weights
        result.best_epoch = len(result.history) - 1
        result.best_val = result.history[-1].val_loss
    result.params = net.with_weights(best_weights)
    return result


def _evaluate_loss(net, weights, x, t, z, cfg, phase, use_penalty):
    out, latent, = None, None
    if use_penalty:
        out, latent, _ = forward_with_latent(net, x, train_mode=False,
                                             weights=weights)
    else:
        out, _ = forward(net, x, train_mode=False, weights=weights)
    recon, _ = _batch_recon_loss(cfg, phase, t, out)
    total = recon
    if use_penalty:
        pen, _ = mse_loss(z, latent)
        total += cfg.lam * pen
    return float(total)


def train_decoder(net: NetworkParams, latents: np.ndarray, targets: np.ndarray,
                  cfg: TrainConfig) -> TrainResult:
    """Fit a decoder on (latent, field) pairs.

    ``latents`` is (N, k), ``targets`` is (N, *output_shape); rows
    correspond. Returns the weights of the best validation epoch.
    """
    latents = np.asarray(latents, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if latents.shape[0] != targets.shape[0]:
        raise ValueError("latent and target sample counts differ")
    return _train_loop(net, latents, targets, None, cfg, with_penalty=False)


def train_autoencoder(net: NetworkParams, samples: np.ndarray,
                      latent_targets: np.ndarray | None,
                      cfg: TrainConfig) -> TrainResult:
    """Fit the full autoencoder on samples, reconstructing them.

    With a positive penalty weight and given ``latent_targets`` the
    bottleneck is pulled toward those coordinates through a squared
    error term; the reconstruction part follows the configured loss.
    Latent targets are plain coordinates, so their penalty stays squared
    error even when the reconstruction loss is the transport divergence.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if latent_targets is not None:
        latent_targets = np.asarray(latent_targets, dtype=np.float64)
        if latent_targets.shape[0] != samples.shape[0]:
            raise ValueError("latent target and sample counts differ")
    return _train_loop(net, samples, samples, latent_targets, cfg,
                       with_penalty=True)
