"""Noise schedule, forward noising, guidance, and DDIM sampling.

Operates on latent tensors shaped (B, T, C_z, H_z, W_z). The schedule
indexes steps k = 1..K with abar_0 = 1 so the final DDIM transition
lands exactly on clean data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import AdamW, NumericalError, require_finite


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cumulative products, 64-bit internally."""

    betas: np.ndarray       # (K,), beta_k for k=1..K
    alpha_bars: np.ndarray  # (K+1,), abar_0 = 1

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, k) -> np.ndarray:
        return self.alpha_bars[np.asarray(k)]


def make_linear_schedule(n_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if n_steps < 1:
        raise ValueError(f"need at least one step, got {n_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if n_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def _gather_abar(schedule: NoiseSchedule, k: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """abar_k broadcast over the trailing dims of `like`."""
    abar = torch.as_tensor(schedule.alpha_bars, dtype=like.dtype, device=like.device)[k]
    return abar.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(schedule: NoiseSchedule, z0: torch.Tensor, k: torch.Tensor | int,
             eps: torch.Tensor) -> torch.Tensor:
    """Closed-form forward noising: z_k = sqrt(abar_k) z0 + sqrt(1-abar_k) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != data shape {tuple(z0.shape)}")
    k = torch.as_tensor(k, dtype=torch.long).reshape(-1)
    if k.numel() not in (1, z0.shape[0]):
        raise ValueError(f"step tensor has {k.numel()} entries for batch {z0.shape[0]}")
    if (k < 1).any() or (k > schedule.n_steps).any():
        raise ValueError(f"step index out of range 1..{schedule.n_steps}")
    abar = _gather_abar(schedule, k, z0)
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps


def noise_prediction_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance blend: uncond + scale * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    # endpoints return the branch itself so no rounding is introduced
    if scale == 0.0:
        return eps_uncond
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step_sequence(n_schedule_steps: int, n_sample_steps: int) -> list[int]:
    """Evenly strided sub-sequence K..1 (descending), last transition hits 0."""
    if not (1 <= n_sample_steps <= n_schedule_steps):
        raise ValueError(
            f"need 1 <= sample steps <= {n_schedule_steps}, got {n_sample_steps}")
    ks = np.linspace(n_schedule_steps, 1, n_sample_steps)
    return [int(round(k)) for k in ks]


@torch.no_grad()
def ddim_sample(model, schedule: NoiseSchedule, cond, shape: tuple[int, ...],
                n_sample_steps: int = 20, guidance: float = 1.5, eta: float = 0.0,
                generator: torch.Generator | None = None,
                clamp_x0: tuple[float, float] | None = None) -> torch.Tensor:
    """DDIM sampling from pure noise down to a clean latent.

    `model(z_k, k, cond)` predicts the noise; `model(z_k, k, None)` is the
    unconditional branch used for guidance. With eta=0 the trajectory is
    fully deterministic after the initial draw.
    """
    z = torch.randn(shape, generator=generator)
    ks = ddim_step_sequence(schedule.n_steps, n_sample_steps)
    for i, k in enumerate(ks):
        k_next = ks[i + 1] if i + 1 < len(ks) else 0
        k_t = torch.full((shape[0],), k, dtype=torch.long)
        eps_hat = model(z, k_t, cond)
        if guidance != 1.0:
            eps_uncond = model(z, k_t, None)
            eps_hat = cfg_combine(eps_uncond, eps_hat, guidance)
        abar = float(schedule.alpha_bars[k])
        abar_next = float(schedule.alpha_bars[k_next])
        x0_hat = (z - (1.0 - abar) ** 0.5 * eps_hat) / abar ** 0.5
        if clamp_x0 is not None:
            x0_hat = x0_hat.clamp(*clamp_x0)
        sigma = 0.0
        if eta > 0.0 and k_next > 0:
            sigma = eta * ((1.0 - abar_next) / (1.0 - abar)) ** 0.5 \
                * (1.0 - abar / abar_next) ** 0.5
        dir_coeff = max(1.0 - abar_next - sigma**2, 0.0) ** 0.5
        z = abar_next ** 0.5 * x0_hat + dir_coeff * eps_hat
        if sigma > 0.0:
            z = z + sigma * torch.randn(shape, generator=generator)
        if not torch.isfinite(z).all():
            raise NumericalError(f"non-finite latent state at sampler step {i} (k={k})")
    return z


class ConditionDropCounter:
    """Counts how many per-sample conditions were nulled during training."""

    def __init__(self):
        self.dropped = 0
        self.total = 0


def diffusion_train_step(model, schedule: NoiseSchedule, optimizer: AdamW,
                         batch: dict[str, torch.Tensor], p_drop: float, lr: float,
                         generator: torch.Generator,
                         counter: ConditionDropCounter | None = None) -> float:
    """One noise-prediction training step with classifier-free condition drop.

    batch holds 'z0' (clean target latents) and the conditioning tensors
    'blur' and 'ctx' (either may be None for ablations). Steps are drawn
    uniformly from {1..K}; with probability p_drop a sample's condition
    is replaced by the model's learned null condition.
    """
    z0 = batch["z0"]
    b = z0.shape[0]
    k = torch.randint(1, schedule.n_steps + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator)
    z_k = q_sample(schedule, z0, k, eps)
    drop = torch.rand(b, generator=generator) < p_drop
    if counter is not None:
        counter.dropped += int(drop.sum())
        counter.total += b
    eps_hat = model.predict_noise(z_k, k, batch.get("blur"), batch.get("ctx"),
                                  drop_mask=drop)
    loss = noise_prediction_loss(eps, eps_hat)
    require_finite(loss, "diffusion training loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr=lr)
    return float(loss.detach())
