"""Frame-wise KL-regularized autoencoder.

Each radar frame is compressed independently to a small latent raster
(spatial reduction 8x by default), so a sequence of T frames maps to T
latent frames with no temporal mixing.  The posterior is a diagonal
Gaussian; the KL weight is tiny, keeping the latent close to unit scale
without erasing detail.  Reconstruction is trained with an L1 pixel
loss plus an optional patch-discriminator term (off by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import require_finite


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int = 1
    latent_channels: int = 4
    base_width: int = 32
    n_downsamples: int = 3
    norm_groups: int = 4

    @property
    def reduction(self) -> int:
        return 2 ** self.n_downsamples

    def widths(self) -> list[int]:
        return [self.base_width * min(2 ** i, 4) for i in range(self.n_downsamples + 1)]

    def validate(self) -> None:
        if self.n_downsamples < 1:
            raise ValueError(f"n_downsamples must be >= 1, got {self.n_downsamples}")
        for w in self.widths():
            if w % self.norm_groups != 0:
                raise ValueError(
                    f"width {w} not divisible by norm_groups {self.norm_groups}")


@dataclass(frozen=True)
class AutoencoderLossConfig:
    recon_weight: float = 1.0
    kl_weight: float = 1e-6
    adv_weight: float = 0.0


def _norm_act(width: int, groups: int) -> nn.Sequential:
    return nn.Sequential(nn.GroupNorm(groups, width), nn.SiLU())


class FrameEncoder(nn.Module):
    """Single frame (B,1,H,W) -> diagonal Gaussian (mu, logvar), each
    (B,C_z,H/f,W/f)."""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths()
        layers: list[nn.Module] = [nn.Conv2d(config.in_channels, widths[0], 3, padding=1)]
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            layers += [_norm_act(w_in, config.norm_groups),
                       nn.Conv2d(w_in, w_out, 3, stride=2, padding=1),
                       _norm_act(w_out, config.norm_groups),
                       nn.Conv2d(w_out, w_out, 3, padding=1)]
        layers += [_norm_act(widths[-1], config.norm_groups),
                   nn.Conv2d(widths[-1], 2 * config.latent_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.net(x).chunk(2, dim=1)
        return mu, logvar.clamp(-30.0, 20.0)


class FrameDecoder(nn.Module):
    """Latent frame (B,C_z,h,w) -> reconstruction (B,1,h*f,w*f)."""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths()
        layers: list[nn.Module] = [nn.Conv2d(config.latent_channels, widths[-1], 3, padding=1)]
        for w_in, w_out in zip(widths[:0:-1], widths[-2::-1]):
            layers += [_norm_act(w_in, config.norm_groups),
                       nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(w_in, w_out, 3, padding=1),
                       _norm_act(w_out, config.norm_groups),
                       nn.Conv2d(w_out, w_out, 3, padding=1)]
        layers += [_norm_act(widths[0], config.norm_groups),
                   nn.Conv2d(widths[0], config.in_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class FrameAutoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        self.encoder = FrameEncoder(config)
        self.decoder = FrameDecoder(config)

    def encode_frame(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic encode: the posterior mean."""
        mu, _ = self.encoder(x)
        return mu

    def decode_frame(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def encode_sequence(self, x: torch.Tensor) -> torch.Tensor:
        """(B,T,1,H,W) -> (B,T,C_z,h,w), every frame encoded independently."""
        b, t = x.shape[:2]
        z = self.encode_frame(x.reshape(b * t, *x.shape[2:]))
        return z.reshape(b, t, *z.shape[1:])

    def decode_sequence(self, z: torch.Tensor) -> torch.Tensor:
        """(B,T,C_z,h,w) -> (B,T,1,H,W)."""
        b, t = z.shape[:2]
        x = self.decode_frame(z.reshape(b * t, *z.shape[2:]))
        return x.reshape(b, t, *x.shape[1:])

    def sample_posterior(self, x: torch.Tensor,
                         generator: torch.Generator | None = None) -> tuple[torch.Tensor, ...]:
        mu, logvar = self.encoder(x)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return mu + torch.exp(0.5 * logvar) * eps, mu, logvar


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean over batch of the per-sample KL(q || N(0,I)) summed over latent dims."""
    per_sample = 0.5 * (mu ** 2 + torch.exp(logvar) - 1.0 - logvar).flatten(1).sum(dim=1)
    return per_sample.mean()


class PatchDiscriminator(nn.Module):
    """Small conv stack scoring overlapping patches; used only when the
    adversarial weight is positive."""

    def __init__(self, in_channels: int = 1, base_width: int = 32, n_layers: int = 3):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, base_width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2)]
        width = base_width
        for i in range(1, n_layers):
            w_out = base_width * min(2 ** i, 4)
            layers += [nn.Conv2d(width, w_out, 4, stride=2, padding=1),
                       nn.GroupNorm(4, w_out), nn.LeakyReLU(0.2)]
            width = w_out
        layers.append(nn.Conv2d(width, 1, 4, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def autoencoder_loss(model: FrameAutoencoder, frames: torch.Tensor,
                     loss_config: AutoencoderLossConfig,
                     generator: torch.Generator | None = None,
                     discriminator: PatchDiscriminator | None = None) -> dict[str, torch.Tensor]:
    """Frames (B,1,H,W) -> {'total','recon','kl'[,'adv']} loss terms."""
    z, mu, logvar = model.sample_posterior(frames, generator=generator)
    recon = model.decode_frame(z)
    recon_term = (recon - frames).abs().mean()
    kl_term = kl_to_standard_normal(mu, logvar)
    total = loss_config.recon_weight * recon_term + loss_config.kl_weight * kl_term
    parts = {"recon": recon_term, "kl": kl_term}
    if loss_config.adv_weight > 0.0:
        if discriminator is None:
            raise ValueError("adv_weight > 0 requires a discriminator")
        adv_term = -discriminator(recon).mean()
        total = total + loss_config.adv_weight * adv_term
        parts["adv"] = adv_term
    parts["total"] = total
    return parts


def ae_train_step(model: FrameAutoencoder, optimizer, frames: torch.Tensor,
                  loss_config: AutoencoderLossConfig, lr: float,
                  generator: torch.Generator | None = None) -> dict[str, float]:
    parts = autoencoder_loss(model, frames, loss_config, generator=generator)
    require_finite(parts["total"], "autoencoder loss")
    optimizer.zero_grad()
    parts["total"].backward()
    optimizer.step(lr=lr)
    return {name: float(value.detach()) for name, value in parts.items()}


def latent_scale(latents: torch.Tensor) -> float:
    """Single dataset-level standard deviation across every latent element.

    Dividing latents by this scale puts the diffusion inputs at unit
    variance without reweighting channels or positions.
    """
    scale = float(latents.detach().double().std(correction=0))
    if not (scale > 0.0) or scale != scale:
        raise ValueError(f"degenerate latent scale {scale}")
    return scale


def recon_threshold_study(model: FrameAutoencoder, frames: torch.Tensor,
                          thresholds: list[float]) -> list[tuple[float, float, float]]:
    """Encode-decode `frames` (B,1,H,W) in [0,1]; score reconstruction
    CSI and HSS against the input at each threshold.  Returns
    (threshold, csi, hss) rows in the given threshold order.
    """
    from . import metrics

    with torch.no_grad():
        recon = model.decode_frame(model.encode_frame(frames)).clamp(0.0, 1.0)
    obs = frames.detach().cpu().numpy()
    pred = recon.cpu().numpy()
    rows = []
    for tau in thresholds:
        counts = metrics.confusion_counts(pred, obs, tau)
        rows.append((tau, metrics.csi(counts), metrics.hss(counts)))
    return rows
