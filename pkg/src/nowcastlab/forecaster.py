"""Deterministic mesoscale forecaster.

A compact encoder-translator-decoder conv net: frames are embedded
spatially one at a time with shared weights, a stack of residual conv
blocks mixes time and channels jointly at reduced resolution, and the
decoder renders each future frame.  Trained with per-pixel MSE, it
captures advection of the broad field and blurs the unpredictable
small-scale detail, which the generative stage later restores.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import require_finite


@dataclass(frozen=True)
class ForecasterConfig:
    in_frames: int = 13
    out_frames: int = 12
    in_channels: int = 1
    base_width: int = 32
    n_downsamples: int = 2
    translator_width: int = 128
    translator_depth: int = 4
    norm_groups: int = 4

    def widths(self) -> list[int]:
        return [self.base_width * min(2 ** i, 4) for i in range(self.n_downsamples + 1)]

    def validate(self) -> None:
        if self.in_frames < 1 or self.out_frames < 1:
            raise ValueError("in_frames and out_frames must be >= 1")
        if self.translator_depth < 1:
            raise ValueError("translator_depth must be >= 1")
        for w in self.widths() + [self.translator_width]:
            if w % self.norm_groups != 0:
                raise ValueError(f"width {w} not divisible by norm_groups {self.norm_groups}")


def _norm_act(width: int, groups: int) -> nn.Sequential:
    return nn.Sequential(nn.GroupNorm(groups, width), nn.SiLU())


class ResidualConvBlock(nn.Module):
    def __init__(self, width: int, groups: int):
        super().__init__()
        self.net = nn.Sequential(
            _norm_act(width, groups), nn.Conv2d(width, width, 3, padding=1),
            _norm_act(width, groups), nn.Conv2d(width, width, 3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(x)


class MesoscaleForecaster(nn.Module):
    """Context frames (B,T_in,1,H,W) -> future frames (B,T_out,1,H,W)."""

    def __init__(self, config: ForecasterConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths()

        enc: list[nn.Module] = [nn.Conv2d(config.in_channels, widths[0], 3, padding=1)]
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            enc += [_norm_act(w_in, config.norm_groups),
                    nn.Conv2d(w_in, w_out, 3, stride=2, padding=1)]
        self.encoder = nn.Sequential(*enc)

        feat = widths[-1]
        trans: list[nn.Module] = [
            nn.Conv2d(config.in_frames * feat, config.translator_width, 3, padding=1)]
        trans += [ResidualConvBlock(config.translator_width, config.norm_groups)
                  for _ in range(config.translator_depth)]
        trans += [_norm_act(config.translator_width, config.norm_groups),
                  nn.Conv2d(config.translator_width, config.out_frames * feat, 3, padding=1)]
        self.translator = nn.Sequential(*trans)

        dec: list[nn.Module] = []
        for w_in, w_out in zip(widths[:0:-1], widths[-2::-1]):
            dec += [_norm_act(w_in, config.norm_groups),
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(w_in, w_out, 3, padding=1)]
        dec += [_norm_act(widths[0], config.norm_groups),
                nn.Conv2d(widths[0], config.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        c = self.config
        b, t = context.shape[:2]
        if t != c.in_frames:
            raise ValueError(f"expected {c.in_frames} context frames, got {t}")
        feat = self.encoder(context.reshape(b * t, *context.shape[2:]))
        feat = feat.reshape(b, t * feat.shape[1], *feat.shape[2:])
        out = self.translator(feat)
        out = out.reshape(b * c.out_frames, -1, *out.shape[2:])
        frames = self.decoder(out)
        return frames.reshape(b, c.out_frames, *frames.shape[1:])

    @torch.no_grad()
    def predict(self, context: torch.Tensor) -> torch.Tensor:
        """Forward pass clamped to the physical range [0, 1]."""
        return self.forward(context).clamp(0.0, 1.0)


def mse_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over every element of the squared error."""
    if prediction.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
    return ((prediction - target) ** 2).mean()


def det_train_step(model: MesoscaleForecaster, optimizer, context: torch.Tensor,
                   target: torch.Tensor, lr: float) -> float:
    loss = mse_loss(model(context), target)
    require_finite(loss, "forecaster loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr=lr)
    return float(loss.detach())
