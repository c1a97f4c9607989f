"""Desk-scale cascaded precipitation nowcasting.

A deterministic forecaster predicts the blurry mesoscale evolution of a
radar sequence; a frame-wise autoencoder compresses frames to latents;
a frame-wise-guided diffusion transformer generates small-scale detail
in latent space conditioned on the blurry forecast and the observed
context.  A verification suite (CSI, HSS, pooled CSI, CRPS, SSIM) and a
seeded synthetic radar generator make the whole cascade testable on a
single machine.
"""

__version__ = "0.1.0"

__all__ = [
    "autoencoder",
    "checkpoint",
    "cli",
    "config",
    "denoiser",
    "diffusion",
    "forecaster",
    "metrics",
    "numerics",
    "pipeline",
    "report",
    "synthetic_radar",
]
