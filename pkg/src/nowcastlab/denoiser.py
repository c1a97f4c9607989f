"""Frame-wise-guided denoising transformer for latent sequences.

The network predicts the noise in a stack of T noisy latent frames,
guided frame-by-frame by the encoded blurry deterministic forecast and,
at sequence level, by the encoded observation context:

1. frame splitting: the sequence is cut into groups of
   `frames_per_split` frames; each group's noisy frames and its
   blurry-forecast frames are channel-stacked into one spatial input.
   A split of 1 pairs every noisy frame with exactly its own forecast
   frame; a split of T folds the whole sequence into a single input
   and gives up that one-to-one correspondence;
2. frame-wise encoding: patch embedding plus a stack of adaLN-modulated
   attention blocks, run independently per group, producing one feature
   grid per group that is shared by the frames it covers;
3. sequence aggregation: per-frame features are channel-concatenated,
   mixed by an MLP, then cross-attend to the patch-embedded context;
4. sequence-wise decoding: attention blocks over spatial tokens whose
   embedding folds all frames' channels, then a linear head unpatchifies
   to the per-frame noise prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import MultiHeadAttention


@dataclass(frozen=True)
class DenoiserConfig:
    n_blocks: int = 4          # total attention blocks, split half encode / half decode
    embed_dim: int = 64        # per-frame token width
    agg_dim: int | None = None # per-frame width inside the sequence feature; defaults to embed_dim
    patch_size: int = 2
    n_heads: int = 4
    frames_per_split: int = 1
    mlp_ratio: float = 2.0
    t_in: int = 13
    t_out: int = 12
    latent_channels: int = 4
    latent_height: int = 8
    latent_width: int = 8

    @property
    def agg_dim_(self) -> int:
        return self.embed_dim if self.agg_dim is None else self.agg_dim

    @property
    def grid_h(self) -> int:
        return self.latent_height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.latent_width // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_groups(self) -> int:
        return self.t_out // self.frames_per_split

    def validate(self) -> None:
        if self.n_blocks < 2 or self.n_blocks % 2 != 0:
            raise ValueError(f"n_blocks must be even and >= 2, got {self.n_blocks}")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.latent_height % self.patch_size or self.latent_width % self.patch_size:
            raise ValueError(
                f"latent extents {self.latent_height}x{self.latent_width} not divisible "
                f"by patch size {self.patch_size}")
        if self.t_out % self.frames_per_split != 0:
            raise ValueError(
                f"t_out {self.t_out} not divisible by frames_per_split {self.frames_per_split}")


def frame_split(z: torch.Tensor, blur: torch.Tensor) -> torch.Tensor:
    """Pair each latent frame with its blurry-forecast frame along channels.

    (B,T,C,H,W) x (B,T,C,H,W) -> (B,T,2C,H,W); channels [0,C) of frame j
    are z's frame j.
    """
    if z.shape != blur.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(blur.shape)}")
    return torch.cat([z, blur], dim=2)


def group_split(z: torch.Tensor, blur: torch.Tensor, frames_per_split: int) -> torch.Tensor:
    """Cut the sequence into groups of frames_per_split frames and stack
    each group's noisy frames followed by its forecast frames along
    channels: (B,T,C,H,W) x 2 -> (B, T/s, 2*s*C, H, W).

    With frames_per_split=1 this reduces exactly to frame_split.
    """
    if z.shape != blur.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(blur.shape)}")
    b, t, c, h, w = z.shape
    s = frames_per_split
    if t % s != 0:
        raise ValueError(f"sequence length {t} not divisible by frames_per_split {s}")
    zg = z.reshape(b, t // s, s * c, h, w)
    bg = blur.reshape(b, t // s, s * c, h, w)
    return torch.cat([zg, bg], dim=2)


def sincos_positions(n: int, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Standard 1-D sine/cosine table, (n, dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    freq = torch.exp(-math.log(base) * torch.arange(dim // 2, dtype=torch.float32) / (dim // 2))
    args = pos * freq[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def sincos_grid(h: int, w: int, dim: int) -> torch.Tensor:
    """2-D factorized sine/cosine positional table, (h*w, dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    emb_y = sincos_positions(h, dim // 2)
    emb_x = sincos_positions(w, dim // 2)
    yy = emb_y[:, None, :].expand(h, w, dim // 2)
    xx = emb_x[None, :, :].expand(h, w, dim // 2)
    return torch.cat([yy, xx], dim=2).reshape(h * w, dim)


class TimestepEmbedder(nn.Module):
    """Sinusoidal diffusion-step features pushed through a small MLP."""

    def __init__(self, dim: int, freq_dim: int = 128):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freq = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        freq = freq.to(k.device, self.mlp[0].weight.dtype)
        args = k.to(freq.dtype)[:, None] * freq[None, :]
        feats = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
        return self.mlp(feats)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AttentionBlock(nn.Module):
    """Pre-norm self-attention + MLP block with adaLN-zero conditioning."""

    def __init__(self, hidden: int, n_heads: int, cond_dim: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = MultiHeadAttention(hidden, n_heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        mlp_hidden = max(1, int(hidden * mlp_ratio))
        self.mlp = nn.Sequential(
            nn.Linear(hidden, mlp_hidden), nn.GELU(), nn.Linear(mlp_hidden, hidden))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * hidden))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        sh_a, sc_a, gate_a, sh_m, sc_m, gate_m = self.ada(cond).chunk(6, dim=-1)
        h = modulate(self.norm1(x), sh_a, sc_a)
        x = x + gate_a.unsqueeze(1) * self.attn(h, h, h)
        h = modulate(self.norm2(x), sh_m, sc_m)
        return x + gate_m.unsqueeze(1) * self.mlp(h)


class CrossAttentionBlock(nn.Module):
    """Residual cross-attention; the output projection starts at zero so
    the context ramps in during training."""

    def __init__(self, dim: int, ctx_dim: int, n_heads: int, attn_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = MultiHeadAttention(attn_dim, n_heads, kdim=ctx_dim, out_dim=dim)
        self.q_in = nn.Linear(dim, attn_dim)
        nn.init.zeros_(self.attn.out_proj.weight)
        nn.init.zeros_(self.attn.out_proj.bias)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        return x + self.attn(self.q_in(self.norm(x)), ctx, ctx)


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection with fixed 2-D positional encoding."""

    def __init__(self, in_channels: int, dim: int, patch_size: int, grid_h: int, grid_w: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)
        self.register_buffer("pos", sincos_grid(grid_h, grid_w, dim), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(x).flatten(2).transpose(1, 2)
        return tokens + self.pos.to(tokens.dtype)


class FrameGuidedDenoiser(nn.Module):
    """Noise predictor eps_hat(z_k, k, (blur, ctx)) over latent sequences."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        d, dp = c.embed_dim, c.agg_dim_
        self.seq_dim = c.t_out * dp

        self.k_embed = TimestepEmbedder(d)
        self.frame_embed = PatchEmbed(2 * c.frames_per_split * c.latent_channels, d,
                                      c.patch_size, c.grid_h, c.grid_w)
        self.ctx_embed = PatchEmbed(c.latent_channels, d, c.patch_size,
                                    c.grid_h, c.grid_w)
        self.register_buffer("group_time", sincos_positions(c.n_groups, d), persistent=False)
        self.register_buffer("ctx_time", sincos_positions(c.t_in, d), persistent=False)

        half = c.n_blocks // 2
        self.encoder_blocks = nn.ModuleList(
            AttentionBlock(d, c.n_heads, d, c.mlp_ratio) for _ in range(half))
        self.aggregate_mlp = nn.Sequential(
            nn.Linear(c.t_out * d, c.t_out * d), nn.GELU(),
            nn.Linear(c.t_out * d, self.seq_dim))
        self.cross_attn = CrossAttentionBlock(self.seq_dim, d, c.n_heads, d)
        self.decoder_blocks = nn.ModuleList(
            AttentionBlock(self.seq_dim, c.n_heads, d, c.mlp_ratio) for _ in range(half))

        self.final_norm = nn.LayerNorm(self.seq_dim, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * self.seq_dim))
        out_per_token = c.t_out * c.latent_channels * c.patch_size ** 2
        self.head = nn.Linear(self.seq_dim, out_per_token)
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

        self.null_blur = nn.Parameter(
            0.02 * torch.randn(c.latent_channels, c.latent_height, c.latent_width))
        self.null_ctx = nn.Parameter(
            0.02 * torch.randn(c.latent_channels, c.latent_height, c.latent_width))

    def _check_latent(self, x: torch.Tensor, t: int, what: str) -> None:
        c = self.config
        expect = (t, c.latent_channels, c.latent_height, c.latent_width)
        if tuple(x.shape[1:]) != expect:
            raise ValueError(f"{what} shape {tuple(x.shape)} != (B,{','.join(map(str, expect))})")

    def encode_frames(self, group_inputs: torch.Tensor, k_emb: torch.Tensor) -> torch.Tensor:
        """Grouped inputs (B, G, 2*s*C, H, W) -> per-frame features (B,T,d,h,w).

        Groups are encoded independently, so with frames_per_split=1
        feature j depends only on input j and k. Every frame in a group
        shares that group's feature grid.
        """
        c = self.config
        b, groups = group_inputs.shape[:2]
        if groups != c.n_groups:
            raise ValueError(f"expected {c.n_groups} groups, got {groups}")
        tokens = self.frame_embed(group_inputs.reshape(b * groups, *group_inputs.shape[2:]))
        tokens = tokens.reshape(b, groups, c.tokens_per_frame, -1)
        tokens = tokens + self.group_time.to(tokens.dtype)[None, :, None, :]
        x = tokens.reshape(b * groups, c.tokens_per_frame, c.embed_dim)
        cond = k_emb.repeat_interleave(groups, dim=0)
        for block in self.encoder_blocks:
            x = block(x, cond)
        x = x.reshape(b, groups, c.tokens_per_frame, c.embed_dim)
        x = x.permute(0, 1, 3, 2).reshape(b, groups, c.embed_dim, c.grid_h, c.grid_w)
        return x.repeat_interleave(c.frames_per_split, dim=1)

    def embed_context(self, ctx: torch.Tensor) -> torch.Tensor:
        """(B,T_in,C,H,W) -> one token set (B, T_in*h*w, d)."""
        c = self.config
        b, t = ctx.shape[:2]
        tokens = self.ctx_embed(ctx.reshape(b * t, *ctx.shape[2:]))
        tokens = tokens.reshape(b, t, c.tokens_per_frame, -1)
        tokens = tokens + self.ctx_time.to(tokens.dtype)[None, :, None, :]
        return tokens.reshape(b, t * c.tokens_per_frame, c.embed_dim)

    def aggregate_sequence(self, features: torch.Tensor, ctx_tokens: torch.Tensor) -> torch.Tensor:
        """Concat per-frame features, MLP-mix, cross-attend to the context.

        (B,T,d,h,w) -> sequence feature tokens (B, h*w, T*d').
        """
        c = self.config
        b = features.shape[0]
        x = features.reshape(b, c.t_out * c.embed_dim, c.tokens_per_frame).transpose(1, 2)
        x = self.aggregate_mlp(x)
        return self.cross_attn(x, ctx_tokens)

    def decode_to_noise(self, h_s: torch.Tensor, k_emb: torch.Tensor) -> torch.Tensor:
        """Sequence tokens (B, h*w, T*d') -> noise prediction (B,T,C,H,W)."""
        c = self.config
        b = h_s.shape[0]
        x = h_s
        for block in self.decoder_blocks:
            x = block(x, k_emb)
        shift, scale = self.final_ada(k_emb).chunk(2, dim=-1)
        x = self.head(modulate(self.final_norm(x), shift, scale))
        p = c.patch_size
        x = x.reshape(b, c.grid_h, c.grid_w, c.t_out, c.latent_channels, p, p)
        x = x.permute(0, 3, 4, 1, 5, 2, 6)
        return x.reshape(b, c.t_out, c.latent_channels, c.latent_height, c.latent_width)

    def _fill_condition(self, given: torch.Tensor | None, null: torch.Tensor, b: int,
                        t: int, drop_mask: torch.Tensor | None) -> torch.Tensor:
        expanded = null.unsqueeze(0).unsqueeze(0).expand(b, t, *null.shape)
        if given is None:
            return expanded
        self._check_latent(given, t, "condition")
        if drop_mask is None:
            return given
        mask = drop_mask.reshape(b, 1, 1, 1, 1).to(given.dtype)
        return given * (1.0 - mask) + expanded.to(given.dtype) * mask

    def predict_noise(self, z_k: torch.Tensor, k: torch.Tensor,
                      blur: torch.Tensor | None, ctx: torch.Tensor | None,
                      drop_mask: torch.Tensor | None = None) -> torch.Tensor:
        c = self.config
        self._check_latent(z_k, c.t_out, "noisy latent")
        b = z_k.shape[0]
        blur_full = self._fill_condition(blur, self.null_blur, b, c.t_out, drop_mask)
        ctx_full = self._fill_condition(ctx, self.null_ctx, b, c.t_in, drop_mask)
        k_emb = self.k_embed(torch.as_tensor(k).reshape(-1))
        grouped = group_split(z_k, blur_full.to(z_k.dtype), c.frames_per_split)
        feats = self.encode_frames(grouped, k_emb)
        h_s = self.aggregate_sequence(feats, self.embed_context(ctx_full.to(z_k.dtype)))
        return self.decode_to_noise(h_s, k_emb)

    def forward(self, z_k: torch.Tensor, k: torch.Tensor, cond) -> torch.Tensor:
        """Sampler-facing entry: cond is (blur, ctx) or None for unconditional."""
        blur, ctx = cond if cond is not None else (None, None)
        return self.predict_noise(z_k, k, blur, ctx)
