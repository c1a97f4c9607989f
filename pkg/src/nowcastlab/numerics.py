"""Differentiable array substrate shared by all models.

The heavy lifting (storage, autodiff, conv kernels) is delegated to
PyTorch on CPU; this module pins down the small operator surface the
rest of the package is allowed to rely on, adds the shape diagnostics
and failure modes the training loops need, and provides the gradient
oracle used to verify every differentiable path at 64-bit.

Conventions: float32 for training and sampling, float64 for gradient
oracles. All ops are pure functions over their inputs and deterministic
for a fixed build; optimizer state is owned by exactly one training
loop.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F


class NumericalError(RuntimeError):
    """A non-finite value surfaced where the contract requires finiteness."""


def require_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {what}")
    return t


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """2-D convolution, (N,C_in,H,W) x (C_out,C_in,k,k) -> (N,C_out,H',W')."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D (N,C,H,W), got {x.ndim}-D")
    if weight.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D (C_out,C_in,k,k), got {weight.ndim}-D")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input C_in={x.shape[1]} vs kernel C_in={weight.shape[1]}")
    k = weight.shape[-1]
    if x.shape[-2] + 2 * padding < k or x.shape[-1] + 2 * padding < k:
        raise ValueError(
            f"conv2d spatial extents {tuple(x.shape[-2:])} too small for kernel {k} "
            f"with padding {padding}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def max_pool2d(x: torch.Tensor, k: int) -> torch.Tensor:
    """Max pooling with kernel = stride = k over the trailing two dims.

    Extents not divisible by k are handled with partial windows at the
    right/bottom edge (the max over the values present), which is
    equivalent to padding with the field minimum: padding can never
    create a spurious exceedance.
    """
    if k < 1:
        raise ValueError(f"pool size must be >= 1, got {k}")
    if k == 1:
        return x
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    flat = x.reshape(-1, 1, h, w)
    pooled = F.max_pool2d(flat, kernel_size=k, stride=k, ceil_mode=True)
    return pooled.reshape(*lead, *pooled.shape[-2:])


def scaled_dot_product_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                                 n_heads: int) -> torch.Tensor:
    """softmax(QK^T/sqrt(d_head))V with head splitting, (..., T, D) tokens."""
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ValueError(f"embed dim {d} not divisible by n_heads {n_heads}")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ValueError(
            f"attention dim mismatch: q {d}, k {k.shape[-1]}, v {v.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"key/value token counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    d_head = d // n_heads

    def split(t: torch.Tensor) -> torch.Tensor:
        # (..., T, D) -> (..., n_heads, T, d_head)
        return t.reshape(*t.shape[:-1], n_heads, d_head).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(d_head)
    attn = torch.softmax(scores, dim=-1)
    out = attn @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-1], d)


class MultiHeadAttention(torch.nn.Module):
    """Projected multi-head attention over token sequences.

    q/k/v may come from different sources (cross-attention); kdim
    configures the key/value input width when it differs from the
    query width.
    """

    def __init__(self, dim: int, n_heads: int, kdim: int | None = None, out_dim: int | None = None):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by n_heads {n_heads}")
        kdim = dim if kdim is None else kdim
        out_dim = dim if out_dim is None else out_dim
        self.n_heads = n_heads
        self.q_proj = torch.nn.Linear(dim, dim)
        self.k_proj = torch.nn.Linear(kdim, dim)
        self.v_proj = torch.nn.Linear(kdim, dim)
        self.out_proj = torch.nn.Linear(dim, out_dim)

    def forward(self, q_tokens: torch.Tensor, k_tokens: torch.Tensor,
                v_tokens: torch.Tensor) -> torch.Tensor:
        out = scaled_dot_product_attention(
            self.q_proj(q_tokens), self.k_proj(k_tokens), self.v_proj(v_tokens),
            self.n_heads)
        return self.out_proj(out)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr_max at step 0 to lr_min at total_steps.

    Steps past total_steps clamp to lr_min.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if total_steps <= 0:
        raise ValueError(f"total_steps must be > 0, got {total_steps}")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Decoupled-weight-decay Adam over an explicit parameter list.

    Kept hand-rolled rather than torch.optim so that (a) a non-finite
    gradient refuses the step instead of corrupting moments, and (b)
    moment tensors are plain named state that serializes bit-exactly
    into checkpoints for resume.
    """

    def __init__(self, params: Iterable[torch.nn.Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float | None = None) -> None:
        """One update; raises NumericalError (state untouched) on bad grads."""
        lr = self.lr if lr is None else lr
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericalError("non-finite gradient, optimizer step refused")
            grads.append(g)
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.exp_avg, self.exp_avg_sq):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
            if self.weight_decay != 0.0:
                p.add_(p, alpha=-lr * self.weight_decay)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {"step_count": torch.tensor([self.step_count])}
        for i, (m, v) in enumerate(zip(self.exp_avg, self.exp_avg_sq)):
            out[f"exp_avg.{i}"] = m
            out[f"exp_avg_sq.{i}"] = v
        return out

    def load_state_tensors(self, state: dict[str, torch.Tensor]) -> None:
        self.step_count = int(state["step_count"].item())
        for i in range(len(self.params)):
            self.exp_avg[i] = state[f"exp_avg.{i}"].to(self.params[i].dtype).clone()
            self.exp_avg_sq[i] = state[f"exp_avg_sq.{i}"].to(self.params[i].dtype).clone()


def finite_difference_grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_entries_per_param: int | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    `f` is a scalar-valued closure over `params`; all tensors must be
    float64 (central differences are unreliable at 32-bit). Large
    parameters can be spot-checked on a deterministic random subset of
    coordinates via max_entries_per_param.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("finite_difference_grad_check requires float64 parameters")
    loss = f()
    if loss.numel() != 1:
        raise ValueError("f must be scalar-valued")
    auto = torch.autograd.grad(loss, params, allow_unused=True)

    max_rel = 0.0
    for p, g in zip(params, auto):
        g = torch.zeros_like(p) if g is None else g
        flat = p.detach().reshape(-1)
        n = flat.numel()
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = torch.randperm(n, generator=generator)[:max_entries_per_param]
        else:
            idx = torch.arange(n)
        gflat = g.reshape(-1)
        for i in idx.tolist():
            orig = flat[i].item()
            step = eps * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + step
                f_plus = f().item()
                flat[i] = orig - step
                f_minus = f().item()
                flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = gflat[i].item()
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-4)
            max_rel = max(max_rel, rel)
    return max_rel
