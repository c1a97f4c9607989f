"""Tensor-op layer: pooling, attention, optimizer, and gradient checker."""

import math

import numpy as np
import pytest
import torch

import oracles
from nowcastlab import numerics


def _softmax_rows(m: np.ndarray) -> np.ndarray:
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention_loop(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    n_heads: int) -> np.ndarray:
    """Per-head attention with explicit slicing, batch of one level."""
    d = q.shape[-1]
    d_head = d // n_heads
    out = np.zeros_like(q)
    for h in range(n_heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        qh, kh, vh = q[..., sl], k[..., sl], v[..., sl]
        scores = qh @ kh.swapaxes(-2, -1) / math.sqrt(d_head)
        out[..., sl] = _softmax_rows(scores) @ vh
    return out


class TestRequireFinite:
    def test_passes_through_finite(self):
        t = torch.tensor([1.0, -2.0])
        assert numerics.require_finite(t, "x") is t

    def test_raises_on_nan_and_inf(self):
        with pytest.raises(numerics.NumericalError):
            numerics.require_finite(torch.tensor([1.0, float("nan")]), "x")
        with pytest.raises(numerics.NumericalError):
            numerics.require_finite(torch.tensor([float("inf")]), "x")


class TestConv2d:
    def test_matches_explicit_loop(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(2, 3, 5, 6, generator=gen, dtype=torch.float64)
        w = torch.randn(4, 3, 3, 3, generator=gen, dtype=torch.float64)
        b = torch.randn(4, generator=gen, dtype=torch.float64)
        got = numerics.conv2d(x, w, b, stride=1, padding=1).numpy()
        xp = torch.nn.functional.pad(x, (1, 1, 1, 1)).numpy()
        want = np.zeros_like(got)
        for n in range(2):
            for co in range(4):
                for i in range(5):
                    for j in range(6):
                        acc = b[co].item()
                        for ci in range(3):
                            for di in range(3):
                                for dj in range(3):
                                    acc += xp[n, ci, i + di, j + dj] * w[co, ci, di, dj].item()
                        want[n, co, i, j] = acc
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_stride_two_shape(self):
        x = torch.zeros(1, 2, 8, 8)
        w = torch.zeros(5, 2, 3, 3)
        assert numerics.conv2d(x, w, stride=2, padding=1).shape == (1, 5, 4, 4)

    def test_rejects_bad_rank_and_channels(self):
        with pytest.raises(ValueError):
            numerics.conv2d(torch.zeros(2, 3, 4), torch.zeros(1, 3, 3, 3))
        with pytest.raises(ValueError):
            numerics.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
        with pytest.raises(ValueError):
            numerics.conv2d(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 5, 5))


class TestMaxPool2d:
    def test_pool_one_is_identity(self):
        x = torch.randn(2, 3, 4, 5)
        assert numerics.max_pool2d(x, 1) is x

    def test_matches_numpy_oracle_with_partial_windows(self):
        rng = np.random.default_rng(61)
        for trial in range(40):
            h = int(rng.integers(1, 10))
            w = int(rng.integers(1, 10))
            k = int(rng.integers(1, 5))
            field = rng.standard_normal((2, h, w))
            got = numerics.max_pool2d(torch.from_numpy(field), k).numpy()
            want = oracles.pool_stack_loop(field, k)
            np.testing.assert_allclose(got, want, rtol=0, atol=0)

    def test_rejects_bad_kernel(self):
        with pytest.raises(ValueError):
            numerics.max_pool2d(torch.zeros(1, 4, 4), 0)


class TestAttention:
    def test_matches_softmax_oracle_multihead(self):
        gen = torch.Generator().manual_seed(1)
        q = torch.randn(2, 7, 8, generator=gen, dtype=torch.float64)
        k = torch.randn(2, 5, 8, generator=gen, dtype=torch.float64)
        v = torch.randn(2, 5, 8, generator=gen, dtype=torch.float64)
        got = numerics.scaled_dot_product_attention(q, k, v, n_heads=4).numpy()
        want = _attention_loop(q.numpy(), k.numpy(), v.numpy(), 4)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_single_head_reduces_to_plain_softmax(self):
        gen = torch.Generator().manual_seed(2)
        q = torch.randn(3, 6, generator=gen, dtype=torch.float64)
        k = torch.randn(4, 6, generator=gen, dtype=torch.float64)
        v = torch.randn(4, 6, generator=gen, dtype=torch.float64)
        got = numerics.scaled_dot_product_attention(q, k, v, n_heads=1).numpy()
        scores = (q.numpy() @ k.numpy().T) / math.sqrt(6)
        want = _softmax_rows(scores) @ v.numpy()
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_uniform_keys_average_values(self):
        q = torch.zeros(1, 2, 4)
        k = torch.zeros(1, 3, 4)
        v = torch.arange(12.0).reshape(1, 3, 4)
        got = numerics.scaled_dot_product_attention(q, k, v, n_heads=2)
        want = v.mean(dim=1, keepdim=True).expand(1, 2, 4)
        torch.testing.assert_close(got, want)

    def test_dim_validation(self):
        with pytest.raises(ValueError):
            numerics.scaled_dot_product_attention(
                torch.zeros(1, 2, 6), torch.zeros(1, 2, 6), torch.zeros(1, 2, 6), 4)
        with pytest.raises(ValueError):
            numerics.scaled_dot_product_attention(
                torch.zeros(1, 2, 6), torch.zeros(1, 2, 4), torch.zeros(1, 2, 6), 2)
        with pytest.raises(ValueError):
            numerics.scaled_dot_product_attention(
                torch.zeros(1, 2, 6), torch.zeros(1, 3, 6), torch.zeros(1, 4, 6), 2)


class TestMultiHeadAttention:
    def test_matches_manual_projection_composition(self):
        gen = torch.Generator().manual_seed(3)
        mha = numerics.MultiHeadAttention(dim=8, n_heads=2, kdim=6, out_dim=10).double()
        q = torch.randn(2, 4, 8, generator=gen, dtype=torch.float64)
        ctx = torch.randn(2, 5, 6, generator=gen, dtype=torch.float64)
        got = mha(q, ctx, ctx)
        inner = numerics.scaled_dot_product_attention(
            mha.q_proj(q), mha.k_proj(ctx), mha.v_proj(ctx), 2)
        want = mha.out_proj(inner)
        torch.testing.assert_close(got, want)
        assert got.shape == (2, 4, 10)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            numerics.MultiHeadAttention(dim=6, n_heads=4)


class TestCosineLr:
    def test_endpoints(self):
        assert numerics.cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert numerics.cosine_lr(100, 100, 1e-3, 1e-5) == 1e-5
        assert numerics.cosine_lr(250, 100, 1e-3, 1e-5) == 1e-5

    def test_midpoint_is_mean(self):
        got = numerics.cosine_lr(50, 100, 2e-3, 4e-4)
        assert got == pytest.approx(0.5 * (2e-3 + 4e-4), rel=1e-12)

    def test_monotone_decreasing(self):
        vals = [numerics.cosine_lr(s, 200, 1.0, 0.0) for s in range(201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            numerics.cosine_lr(-1, 10, 1e-3)
        with pytest.raises(ValueError):
            numerics.cosine_lr(0, 0, 1e-3)


class TestAdamW:
    def _random_grads(self, shape, n, seed):
        gen = torch.Generator().manual_seed(seed)
        return [torch.randn(shape, generator=gen, dtype=torch.float64) for _ in range(n)]

    def test_matches_float64_reference(self):
        for wd in (0.0, 0.01):
            p = torch.nn.Parameter(torch.linspace(-1.0, 1.0, 12, dtype=torch.float64))
            p0 = p.detach().numpy().copy()
            grads = self._random_grads((12,), 20, seed=77)
            opt = numerics.AdamW([p], lr=1e-2, weight_decay=wd)
            for g in grads:
                p.grad = g.clone()
                opt.step()
            want = oracles.adamw_reference(p0, [g.numpy() for g in grads],
                                           lr=1e-2, weight_decay=wd)
            np.testing.assert_allclose(p.detach().numpy(), want, rtol=1e-12, atol=1e-14)

    def test_per_step_lr_override(self):
        p = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
        p0 = p.detach().numpy().copy()
        grads = self._random_grads((3,), 3, seed=5)
        opt = numerics.AdamW([p], lr=123.0)
        for g in grads:
            p.grad = g.clone()
            opt.step(lr=1e-3)
        want = oracles.adamw_reference(p0, [g.numpy() for g in grads], lr=1e-3)
        np.testing.assert_allclose(p.detach().numpy(), want, rtol=1e-12, atol=1e-14)

    def test_missing_grad_treated_as_zero(self):
        p = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
        opt = numerics.AdamW([p], lr=1e-2)
        opt.step()
        np.testing.assert_allclose(p.detach().numpy(), np.ones(2))
        assert opt.step_count == 1

    def test_nonfinite_grad_refused_and_state_untouched(self):
        p = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
        opt = numerics.AdamW([p], lr=1e-2)
        p.grad = torch.tensor([1.0, float("nan")], dtype=torch.float64)
        with pytest.raises(numerics.NumericalError):
            opt.step()
        assert opt.step_count == 0
        np.testing.assert_allclose(p.detach().numpy(), np.ones(2))
        assert torch.all(opt.exp_avg[0] == 0)

    def test_zero_grad_clears(self):
        p = torch.nn.Parameter(torch.ones(2))
        p.grad = torch.ones(2)
        numerics.AdamW([p]).zero_grad()
        assert p.grad is None

    def test_state_roundtrip_resumes_bit_identically(self):
        grads = self._random_grads((6,), 15, seed=9)

        def run(with_reload: bool) -> np.ndarray:
            p = torch.nn.Parameter(torch.linspace(0.5, 2.0, 6, dtype=torch.float64))
            opt = numerics.AdamW([p], lr=3e-3, weight_decay=0.01)
            for g in grads[:10]:
                p.grad = g.clone()
                opt.step()
            if with_reload:
                state = {k: v.clone() for k, v in opt.state_tensors().items()}
                opt2 = numerics.AdamW([p], lr=3e-3, weight_decay=0.01)
                opt2.load_state_tensors(state)
                opt = opt2
            for g in grads[10:]:
                p.grad = g.clone()
                opt.step()
            return p.detach().numpy().copy()

        np.testing.assert_array_equal(run(True), run(False))

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            numerics.AdamW([torch.nn.Parameter(torch.ones(1))], lr=0.0)


class TestFiniteDifferenceGradCheck:
    def test_agrees_on_smooth_analytic_function(self):
        p = torch.linspace(-1.0, 1.5, 10, dtype=torch.float64, requires_grad=True)

        def f():
            return (torch.sin(p) * torch.exp(0.3 * p)).sum()

        assert numerics.finite_difference_grad_check(f, [p]) < 1e-8

    def test_detects_detached_gradient_path(self):
        # f = sum(p * stop_grad(p)): autodiff reports p, true grad is 2p.
        p = torch.full((4,), 0.7, dtype=torch.float64, requires_grad=True)

        def f():
            return (p * p.detach()).sum()

        assert numerics.finite_difference_grad_check(f, [p]) > 0.3

    def test_subset_sampling_bounds_work(self):
        gen = torch.Generator().manual_seed(4)
        p = torch.randn(50, dtype=torch.float64, generator=gen).requires_grad_(True)

        def f():
            return (p ** 2).sum()

        err = numerics.finite_difference_grad_check(
            f, [p], max_entries_per_param=5, generator=torch.Generator().manual_seed(0))
        assert err < 1e-8

    def test_rejects_float32_and_nonscalar(self):
        p32 = torch.ones(3, requires_grad=True)
        with pytest.raises(ValueError):
            numerics.finite_difference_grad_check(lambda: (p32 ** 2).sum(), [p32])
        p = torch.ones(3, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ValueError):
            numerics.finite_difference_grad_check(lambda: p * 2, [p])
