"""Tensor substrate: seeded sampling, bilinear resizing, gradient checks.

Tensors are plain ``torch.Tensor`` values (float32 unless a caller opts into
float64 for verification). Reverse-mode gradients come from ``torch.autograd``.

Bilinear resize convention (corner-aligned): for an input of extent ``n`` and
an output of extent ``k > 1``, output index ``i`` samples the source coordinate

    s(i) = i * (n - 1) / (k - 1)

and for ``k == 1`` the single output samples ``s = 0``. The value at ``s`` is
``x[floor(s)] + (s - floor(s)) * (x[floor(s) + 1] - x[floor(s)])`` (clamped at
the last index), applied along height first and then width. So both corner
pixels of the output coincide with the input corners.
"""
from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import InvalidShapeError, PropagationError

DTYPE = torch.float32


def configure_threads() -> int:
    """Apply the ``MDL_THREADS`` cap to torch intra-op parallelism."""
    n = int(os.environ.get("MDL_THREADS", os.cpu_count() or 1))
    n = max(1, n)
    torch.set_num_threads(n)
    return n


def _check_extents(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or len(shape) > 4:
        raise InvalidShapeError(f"rank must be 1..4, got {shape}")
    if any(s <= 0 for s in shape):
        raise InvalidShapeError(f"extents must be positive, got {shape}")
    return shape


class Rng:
    """Counter-based normal sampler (Philox) with deterministic splitting.

    ``Rng(seed, key)`` streams are fully determined by the seed and the spawn
    key path, so child streams can be handed to parallel workers.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def normal(self, shape: Sequence[int]) -> torch.Tensor:
        return sample_normal(self, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def sample_normal(rng: Rng, shape: Sequence[int]) -> torch.Tensor:
    shape = _check_extents(shape)
    x = rng.generator.standard_normal(size=shape, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(x))


def _lerp_axis(x: torch.Tensor, out: int, axis: int) -> torch.Tensor:
    n = x.shape[axis]
    if out == n:
        return x
    if out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(out, dtype=np.float64) * (n - 1) / (out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = torch.tensor(pos - lo, dtype=x.dtype)
    a = x.index_select(axis, torch.from_numpy(lo))
    b = x.index_select(axis, torch.from_numpy(hi))
    shape = [1] * x.dim()
    shape[axis] = out
    return torch.lerp(a, b, w.reshape(shape))


def bilinear_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Corner-aligned bilinear resize over the last two axes (see module doc)."""
    if out_h <= 0 or out_w <= 0:
        raise InvalidShapeError(f"target extents must be positive, got {(out_h, out_w)}")
    if x.dim() < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise InvalidShapeError(f"need an (..., H, W) input, got {tuple(x.shape)}")
    y = _lerp_axis(x, out_h, x.dim() - 2)
    return _lerp_axis(y, out_w, x.dim() - 1)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    eps: float = 1e-3,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``coords`` restricts the comparison to a subset of flat indices; by
    default every coordinate is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = params.detach().clone().requires_grad_(True)
    val = f(p)
    if not torch.isfinite(val).all():
        raise PropagationError("f returned a non-finite value")
    (grad,) = torch.autograd.grad(val, p, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(p)
    analytic = grad.reshape(-1)
    flat = p.detach().reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            probe = flat.clone()
            probe[i] = orig + eps
            fp = f(probe.reshape(p.shape)).item()
            probe[i] = orig - eps
            fm = f(probe.reshape(p.shape)).item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise PropagationError(f"f non-finite near coordinate {i}")
            num = (fp - fm) / (2 * eps)
            a = analytic[i].item()
            rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, rel)
    return worst
