"""Noise schedules and the (masked) forward noising process."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidConfigError, InvalidMaskError, InvalidShapeError
from .numerics import bilinear_resize


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients; ``alpha_bar[0] == 1`` is the data end."""

    T: int
    alpha_bar: np.ndarray  # float64, length T + 1
    beta_start: float = 0.0
    beta_end: float = 0.0

    def __post_init__(self):
        a = self.alpha_bar
        if len(a) != self.T + 1:
            raise InvalidConfigError("alpha_bar must have T + 1 entries")
        if a[0] != 1.0 or not np.all(np.diff(a) < 0) or a[-1] <= 0:
            raise InvalidConfigError("alpha_bar must start at 1, decrease strictly and stay positive")

    def alpha(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise InvalidConfigError(f"step {t} outside 0..{self.T}")
        return float(self.alpha_bar[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1 or not (0 < beta_start <= beta_end < 1):
        raise InvalidConfigError(
            f"need T >= 1 and 0 < beta_start <= beta_end < 1, got T={T}, "
            f"beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, beta_start=beta_start, beta_end=beta_end)


def schedule_with_terminal(alpha_T: float, T: int = 1000, beta_start: float = 1e-4) -> NoiseSchedule:
    """Linear schedule whose ``beta_end`` is solved so that ``alpha_bar[T] == alpha_T``."""
    lo, hi = beta_start, 0.999
    target = math.log(alpha_T)
    f = lambda be: float(np.sum(np.log1p(-np.linspace(beta_start, be, T)))) - target
    if f(lo) < 0:
        raise InvalidConfigError(f"alpha_T={alpha_T} unreachable with beta_start={beta_start}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return make_linear_schedule(T, beta_start, 0.5 * (lo + hi))


# ---------------------------------------------------------------- masks


def check_binary(m: torch.Tensor) -> torch.Tensor:
    if not torch.all((m == 0) | (m == 1)):
        raise InvalidMaskError("mask must be binary (values 0 or 1)")
    return m


def expand_mask(m: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape a spatial mask so it broadcasts against ``like`` (channel axis = 1)."""
    if m.shape[-2:] != like.shape[-2:]:
        raise InvalidMaskError(f"mask extents {tuple(m.shape[-2:])} != latent extents {tuple(like.shape[-2:])}")
    if m.dim() == like.dim():
        return m
    if m.dim() == 2:
        return m.reshape((1,) * (like.dim() - 2) + tuple(m.shape))
    if m.dim() == 3 and like.dim() == 4:
        return m.unsqueeze(1)
    raise InvalidMaskError(f"cannot broadcast mask {tuple(m.shape)} against {tuple(like.shape)}")


def background(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """``(1 - m) * x`` with exact zeros inside the mask."""
    return torch.where(m > 0, torch.zeros((), dtype=x.dtype), x)


def defect(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """``m * x`` with exact zeros outside the mask."""
    return torch.where(m > 0, x, torch.zeros((), dtype=x.dtype))


def resize_mask(m: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Mask at another resolution: bilinear resize then ``>= 0.5``."""
    if m.shape[-2:] == (h, w):
        return m
    return (bilinear_resize(m, h, w) >= 0.5).to(m.dtype)


# ---------------------------------------------------------------- noising


@dataclass
class LatentPair:
    z_t: torch.Tensor
    z_t_m: torch.Tensor
    m: torch.Tensor
    t: int | torch.Tensor

    def check(self) -> None:
        if not torch.equal(background(self.z_t, self.m), self.z_t_m):
            raise InvalidMaskError("(1 - m) * z_t != z_t_m")
        if not torch.all(defect(self.z_t_m, self.m) == 0):
            raise InvalidMaskError("m * z_t_m != 0")


def _coef(s: NoiseSchedule, t, like: torch.Tensor):
    """sqrt(alpha_bar[t]) and sqrt(1 - alpha_bar[t]) as scalars or per-sample columns."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        ab = s.alpha_bar[t.cpu().numpy()]  # float64 until the final cast
        shape = (-1,) + (1,) * (like.dim() - 1)
        sa = torch.from_numpy(np.sqrt(ab)).to(like.dtype).reshape(shape)
        sb = torch.from_numpy(np.sqrt(1.0 - ab)).to(like.dtype).reshape(shape)
        return sa, sb
    a = s.alpha(int(t))
    return math.sqrt(a), math.sqrt(1.0 - a)


def noise(z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise InvalidShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    sa, sb = _coef(s, t, z0)
    return sa * z0 + sb * eps


def masked_noise(z0: torch.Tensor, m: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> LatentPair:
    check_binary(m)
    mm = expand_mask(m, z0)
    z_t = noise(z0, t, eps, s)
    sa, sb = _coef(s, t, z0)
    z_t_m = sa * background(z0, mm) + sb * background(eps, mm)
    return LatentPair(z_t=z_t, z_t_m=z_t_m, m=mm, t=t)
