"""Deterministic DDIM sampling/inversion, masked inversion of normal latents,
star initialisation and composite defect synthesis.

All loops take plain noise-prediction callables ``eps_fn(z, t) -> tensor`` so
the same code runs with a trained network or with the closed-form oracle.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .denoiser import AttentionRecord, Denoiser, forward_full, forward_masked
from .errors import ContractViolationError, DegenerateMaskError, InvalidConfigError, PropagationError
from .io import save_tensor
from .numerics import Rng
from .schedule import NoiseSchedule, background, check_binary, defect, expand_mask

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule
    steps: int = 50

    def __post_init__(self):
        if not (1 <= self.steps <= self.schedule.T):
            raise InvalidConfigError(f"steps must lie in 1..{self.schedule.T}")

    @property
    def timesteps(self) -> list[int]:
        """Strictly decreasing sub-sequence from T to 0 with uniform stride."""
        ts = np.rint(np.linspace(self.schedule.T, 0, self.steps + 1)).astype(int)
        return [int(t) for t in ts]

    def digest(self) -> str:
        blob = json.dumps({"schedule": self.schedule.to_dict(), "steps": self.steps}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrajectoryRecord:
    branch: str
    steps: list[tuple[int, torch.Tensor]] = field(default_factory=list)
    attention: list[AttentionRecord] = field(default_factory=list)

    def at(self, t: int) -> torch.Tensor:
        for s, z in self.steps:
            if s == t:
                return z
        raise KeyError(t)

    @property
    def last(self) -> torch.Tensor:
        return self.steps[-1][1]

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, (t, z) in enumerate(self.steps):
            save_tensor(d / f"{k:03d}_t{t:04d}.mdlt", z)
        (d / "index.json").write_text(
            json.dumps({"branch": self.branch, "steps": [t for t, _ in self.steps]}, indent=2) + "\n"
        )
        return d


def _checked(eps: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(eps).all():
        raise PropagationError("noise prediction is not finite")
    return eps


def transfer(z: torch.Tensor, a_from: float, a_to: float, eps: torch.Tensor) -> torch.Tensor:
    """Deterministic DDIM move between two noise levels (either direction)."""
    c = math.sqrt(1.0 / a_to - 1.0) - math.sqrt(1.0 / a_from - 1.0)
    return math.sqrt(a_to) * (z / math.sqrt(a_from) + c * eps)


def ddim_step(z_t: torch.Tensor, t_hi: int, t_lo: int, eps_fn: EpsFn, s: NoiseSchedule) -> torch.Tensor:
    if not t_hi > t_lo:
        raise InvalidConfigError(f"ddim_step needs t_hi > t_lo, got {t_hi}, {t_lo}")
    eps = _checked(eps_fn(z_t, t_hi))
    return transfer(z_t, s.alpha(t_hi), s.alpha(t_lo), eps)


def ddim_invert_step(z_lo: torch.Tensor, t_lo: int, t_hi: int, eps_fn: EpsFn, s: NoiseSchedule) -> torch.Tensor:
    """Inverse move; the prediction is taken at the lower step ``(z_lo, t_lo)``."""
    if not t_hi > t_lo:
        raise InvalidConfigError(f"ddim_invert_step needs t_hi > t_lo, got {t_hi}, {t_lo}")
    eps = _checked(eps_fn(z_lo, t_lo))
    return transfer(z_lo, s.alpha(t_lo), s.alpha(t_hi), eps)


def ddim_sample(z_T: torch.Tensor, eps_fn: EpsFn, cfg: SamplerConfig, branch: str = "reconstruction") -> TrajectoryRecord:
    ts = cfg.timesteps
    rec = TrajectoryRecord(branch, [(ts[0], z_T)])
    z = z_T
    for hi, lo in zip(ts[:-1], ts[1:]):
        z = ddim_step(z, hi, lo, eps_fn, cfg.schedule)
        rec.steps.append((lo, z))
    return rec


def ddim_invert(z_0: torch.Tensor, eps_fn: EpsFn, cfg: SamplerConfig) -> TrajectoryRecord:
    ts = cfg.timesteps[::-1]
    rec = TrajectoryRecord("inversion", [(ts[0], z_0)])
    z = z_0
    for lo, hi in zip(ts[:-1], ts[1:]):
        z = ddim_invert_step(z, lo, hi, eps_fn, cfg.schedule)
        rec.steps.append((hi, z))
    return rec


# ---------------------------------------------------------------- masked paths


def masked_invert_fn(z0_normal: torch.Tensor, m: torch.Tensor, eps_bg: EpsFn, cfg: SamplerConfig) -> TrajectoryRecord:
    """Invert ``(1 - m) * z0_normal`` with background-only noise predictions."""
    check_binary(m)
    mm = expand_mask(m, z0_normal)
    if torch.all(mm > 0):
        raise DegenerateMaskError("mask covers every position; no background to invert")
    masked = lambda z, t: background(eps_bg(z, t), mm)
    return _relabel(ddim_invert(background(z0_normal, mm), masked, cfg), "inversion")


def _relabel(rec: TrajectoryRecord, branch: str) -> TrajectoryRecord:
    rec.branch = branch
    return rec


def init_star(z_T_m: torch.Tensor, m: torch.Tensor, rng: Rng) -> torch.Tensor:
    """Fresh standard-normal noise inside the mask, inverted background outside."""
    mm = expand_mask(m, z_T_m)
    if torch.any(defect(z_T_m, mm) != 0):
        raise ContractViolationError("z_T^m is nonzero inside the mask")
    return z_T_m + defect(rng.normal(z_T_m.shape), mm)


def composite_step(z_star, t_hi, t_lo, m, eps_bg: EpsFn, eps_def: EpsFn, s: NoiseSchedule):
    """One defect-synthesis step: background noise from the masked branch at
    ``(1 - m) * z*``, defect noise from the full branch at ``z*``."""
    z_m = background(z_star, m)
    e_bg = _checked(eps_bg(z_m, t_hi))
    e_def = _checked(eps_def(z_star, t_hi))
    return transfer(z_star, s.alpha(t_hi), s.alpha(t_lo), torch.where(m > 0, e_def, e_bg))


def synthesize_fn(z0_normal, m, eps_bg: EpsFn, eps_def: EpsFn, cfg: SamplerConfig, rng: Rng):
    """Returns ``(z0_star, inversion_record, synthesis_record)``."""
    mm = expand_mask(m, z0_normal)
    inv = masked_invert_fn(z0_normal, m, eps_bg, cfg)
    z = init_star(inv.last, mm, rng)
    ts = cfg.timesteps
    rec = TrajectoryRecord("synthesis", [(ts[0], z)])
    for hi, lo in zip(ts[:-1], ts[1:]):
        z = composite_step(z, hi, lo, mm, eps_bg, eps_def, cfg.schedule)
        rec.steps.append((lo, z))
    return z, inv, rec


def reconstruct_masked_fn(z_T_m, m, eps_bg: EpsFn, cfg: SamplerConfig) -> TrajectoryRecord:
    """Denoise a masked latent with the masked branch only (the ``z_t^m`` path)."""
    mm = expand_mask(m, z_T_m)
    masked = lambda z, t: background(eps_bg(z, t), mm)
    return ddim_sample(z_T_m, masked, cfg, "reconstruction")


# ---------------------------------------------------------------- network-bound


class NetworkEps:
    """Noise-prediction callables bound to a trained denoiser and a mask.

    When ``capture_from`` is set, full-branch calls at ``t <= capture_from``
    store their cross-attention record.
    """

    def __init__(self, model: Denoiser, m: torch.Tensor, ctx=None, capture_from: int | None = None):
        self.model = model
        self.m = m
        self.ctx = ctx
        self.capture_from = capture_from
        self.records: list[AttentionRecord] = []

    def masked(self, z, t):
        return forward_masked(z, t, self.model, self.m, self.ctx)

    def full(self, z, t):
        capture = self.capture_from is not None and t <= self.capture_from
        eps, rec = forward_full(z, t, self.model, self.m, self.ctx, capture=capture)
        if rec is not None:
            rec.t = t
            self.records.append(rec)
        return eps


def _spatial(m: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    mm = expand_mask(m, z)
    return mm if mm.dim() == 4 else mm[None]


@dataclass
class SynthesisResult:
    z0_star: torch.Tensor
    inversion: TrajectoryRecord
    trajectory: TrajectoryRecord
    attention: list[AttentionRecord]


def _batched(z):
    return (z[None], True) if z.dim() == 3 else (z, False)


@torch.no_grad()
def masked_invert(z0_normal, m, model: Denoiser, cfg: SamplerConfig, ctx=None) -> TrajectoryRecord:
    z, squeeze = _batched(z0_normal)
    mm = _spatial(m, z)
    fns = NetworkEps(model, mm, ctx)
    rec = masked_invert_fn(z, mm, fns.masked, cfg)
    if squeeze:
        rec.steps = [(t, x[0]) for t, x in rec.steps]
    return rec


def capture_threshold(cfg: SamplerConfig, frac: float = 0.25) -> int:
    """Largest step of the final ``frac`` share of denoising steps."""
    ts = cfg.timesteps[:-1]  # steps where the network is evaluated
    k = max(1, int(math.ceil(frac * len(ts))))
    return ts[-k]


@torch.no_grad()
def synthesize(z0_normal, m, model: Denoiser, cfg: SamplerConfig, rng: Rng, ctx=None, capture_frac: float = 0.25) -> SynthesisResult:
    z, squeeze = _batched(z0_normal)
    mm = _spatial(m, z)
    fns = NetworkEps(model, mm, ctx, capture_from=capture_threshold(cfg, capture_frac))
    z0s, inv, rec = synthesize_fn(z, mm, fns.masked, fns.full, cfg, rng)
    if squeeze:
        z0s = z0s[0]
        for r in (inv, rec):
            r.steps = [(t, x[0]) for t, x in r.steps]
    rec.attention = fns.records
    return SynthesisResult(z0s, inv, rec, fns.records)


@torch.no_grad()
def reconstruct(z_T_m, m, model: Denoiser, cfg: SamplerConfig, ctx=None) -> TrajectoryRecord:
    z, squeeze = _batched(z_T_m)
    mm = _spatial(m, z)
    fns = NetworkEps(model, mm, ctx)
    rec = reconstruct_masked_fn(z, mm, fns.masked, cfg)
    if squeeze:
        rec.steps = [(t, x[0]) for t, x in rec.steps]
    return rec
