"""Closed-form zero-loss noise predictor for a single data point, and the
numerical checks of the background-reconstruction, gap-preservation and
terminal-gap identities that hold under it.

For delta-distributed data ``z0`` the optimal predictor is
``eps*(z_t, t) = (z_t - sqrt(a_t) z0) / sqrt(1 - a_t)``. It is undefined at
``t = 0``; inversion loops that evaluate at ``t = 0`` use
:func:`zero_at_origin`, which returns zeros there (the data point itself
carries no noise).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch

from .errors import OutOfDomainError
from .numerics import Rng
from .sampler import (
    EpsFn,
    SamplerConfig,
    composite_step,
    ddim_invert,
    init_star,
    masked_invert_fn,
    reconstruct_masked_fn,
)
from .schedule import NoiseSchedule, background, check_binary, expand_mask, make_linear_schedule, masked_noise, schedule_with_terminal

TERMINAL_ALPHAS = (4e-3, 4e-4, 4e-5)


def delta_oracle_eps(z0_star: torch.Tensor, m: torch.Tensor, s: NoiseSchedule) -> tuple[EpsFn, EpsFn]:
    """(full-branch predictor, background-restricted masked-branch predictor)."""
    check_binary(m)
    mm = expand_mask(m, z0_star)
    z0_bg = background(z0_star, mm)

    def _coefs(t):
        if t <= 0:
            raise OutOfDomainError("oracle predictor is undefined at t = 0")
        a = s.alpha(t)
        return math.sqrt(a), math.sqrt(1.0 - a)

    def full(z, t):
        sa, sb = _coefs(t)
        return (z - sa * z0_star) / sb

    def masked(z, t):
        sa, sb = _coefs(t)
        return background((z - sa * z0_bg) / sb, mm)

    return full, masked


def zero_at_origin(fn: EpsFn) -> EpsFn:
    def wrapped(z, t):
        return torch.zeros_like(z) if t == 0 else fn(z, t)

    return wrapped


def oracle_loss(z0_star, m, t: int, eps, s: NoiseSchedule) -> float:
    """Disentanglement loss of the oracle on its own data point."""
    full, masked = delta_oracle_eps(z0_star, m, s)
    pair = masked_noise(z0_star, m, t, eps, s)
    pred = torch.where(pair.m > 0, full(pair.z_t, t), masked(pair.z_t_m, t))
    return float((eps.double() - pred.double()).pow(2).mean())


# ---------------------------------------------------------------- checks


def verify_lemma1(z0_star: torch.Tensor, m: torch.Tensor, t: int, s: NoiseSchedule, eps: torch.Tensor) -> float:
    """Max-abs error of the one-shot background reconstruction from ``z_t^m``."""
    _, masked = delta_oracle_eps(z0_star, m, s)
    pair = masked_noise(z0_star, m, t, eps, s)
    a = s.alpha(t)
    z0_hat = (pair.z_t_m - math.sqrt(1.0 - a) * masked(pair.z_t_m, t)) / math.sqrt(a)
    diff = background(z0_star, pair.m) - background(z0_hat, pair.m)
    return float(diff.abs().max())


def verify_theorem1(z0_star: torch.Tensor, m: torch.Tensor, cfg: SamplerConfig, rng: Rng) -> float:
    """``max |(z~_T - z~_T^m) - m*eps|`` after paired inversions.

    The full-branch inversion uses the fixed ``eps`` inside the mask and the
    oracle outside it; the masked inversion uses the background oracle.
    """
    mm = expand_mask(m, z0_star)
    eps = rng.normal(z0_star.shape)
    full, masked = delta_oracle_eps(z0_star, m, cfg.schedule)
    full0 = zero_at_origin(full)
    pinned = lambda z, t: torch.where(mm > 0, eps, full0(z, t))
    z_full = ddim_invert(z0_star, pinned, cfg).last
    z_bg = masked_invert_fn(z0_star, m, zero_at_origin(masked), cfg).last
    gap = z_full - z_bg
    target = torch.where(mm > 0, eps, torch.zeros_like(eps))
    return float((gap - target).abs().max())


def verify_prop1(z0_star: torch.Tensor, m: torch.Tensor, cfg: SamplerConfig, rng: Rng) -> float:
    """Max over steps of | ||bg(z_t^m - z~_t^m)||^2 - ||bg(z_t^* - z~_t^m)||^2 |."""
    mm = expand_mask(m, z0_star)
    if torch.all(mm > 0):
        return 0.0  # empty background: both gaps vanish
    full, masked = delta_oracle_eps(z0_star, m, cfg.schedule)
    inv = masked_invert_fn(z0_star, m, zero_at_origin(masked), cfg)
    recon = reconstruct_masked_fn(inv.last, m, masked, cfg)
    z = init_star(inv.last, mm, rng)
    ts = cfg.timesteps
    worst = 0.0
    for k, t in enumerate(ts):
        if k > 0:
            z = composite_step(z, ts[k - 1], t, mm, masked, full, cfg.schedule)
        ref = inv.at(t)
        g_m = background(recon.at(t) - ref, mm).double().pow(2).sum()
        g_s = background(z - ref, mm).double().pow(2).sum()
        worst = max(worst, float((g_m - g_s).abs()))
    return worst


# ---------------------------------------------------------------- suite


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class OracleSuite:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}


def _case(seed: int, size: int = 16, channels: int = 4):
    """A toy latent and a defect mask drawn from the corpus generator."""
    from .dataset import CorpusConfig, defect_mask, texture_pattern

    rng = Rng(seed, (23,))
    cc = CorpusConfig(size=size, channels=channels)
    z0 = torch.from_numpy(texture_pattern(seed % 3, rng.child(0), size, channels)).float()
    m = torch.from_numpy(defect_mask(seed % 3, rng.child(1), cc).astype("float32"))
    return z0, m


def run_suite(s: NoiseSchedule | None = None, steps: int = 50, seeds=range(5), size: int = 16, channels: int = 4) -> OracleSuite:
    s = s or make_linear_schedule()
    cfg = SamplerConfig(s, steps)
    checks = []

    # background reconstruction along the sub-sequence and at the terminal step
    inner, terminal = 0.0, 0.0
    for seed in seeds:
        z0, m = _case(seed, size, channels)
        rng = Rng(seed, (29,))
        for t in cfg.timesteps:
            if t == 0:
                continue
            r = verify_lemma1(z0, m, t, s, rng.child(t).normal(z0.shape))
            if t == s.T:
                terminal = max(terminal, r)
            else:
                inner = max(inner, r)
    checks.append(CheckResult("lemma1", inner, 1e-4, inner < 1e-4))
    checks.append(CheckResult("lemma1_terminal", terminal, 1e-3, terminal < 1e-3))

    worst = 0.0
    for seed in seeds:
        z0, m = _case(seed, size, channels)
        worst = max(worst, verify_prop1(z0, m, cfg, Rng(seed, (31,))))
    checks.append(CheckResult("prop1", worst, 1e-6, worst < 1e-6))

    per_alpha = {}
    for a_T in TERMINAL_ALPHAS:
        cfg_a = SamplerConfig(schedule_with_terminal(a_T, s.T, s.beta_start), steps)
        per_alpha[a_T] = [verify_theorem1(*_case(seed, size, channels), cfg_a, Rng(seed, (37,))) for seed in seeds]
    errs = [per_alpha[a] for a in TERMINAL_ALPHAS]
    decreasing = all(all(x > y for x, y in zip(errs[i], errs[i + 1])) for i in range(len(errs) - 1))
    final = max(errs[-1])
    detail = {f"{a:g}": v for a, v in per_alpha.items()}
    checks.append(CheckResult("theorem1", final, 0.05, final < 0.05, detail))
    checks.append(CheckResult("theorem1_monotone", float(decreasing), 1.0, decreasing, detail))
    return OracleSuite(checks)
