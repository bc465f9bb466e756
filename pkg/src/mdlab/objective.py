"""Disentanglement objective and the generator training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .denoiser import Denoiser, combined_eps, forward_full, forward_masked
from .errors import ContractViolationError, DivergedTrainingError, InvalidConfigError, InvalidMaskError
from .numerics import Rng
from .schedule import LatentPair, NoiseSchedule, check_binary, masked_noise


@dataclass
class TrainConfig:
    lr: float = 1e-3
    iters: int = 500
    batch: int = 8
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    fixed_t: int | None = None
    lr_decay: str = "cosine"  # "cosine" or "constant"
    fit_prior: bool = True  # refresh the closed-form baseline from the data first

    def __post_init__(self):
        if self.lr <= 0 or self.iters < 1 or self.batch < 1:
            raise InvalidConfigError("need lr > 0, iters >= 1, batch >= 1")
        if self.lr_decay not in ("cosine", "constant"):
            raise InvalidConfigError(f"unknown lr_decay {self.lr_decay!r}")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["iteration,loss"] + [f"{i},{v:.9g}" for i, v in enumerate(self.losses)]
        return "\n".join(rows) + "\n"


def _check_pair(pair: LatentPair) -> None:
    try:
        pair.check()
    except InvalidMaskError as exc:
        raise ContractViolationError(str(exc)) from exc


def loss_terms(pair: LatentPair, eps: torch.Tensor, model: Denoiser, ctx=None) -> tuple[torch.Tensor, torch.Tensor]:
    """(matching, regularizer), both normalised by the element count."""
    _check_pair(pair)
    full, _ = forward_full(pair.z_t, pair.t, model, pair.m, ctx)
    masked = forward_masked(pair.z_t_m, pair.t, model, pair.m, ctx)
    n = eps.numel()
    zero = torch.zeros((), dtype=eps.dtype)
    matching = torch.where(pair.m > 0, eps - full, zero).pow(2).sum() / n
    regularizer = torch.where(pair.m > 0, zero, eps - masked).pow(2).sum() / n
    return matching, regularizer


def disentanglement_loss(pair: LatentPair, eps: torch.Tensor, model: Denoiser, ctx=None) -> torch.Tensor:
    _check_pair(pair)
    return (eps - combined_eps(pair, model, ctx)).pow(2).mean()


def _stack(dataset, idx):
    z0 = torch.stack([dataset[i][0] for i in idx])
    m = torch.stack([dataset[i][1] for i in idx])
    if m.dim() == 3:
        m = m[:, None]
    return z0, m


def train(
    dataset: Sequence[tuple[torch.Tensor, torch.Tensor]],
    cfg: TrainConfig,
    model: Denoiser,
    schedule: NoiseSchedule,
    ctx=None,
    log_every: int = 0,
) -> TrainResult:
    """Fit ``model`` (weights and contexts) on ``(z0, m)`` pairs with Adam."""
    if len(dataset) == 0:
        raise InvalidConfigError("dataset is empty")
    for _, m in dataset:
        check_binary(m)
    if cfg.fit_prior:
        model.fit_prior(torch.stack([z for z, _ in dataset]))
    rng = Rng(cfg.seed, (7,))
    params = list(model.parameters())
    if ctx is not None and ctx is not model.contexts:
        params += list(ctx.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
    sched = None
    if cfg.lr_decay == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iters)
    result = TrainResult()
    n = len(dataset)
    for it in range(cfg.iters):
        idx = rng.integers(0, n, size=cfg.batch)
        z0, m = _stack(dataset, idx)
        if cfg.fixed_t is not None:
            t = torch.full((cfg.batch,), cfg.fixed_t, dtype=torch.long)
        else:
            t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=cfg.batch)).long()
        eps = rng.normal(z0.shape)
        pair = masked_noise(z0, m, t, eps, schedule)
        loss = disentanglement_loss(pair, eps, model, ctx)
        val = loss.item()
        if not math.isfinite(val):
            raise DivergedTrainingError(it, val)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        result.losses.append(val)
        if log_every and it % log_every == 0:
            print(f"iter {it:5d} loss {val:.5f}")
    return result
