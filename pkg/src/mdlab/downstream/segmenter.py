"""Small U-Net segmenter trained with focal loss on latents."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import DivergedTrainingError, InvalidConfigError, InvalidShapeError
from ..numerics import Rng
from .metrics import MetricsReport, metrics_report

CLAMP = 1e-7


def focal_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha_bal: float = 0.75) -> torch.Tensor:
    """Mean of ``-a_t (1 - p_t)^gamma log p_t`` with ``a_t = alpha_bal`` on positives."""
    if pred.shape != target.shape:
        raise InvalidShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(CLAMP, 1 - CLAMP)
    pos = target > 0.5
    p_t = torch.where(pos, p, 1 - p)
    a_t = torch.where(pos, torch.full_like(p, alpha_bal), torch.full_like(p, 1 - alpha_bal))
    return (-a_t * (1 - p_t).pow(gamma) * torch.log(p_t)).mean()


def _conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(4, cout),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(4, cout),
        nn.SiLU(),
    )


class SegModel(nn.Module):
    """Three-level encoder/decoder with skip connections; sigmoid score map."""

    def __init__(self, channels: int = 4, widths=(16, 32, 64)):
        super().__init__()
        self.channels, self.widths = channels, tuple(widths)
        w1, w2, w3 = widths
        self.e1 = _conv(channels, w1)
        self.e2 = _conv(w1, w2)
        self.e3 = _conv(w2, w3)
        self.d2 = _conv(w3 + w2, w2)
        self.d1 = _conv(w2 + w1, w1)
        self.head = nn.Conv2d(w1, 1, 1)

    def forward(self, x):
        h1 = self.e1(x)
        h2 = self.e2(F.max_pool2d(h1, 2))
        h3 = self.e3(F.max_pool2d(h2, 2))
        u2 = self.d2(torch.cat([F.interpolate(h3, scale_factor=2, mode="nearest"), h2], 1))
        u1 = self.d1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], 1))
        return torch.sigmoid(self.head(u1))[:, 0]


@dataclass
class SegConfig:
    epochs: int = 200
    batch: int = 32
    lr: float = 1e-3
    gamma: float = 2.0
    alpha_bal: float = 0.75
    seed: int = 0
    widths: tuple[int, int, int] = (16, 32, 64)

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.lr <= 0:
            raise InvalidConfigError("need epochs >= 1, batch >= 1, lr > 0")


@dataclass
class SegTrainResult:
    model: SegModel
    losses: list[float] = field(default_factory=list)  # per epoch


def _pairs(samples):
    """Accept ToySample-like objects or (latent, mask) tuples."""
    out = []
    for s in samples:
        if isinstance(s, tuple):
            out.append(s)
        else:
            out.append((s.latent, s.mask))
    return out


def train_segmenter(real_normals, real_anoms, synthetic, cfg: SegConfig = SegConfig()) -> SegTrainResult:
    data = _pairs(real_normals) + _pairs(real_anoms) + _pairs(synthetic)
    if not data:
        raise InvalidConfigError("no training samples")
    x = torch.stack([d[0] for d in data])
    y = torch.stack([(d[1] > 0.5).float() for d in data])
    torch.manual_seed(cfg.seed)
    model = SegModel(x.shape[1], cfg.widths)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = Rng(cfg.seed, (17,))
    result = SegTrainResult(model)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for k in range(0, n, cfg.batch):
            idx = order[k : k + cfg.batch]
            loss = focal_loss(model(x[idx]), y[idx], cfg.gamma, cfg.alpha_bal)
            val = loss.item()
            if not math.isfinite(val):
                raise DivergedTrainingError(epoch, val)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += val * idx.numel()
        result.losses.append(total / n)
    return result


@torch.no_grad()
def predict(model: SegModel, latents: torch.Tensor, batch: int = 256) -> torch.Tensor:
    model.eval()
    out = torch.cat([model(latents[k : k + batch]) for k in range(0, latents.shape[0], batch)])
    model.train()
    return out


def evaluate(model: SegModel, test_samples) -> MetricsReport:
    data = _pairs(test_samples)
    x = torch.stack([d[0] for d in data])
    gt = np.stack([(d[1] > 0.5).numpy() for d in data])
    return metrics_report(predict(model, x).numpy(), gt)


def save_segmenter(directory, model: SegModel, extra: dict | None = None):
    from ..io import save_state

    meta = {"kind": "segmenter", "channels": model.channels, "widths": list(model.widths), **(extra or {})}
    return save_state(directory, model.state_dict(), meta)


def load_segmenter(directory) -> tuple[SegModel, dict]:
    from ..io import load_state

    state, meta = load_state(directory)
    model = SegModel(meta["channels"], tuple(meta["widths"]))
    model.load_state_dict(state)
    return model, meta
