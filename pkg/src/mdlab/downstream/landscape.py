"""Two-direction loss landscape around trained segmenter weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.func import functional_call

from ..numerics import Rng
from .segmenter import SegModel, _pairs, focal_loss


@dataclass
class Landscape:
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray  # values[i, j] = g(alphas[i], betas[j])

    def center(self) -> float:
        i = int(np.argmin(np.abs(self.alphas)))
        j = int(np.argmin(np.abs(self.betas)))
        return float(self.values[i, j])

    def flatness(self) -> float:
        """Mean absolute deviation from the centre value over the grid."""
        return float(np.mean(np.abs(self.values - self.center())))

    def to_csv(self) -> str:
        rows = ["alpha,beta,g"]
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                rows.append(f"{a:.6g},{b:.6g},{self.values[i, j]:.9g}")
        return "\n".join(rows) + "\n"


def filter_normalized_direction(model: torch.nn.Module, rng: Rng) -> dict[str, torch.Tensor]:
    """Gaussian direction rescaled so each filter matches the weight filter's norm.

    Filters are slices along the first axis; 1-D parameters count as one filter.
    """
    out = {}
    for k, (name, p) in enumerate(model.named_parameters()):
        d = rng.child(k).normal(p.shape).to(p.dtype)
        if p.dim() <= 1:
            dn = d.norm()
            out[name] = d * (p.detach().norm() / dn) if dn > 0 else d
        else:
            pf = p.detach().reshape(p.shape[0], -1).norm(dim=1)
            df = d.reshape(d.shape[0], -1).norm(dim=1)
            scale = torch.where(df > 0, pf / df, torch.zeros_like(df))
            out[name] = d * scale.reshape((-1,) + (1,) * (p.dim() - 1))
    return out


@torch.no_grad()
def landscape_from_directions(model: SegModel, samples, d1, d2, alphas, betas, gamma=2.0, alpha_bal=0.75) -> Landscape:
    data = _pairs(samples)
    x = torch.stack([d[0] for d in data])
    y = torch.stack([(d[1] > 0.5).float() for d in data])
    base = {n: p.detach() for n, p in model.named_parameters()}
    buffers = dict(model.named_buffers())
    model.eval()
    vals = np.zeros((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            params = {n: base[n] + float(a) * d1[n] + float(b) * d2[n] for n in base}
            pred = functional_call(model, (params, buffers), (x,))
            vals[i, j] = focal_loss(pred, y, gamma, alpha_bal).item()
    model.train()
    return Landscape(np.asarray(alphas, dtype=float), np.asarray(betas, dtype=float), vals)


def loss_landscape(model: SegModel, samples, span: float = 1.0, resolution: int = 21, seed: int = 0, gamma=2.0, alpha_bal=0.75) -> Landscape:
    rng = Rng(seed, (19,))
    d1 = filter_normalized_direction(model, rng.child(1))
    d2 = filter_normalized_direction(model, rng.child(2))
    grid = np.linspace(-span, span, resolution)
    return landscape_from_directions(model, samples, d1, d2, grid, grid, gamma, alpha_bal)
