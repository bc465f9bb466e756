"""Label-mask refinement from captured defect cross-attention."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .denoiser import AttentionRecord
from .errors import MissingAttentionError
from .numerics import bilinear_resize


@dataclass
class RefinedMask:
    m_star: torch.Tensor  # binary, target resolution
    attention: torch.Tensor  # resized mean attention the threshold was applied to
    threshold: float = 0.5


def attention_summary(records: list[AttentionRecord]) -> torch.Tensor:
    """Mean over records and top-resolution layers of ``m' * max_token(M_def)``.

    Returns a (B, 1, h, w) map at the highest captured resolution.
    """
    if not records:
        raise MissingAttentionError("no cross-attention records were captured")
    acc, count = None, 0
    for rec in records:
        if not rec.maps:
            continue
        top = max(h * w for h, w in rec.resolutions)
        for a, (h, w), m in zip(rec.maps, rec.resolutions, rec.masks):
            if h * w != top:
                continue
            b = a.shape[0]
            score = a.max(dim=-1).values.reshape(b, 1, h, w)
            score = score * m.reshape(b, 1, h, w)
            acc = score if acc is None else acc + score
            count += 1
    if acc is None:
        raise MissingAttentionError("records hold no attention maps")
    return acc / count


def threshold_map(att: torch.Tensor, target_res: tuple[int, int], threshold: float = 0.5) -> RefinedMask:
    up = bilinear_resize(att, *target_res)
    return RefinedMask((up >= threshold).to(torch.float32), up, threshold)


def refine_mask(records: list[AttentionRecord], target_res: tuple[int, int], threshold: float = 0.5) -> RefinedMask:
    return threshold_map(attention_summary(records), target_res, threshold)
