"""Procedural toy benchmark living directly in latent space.

Normal latents are textures (stripes, checkerboard, radial rings) with
per-sample jitter, mixed into the channels by a fixed per-family matrix.
Anomalies composite one of three defect shapes (elliptical blob, thin
scratch, off-texture patch) into the object region of a normal twin.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidConfigError
from .io import save_mask_pgm, save_tensor
from .numerics import Rng

TEXTURES = ("stripes", "checker", "radial")
DEFECTS = ("blob", "scratch", "patch")

# channel mixing per texture family: rows = (pattern, quadrature pattern, fine grain)
_MIX = np.array(
    [
        [[1.0, 0.4, 0.2], [-0.6, 0.9, 0.1], [0.5, -0.5, 0.3], [0.2, 0.2, 0.8]],
        [[0.8, -0.3, 0.3], [0.3, 1.0, 0.1], [-0.7, 0.4, 0.2], [0.4, 0.1, 0.7]],
        [[0.9, 0.5, 0.1], [0.2, -0.8, 0.3], [0.6, 0.6, 0.2], [-0.3, 0.3, 0.8]],
    ]
)


@dataclass(frozen=True)
class CorpusConfig:
    n_normal: int = 64
    n_per_defect: int = 32
    size: int = 16
    channels: int = 4
    border: int = 2
    area_band: tuple[float, float] = (0.02, 0.20)
    defect_strength: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        if self.n_normal < 1 or self.n_per_defect < 1:
            raise InvalidConfigError("corpus counts must be >= 1")
        lo, hi = self.area_band
        if not (0 < lo < hi < 1):
            raise InvalidConfigError("area band must satisfy 0 < lo < hi < 1")


@dataclass
class ToySample:
    id: str
    latent: torch.Tensor
    mask: torch.Tensor
    label: str
    texture: int
    defect: int | None = None
    clean: torch.Tensor | None = field(default=None, repr=False)

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


@dataclass
class FoldSplit:
    fold_a: list[ToySample]
    fold_b: list[ToySample]
    normal_train: list[ToySample]
    normal_test: list[ToySample]

    def direction(self, reverse: bool = False):
        """(train anomalies, test anomalies) for one fold direction."""
        return (self.fold_b, self.fold_a) if reverse else (self.fold_a, self.fold_b)


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def texture_pattern(family: int, rng: Rng, size: int = 16, channels: int = 4) -> np.ndarray:
    y, x = _grid(size)
    u = rng.uniform
    if family == 0:
        theta = u(-0.35, 0.35) + 0.3
        f = u(2.2, 3.0) / size
        ph = u(0, 2 * math.pi)
        arg = 2 * math.pi * f * (x * math.cos(theta) + y * math.sin(theta)) + ph
        p, q = np.sin(arg), np.cos(arg)
    elif family == 1:
        period = u(5.0, 7.0)
        px, py = u(0, 2 * math.pi), u(0, 2 * math.pi)
        sx, sy = np.sin(2 * math.pi * x / period + px), np.sin(2 * math.pi * y / period + py)
        p = np.tanh(3.0 * sx * sy)
        q = 0.5 * (sx + sy)
    elif family == 2:
        cy, cx = size / 2 - 0.5 + u(-2, 2), size / 2 - 0.5 + u(-2, 2)
        r = np.hypot(y - cy, x - cx)
        ring = u(5.0, 8.0)
        ph = u(0, 2 * math.pi)
        p = np.cos(2 * math.pi * r / ring + ph)
        q = np.clip(1.0 - r / size, 0, 1) * 1.5 - 0.5
    else:
        raise InvalidConfigError(f"unknown texture family {family}")
    grain = rng.generator.standard_normal((size, size)) * 0.15
    basis = np.stack([p, q, grain])  # (3, H, W)
    mix = _MIX[family][:channels]
    lat = np.einsum("ck,khw->chw", mix, basis)
    lat += rng.generator.standard_normal((channels, 1, 1)) * 0.1  # per-sample offset jitter
    return lat


def _ellipse(rng: Rng, size, border):
    y, x = _grid(size)
    cy, cx = rng.uniform(border + 2, size - border - 3), rng.uniform(border + 2, size - border - 3)
    a, b = rng.uniform(1.5, 3.5), rng.uniform(1.2, 2.8)
    th = rng.uniform(0, math.pi)
    dy, dx = y - cy, x - cx
    u = dx * math.cos(th) + dy * math.sin(th)
    v = -dx * math.sin(th) + dy * math.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _scratch(rng: Rng, size, border):
    y, x = _grid(size)
    th = rng.uniform(0, math.pi)
    length = rng.uniform(6, 11)
    cy, cx = rng.uniform(border + 3, size - border - 4), rng.uniform(border + 3, size - border - 4)
    d = np.array([math.sin(th), math.cos(th)])
    rel = np.stack([y - cy, x - cx])
    along = rel[0] * d[0] + rel[1] * d[1]
    across = -rel[0] * d[1] + rel[1] * d[0]
    return (np.abs(across) <= 0.6) & (np.abs(along) <= length / 2)


def _patch(rng: Rng, size, border):
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    y0 = int(rng.integers(border, size - border - h + 1))
    x0 = int(rng.integers(border, size - border - w + 1))
    m = np.zeros((size, size), dtype=bool)
    m[y0 : y0 + h, x0 : x0 + w] = True
    return m


def defect_mask(kind: int, rng: Rng, cfg: CorpusConfig) -> np.ndarray:
    shape_fn = (_ellipse, _scratch, _patch)[kind]
    lo, hi = cfg.area_band
    inner = np.zeros((cfg.size, cfg.size), dtype=bool)
    b = cfg.border
    inner[b : cfg.size - b, b : cfg.size - b] = True
    for _ in range(1000):
        m = shape_fn(rng, cfg.size, cfg.border) & inner
        frac = m.mean()
        if lo <= frac <= hi:
            return m
    raise RuntimeError("could not draw a mask inside the area band")


def defect_content(kind: int, normal: np.ndarray, mask: np.ndarray, texture: int, rng: Rng, cfg: CorpusConfig) -> np.ndarray:
    """Defect latent values on the whole grid (only the masked part is used)."""
    c = normal.shape[0]
    strength = rng.uniform(*cfg.defect_strength)
    direction = rng.generator.standard_normal(c)
    direction /= np.linalg.norm(direction)
    if kind == 0:
        y, x = _grid(cfg.size)
        ys, xs = np.nonzero(mask)
        r = np.hypot(y - ys.mean(), x - xs.mean())
        prof = 0.6 + 0.4 * np.exp(-(r**2) / 4.0)
        out = normal + strength * direction[:, None, None] * prof
    elif kind == 1:
        out = normal + 1.4 * strength * direction[:, None, None]
    else:
        other = (texture + 1 + int(rng.integers(0, len(TEXTURES) - 1))) % len(TEXTURES)
        alien = texture_pattern(other, rng, cfg.size, c)
        out = alien * 1.2 + 0.4 * strength * direction[:, None, None]
    # every masked pixel must move
    same = np.all(np.isclose(out, normal, atol=1e-3), axis=0) & mask
    if same.any():
        out[:, same] += 0.5 * direction[:, None]
    return out


def generate_corpus(seed: int, cfg: CorpusConfig = CorpusConfig()) -> list[ToySample]:
    root = Rng(seed, (11,))
    samples: list[ToySample] = []
    zero = torch.zeros(cfg.size, cfg.size)
    for i in range(cfg.n_normal):
        rng = root.child(0, i)
        tex = i % len(TEXTURES)
        lat = texture_pattern(tex, rng, cfg.size, cfg.channels)
        samples.append(ToySample(f"n{i:04d}", torch.from_numpy(lat).float(), zero.clone(), "normal", tex))
    for k in range(len(DEFECTS)):
        for i in range(cfg.n_per_defect):
            rng = root.child(1 + k, i)
            tex = int(rng.integers(0, len(TEXTURES)))
            clean = texture_pattern(tex, rng, cfg.size, cfg.channels)
            mask = defect_mask(k, rng, cfg)
            content = defect_content(k, clean, mask, tex, rng, cfg)
            lat = np.where(mask[None], content, clean)
            samples.append(
                ToySample(
                    f"d{k}_{i:04d}",
                    torch.from_numpy(lat).float(),
                    torch.from_numpy(mask.astype(np.float32)),
                    "anomalous",
                    tex,
                    k,
                    torch.from_numpy(clean).float(),
                )
            )
    return samples


def split_folds(anomalies: list[ToySample], normals: list[ToySample], seed: int = 0) -> FoldSplit:
    """Per defect class, the first half (by id) goes to fold A and the rest to fold B.

    Normals are shuffled with ``seed`` and halved into train/test.
    """
    fold_a, fold_b = [], []
    classes = sorted({s.defect for s in anomalies})
    for k in classes:
        group = sorted((s for s in anomalies if s.defect == k), key=lambda s: s.id)
        half = (len(group) + 1) // 2 if len(fold_a) <= len(fold_b) else len(group) // 2
        fold_a += group[:half]
        fold_b += group[half:]
    order = Rng(seed, (13,)).permutation(len(normals))
    shuffled = [normals[i] for i in order]
    h = len(shuffled) // 2
    return FoldSplit(fold_a, fold_b, shuffled[:h], shuffled[h:])


def save_corpus(directory, samples: list[ToySample], split: FoldSplit | None = None, extra: dict | None = None) -> Path:
    d = Path(directory)
    assign = {}
    if split is not None:
        for name in ("fold_a", "fold_b", "normal_train", "normal_test"):
            for s in getattr(split, name):
                assign[s.id] = name
    entries = []
    for s in samples:
        save_tensor(d / "samples" / f"{s.id}.mdlt", s.latent)
        save_mask_pgm(d / "masks" / f"{s.id}.pgm", s.mask)
        entries.append(
            {
                "id": s.id,
                "label": s.label,
                "texture": TEXTURES[s.texture],
                "texture_id": s.texture,
                "defect": None if s.defect is None else DEFECTS[s.defect],
                "defect_id": s.defect,
                "split": assign.get(s.id),
            }
        )
    manifest = {"samples": entries}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_corpus(directory) -> tuple[list[ToySample], FoldSplit | None]:
    from .io import load_mask_pgm, load_tensor

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    samples, groups = [], {"fold_a": [], "fold_b": [], "normal_train": [], "normal_test": []}
    for e in manifest["samples"]:
        s = ToySample(
            e["id"],
            load_tensor(d / "samples" / f"{e['id']}.mdlt"),
            load_mask_pgm(d / "masks" / f"{e['id']}.pgm"),
            e["label"],
            e["texture_id"],
            e["defect_id"],
        )
        samples.append(s)
        if e.get("split") in groups:
            groups[e["split"]].append(s)
    split = FoldSplit(**groups) if any(groups.values()) else None
    return samples, split
