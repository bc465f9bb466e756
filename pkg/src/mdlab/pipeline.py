"""End-to-end steps shared by the CLI and the augmentation benchmark:
per-class generator training, batched synthesis with mask refinement,
and the two-fold with/without-synthetic comparison."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .config import RunConfig
from .dataset import DEFECTS, CorpusConfig, FoldSplit, ToySample, defect_mask, generate_corpus, split_folds
from .denoiser import Denoiser, DenoiserConfig
from .downstream import SegConfig, evaluate, loss_landscape, train_segmenter
from .maskops import refine_mask
from .numerics import Rng
from .objective import TrainConfig, TrainResult, train
from .sampler import SamplerConfig, synthesize
from .schedule import make_linear_schedule


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        channels=cfg.dataset.channels,
        size=cfg.dataset.size,
        widths=tuple(cfg.model.widths),
        d_c=cfg.model.d_c,
        tokens=cfg.model.tokens,
        T=cfg.schedule.T,
        beta_start=cfg.schedule.beta_start,
        beta_end=cfg.schedule.beta_end,
        temb_dim=cfg.model.temb_dim,
    )


def corpus_config(cfg: RunConfig) -> CorpusConfig:
    d = cfg.dataset
    return CorpusConfig(n_normal=d.n_normal, n_per_defect=d.n_per_defect, size=d.size, channels=d.channels)


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.schedule
    return SamplerConfig(make_linear_schedule(s.T, s.beta_start, s.beta_end), cfg.sampler.steps)


def seg_config(cfg: RunConfig, seed: int | None = None) -> SegConfig:
    d = cfg.downstream
    return SegConfig(epochs=d.epochs, batch=d.batch, lr=d.lr, gamma=d.gamma, alpha_bal=d.alpha_bal, seed=d.seed if seed is None else seed)


def build_corpus(cfg: RunConfig) -> tuple[list[ToySample], FoldSplit]:
    samples = generate_corpus(cfg.dataset.seed, corpus_config(cfg))
    normals = [s for s in samples if not s.is_anomalous]
    anomalies = [s for s in samples if s.is_anomalous]
    return samples, split_folds(anomalies, normals, cfg.dataset.seed)


def train_generator(anomalies: list[ToySample], cfg: RunConfig, seed: int) -> tuple[Denoiser, TrainResult]:
    if not anomalies:
        raise ValueError("no anomalies to train the generator on")
    model = Denoiser(denoiser_config(cfg), seed=seed)
    t = cfg.train
    data = [(s.latent, s.mask[None]) for s in anomalies]
    tc = TrainConfig(lr=t.lr, iters=t.iters, batch=t.batch, seed=seed, lr_decay=t.lr_decay)
    result = train(data, tc, model, sampler_config(cfg).schedule)
    return model, result


@dataclass
class SyntheticBatch:
    defect: int
    latents: torch.Tensor  # (N, C, H, W)
    target_masks: torch.Tensor  # (N, H, W)
    refined_masks: torch.Tensor  # (N, H, W)
    attention: torch.Tensor  # (N, H, W) resized attention summary
    sources: list[str] = field(default_factory=list)

    def samples(self, label: str = "target") -> list[tuple[torch.Tensor, torch.Tensor]]:
        masks = self.refined_masks if label == "refined" else self.target_masks
        return [(self.latents[i], masks[i]) for i in range(self.latents.shape[0])]


def draw_targets(normals: list[ToySample], defect: int, count: int, rng: Rng, cc: CorpusConfig):
    """Normal latents to paint on and fresh target masks of the given defect class."""
    idx = rng.child(0).integers(0, len(normals), size=count)
    z = torch.stack([normals[int(i)].latent for i in idx])
    m = torch.stack([torch.from_numpy(defect_mask(defect, rng.child(1, j), cc).astype(np.float32)) for j in range(count)])
    return z, m, [normals[int(i)].id for i in idx]


def synthesize_batch(model: Denoiser, normals: list[ToySample], defect: int, count: int, cfg: RunConfig, rng: Rng) -> SyntheticBatch:
    cc = corpus_config(cfg)
    z, m, ids = draw_targets(normals, defect, count, rng, cc)
    res = synthesize(z, m[:, None], model, sampler_config(cfg), rng.child(2), capture_frac=cfg.sampler.capture_frac)
    ref = refine_mask(res.attention, (cc.size, cc.size))
    return SyntheticBatch(defect, res.z0_star, m, ref.m_star[:, 0], ref.attention[:, 0], ids)


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    seed: int
    direction: str
    condition: str
    pixel_auroc: float
    pixel_ap: float
    image_auroc: float
    aupro: float
    final_loss: float
    flatness: float  # mean |g - g(0, 0)| over the loss-landscape grid on the test split


@dataclass
class BenchResult:
    rows: list[BenchRow]
    timings: dict

    def mean(self, condition: str, metric: str = "pixel_auroc") -> float:
        vals = [getattr(r, metric) for r in self.rows if r.condition == condition]
        return float(np.mean(vals))

    @property
    def gain(self) -> float:
        return self.mean("synthetic") - self.mean("baseline")

    def to_csv(self) -> str:
        cols = list(BenchRow.__dataclass_fields__)
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in asdict(r).values()))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "baseline_pixel_auroc": self.mean("baseline"),
            "synthetic_pixel_auroc": self.mean("synthetic"),
            "gain": self.gain,
            "baseline_flatness": self.mean("baseline", "flatness"),
            "synthetic_flatness": self.mean("synthetic", "flatness"),
            "runs": len(self.rows),
            "timings_s": self.timings,
        }


def run_benchmark(cfg: RunConfig, seeds=range(5), log: Callable[[str], None] | None = None) -> BenchResult:
    """Two-fold augmentation comparison.

    Generators are trained once per (fold direction, defect class) with
    ``cfg.train.seed``. Each benchmark seed then draws its own synthetic set
    (normals, target masks, defect noise) and its own segmenter initialisation
    and batch order, for both the baseline and the augmented condition.
    """
    log = log or (lambda msg: None)
    _, split = build_corpus(cfg)
    rows, timings = [], {"generators": 0.0, "synthesis": 0.0, "segmenters": 0.0, "landscapes": 0.0}
    d = cfg.downstream
    label = cfg.downstream.label
    for reverse in (False, True):
        direction = "b->a" if reverse else "a->b"
        train_anoms, test_anoms = split.direction(reverse)
        t0 = time.perf_counter()
        gens = {}
        for k in range(len(DEFECTS)):
            group = [s for s in train_anoms if s.defect == k]
            gens[k], _ = train_generator(group, cfg, cfg.train.seed + k)
        timings["generators"] += time.perf_counter() - t0
        log(f"{direction}: generators trained")
        test = split.normal_test + test_anoms
        for seed in seeds:
            t0 = time.perf_counter()
            synthetic = []
            for k, model in gens.items():
                rng = Rng(seed, (41, int(reverse), k))
                batch = synthesize_batch(model, split.normal_train, k, cfg.downstream.synthetic_per_class, cfg, rng)
                synthetic += batch.samples(label)
            timings["synthesis"] += time.perf_counter() - t0
            t0, spent = time.perf_counter(), 0.0
            for condition, syn in (("baseline", []), ("synthetic", synthetic)):
                res = train_segmenter(split.normal_train, train_anoms, syn, seg_config(cfg, seed))
                rep = evaluate(res.model, test)
                t1 = time.perf_counter()
                land = loss_landscape(res.model, test, d.landscape_span, d.landscape_resolution, seed, d.gamma, d.alpha_bal)
                spent += time.perf_counter() - t1
                rows.append(
                    BenchRow(seed, direction, condition, rep.pixel_auroc, rep.pixel_ap, rep.image_auroc, rep.aupro, res.losses[-1], land.flatness())
                )
                log(f"{direction} seed {seed} {condition}: pixel AUROC {rep.pixel_auroc:.4f}, flatness {land.flatness():.4f}")
            timings["segmenters"] += time.perf_counter() - t0 - spent
            timings["landscapes"] += spent
    return BenchResult(rows, {k: round(v, 1) for k, v in timings.items()})
