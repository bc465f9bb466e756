"""Command-line front end.

Every command writes a fresh run directory holding ``manifest.json`` (command,
resolved arguments, full config and its digest, seed, library versions and a
SHA-256 of every artifact), its artifacts, and ``result.json``. ``replay``
re-executes a run from its manifest into a new directory and compares the
artifact hashes.

Exit codes: 0 success, 1 failed check or replay mismatch, 2 bad config,
bad arguments or missing input paths.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, apply_override, config_from_dict, load_config
from .dataset import DEFECTS, load_corpus, save_corpus
from .errors import MdlError
from .io import save_mask_pgm, save_pgm, save_ppm, save_tensor, load_tensor
from .numerics import Rng, configure_threads

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad invocation; exits with status 2."""


class CheckFailed(Exception):
    """A verification or replay check failed; exits with status 1."""

    def __init__(self, message: str, run_dir: Path | None = None):
        super().__init__(message)
        self.run_dir = run_dir


# ---------------------------------------------------------------- run dirs


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import matplotlib
    import scipy

    return {
        "mdlab": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
    }


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fresh_dir(out: Path) -> Path:
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"run directory {out} already exists and is not empty (run directories are append-only)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, command: str, args: dict, cfg: RunConfig, seed, result: dict, volatile: dict | None = None) -> dict:
    _write_json(out / "result.json", result)
    artifacts = {
        str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST
    }
    manifest = {
        "command": command,
        "args": args,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed": seed,
        "versions": _versions(),
        "artifacts": artifacts,
    }
    if volatile:
        manifest["volatile"] = volatile
    _write_json(out / MANIFEST, manifest)
    return result


def _need_dir(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required path: {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} path does not exist: {p}")
    return p


def _load_corpus(path):
    """Corpus from a ``dataset`` run directory or a bare corpus directory."""
    p = _need_dir(path, "corpus")
    if (p / "corpus").is_dir():
        p = p / "corpus"
    if not (p / "manifest.json").exists():
        raise UsageError(f"no corpus manifest under {p}")
    return load_corpus(p)


def _checkpoint_dir(path, what: str) -> Path:
    p = _need_dir(path, what)
    if (p / "checkpoint").is_dir():
        p = p / "checkpoint"
    if not (p / "checkpoint.txt").exists():
        raise UsageError(f"no {what} checkpoint under {p}")
    return p


def _defect_index(name) -> int:
    if isinstance(name, int) or str(name).isdigit():
        k = int(name)
        if 0 <= k < len(DEFECTS):
            return k
    elif name in DEFECTS:
        return DEFECTS.index(name)
    raise UsageError(f"unknown defect class {name!r}; choose from {', '.join(DEFECTS)}")


def _fold(split, fold: str):
    """(train anomalies, test anomalies) when training on ``fold``."""
    if split is None:
        raise UsageError("corpus has no fold assignment")
    if fold not in ("a", "b"):
        raise UsageError(f"fold must be 'a' or 'b', got {fold!r}")
    return split.direction(reverse=fold == "b")


# ---------------------------------------------------------------- commands


def cmd_dataset(cfg: RunConfig, args: dict, out: Path):
    from .pipeline import build_corpus
    from .report import plot_samples

    samples, split = build_corpus(cfg)
    save_corpus(out / "corpus", samples, split, extra={"dataset_seed": cfg.dataset.seed})
    anomalies = [s for s in samples if s.is_anomalous]
    for s in samples[:3] + anomalies[:: max(1, len(anomalies) // 6)][:6]:
        save_ppm(out / "previews" / f"{s.id}.ppm", s.latent)
    show = samples[:6] + anomalies[:: max(1, len(anomalies) // 6)][:6]
    plot_samples([s.latent for s in show], [s.mask for s in show], out / "figures" / "corpus.png")
    areas = [float(s.mask.mean()) for s in anomalies]
    return {
        "normals": len(samples) - len(anomalies),
        "anomalies": len(anomalies),
        "fold_a": len(split.fold_a),
        "fold_b": len(split.fold_b),
        "defect_area_min": min(areas),
        "defect_area_max": max(areas),
    }


def cmd_train_gen(cfg: RunConfig, args: dict, out: Path):
    from .denoiser import save_denoiser
    from .pipeline import train_generator
    from .report import plot_loss

    k = _defect_index(args["defect"])
    _, split = _load_corpus(args["corpus"])
    train_anoms, _ = _fold(split, args["fold"])
    group = [s for s in train_anoms if s.defect == k]
    if not group:
        raise UsageError(f"fold {args['fold']} holds no {DEFECTS[k]} anomalies")
    model, res = train_generator(group, cfg, cfg.train.seed)
    save_denoiser(out / "checkpoint", model, {"defect": DEFECTS[k], "defect_id": k, "fold": args["fold"]})
    (out / "loss.csv").write_text(res.to_csv())
    plot_loss(res.losses, out / "figures" / "loss.png", title=f"generator ({DEFECTS[k]}, fold {args['fold']})")
    return {
        "defect": DEFECTS[k],
        "fold": args["fold"],
        "train_samples": len(group),
        "initial_loss": float(np.mean(res.losses[:10])),
        "final_loss": float(np.mean(res.losses[-10:])),
    }


def cmd_synth(cfg: RunConfig, args: dict, out: Path, seed: int):
    from .denoiser import load_denoiser
    from .pipeline import synthesize_batch
    from .report import plot_maps, plot_samples

    model, meta = load_denoiser(_checkpoint_dir(args["generator"], "generator"))
    k = int(meta["defect_id"])
    _, split = _load_corpus(args["corpus"])
    count = args["count"] or cfg.downstream.synthetic_per_class
    batch = synthesize_batch(model, split.normal_train, k, count, cfg, Rng(seed, (43, k)))
    save_tensor(out / "z0_star.mdlt", batch.latents)
    save_tensor(out / "target_masks.mdlt", batch.target_masks)
    save_tensor(out / "attention.mdlt", batch.attention)
    save_tensor(out / "m_star.mdlt", batch.refined_masks)
    for i in range(count):
        save_mask_pgm(out / "masks" / f"s{i:04d}_target.pgm", batch.target_masks[i])
        save_mask_pgm(out / "masks" / f"s{i:04d}_m_star.pgm", batch.refined_masks[i])
    for i in range(min(count, 6)):
        save_ppm(out / "previews" / f"s{i:04d}.ppm", batch.latents[i])
    (out / "sources.txt").write_text("\n".join(batch.sources) + "\n")
    plot_samples(batch.latents[:12], batch.target_masks[:12], out / "figures" / "synthetic.png", title=DEFECTS[k])
    plot_maps(batch.attention[:12], out / "figures" / "attention.png")
    return {
        "defect": DEFECTS[k],
        "count": count,
        "target_area_mean": float(batch.target_masks.mean()),
        "refined_area_mean": float(batch.refined_masks.mean()),
        "attention_in_mask_mean": float((batch.attention * batch.target_masks).sum() / batch.target_masks.sum()),
    }


def cmd_refine(cfg: RunConfig, args: dict, out: Path):
    from .maskops import threshold_map

    src = _need_dir(args["synth"], "synth run")
    att = load_tensor(src / "attention.mdlt")
    h, w = att.shape[-2:]
    ref = threshold_map(att[:, None], (h, w), args["threshold"])
    m_star = ref.m_star[:, 0]
    save_tensor(out / "m_star.mdlt", m_star)
    for i in range(m_star.shape[0]):
        save_mask_pgm(out / "masks" / f"s{i:04d}.pgm", m_star[i])
    return {"threshold": args["threshold"], "count": int(m_star.shape[0]), "area_mean": float(m_star.mean())}


def _synthetic_from(dirs, label: str):
    pairs = []
    for d in dirs or []:
        p = _need_dir(d, "synth run")
        z = load_tensor(p / "z0_star.mdlt")
        m = load_tensor(p / ("m_star.mdlt" if label == "refined" else "target_masks.mdlt"))
        pairs += [(z[i], m[i]) for i in range(z.shape[0])]
    return pairs


def cmd_train_seg(cfg: RunConfig, args: dict, out: Path):
    from .downstream import save_segmenter, train_segmenter
    from .pipeline import seg_config
    from .report import plot_loss

    _, split = _load_corpus(args["corpus"])
    train_anoms, _ = _fold(split, args["fold"])
    synthetic = _synthetic_from(args["synth"], cfg.downstream.label)
    res = train_segmenter(split.normal_train, train_anoms, synthetic, seg_config(cfg))
    save_segmenter(out / "checkpoint", res.model, {"fold": args["fold"]})
    (out / "loss.csv").write_text("epoch,loss\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(res.losses)))
    plot_loss(res.losses, out / "figures" / "loss.png", title="segmenter", window=10)
    return {
        "fold": args["fold"],
        "real_normals": len(split.normal_train),
        "real_anomalies": len(train_anoms),
        "synthetic": len(synthetic),
        "final_loss": res.losses[-1],
    }


def _load_seg(path):
    from .downstream import load_segmenter

    return load_segmenter(_checkpoint_dir(path, "model"))


def cmd_eval(cfg: RunConfig, args: dict, out: Path):
    from .downstream import metrics_report, predict
    from .report import plot_maps

    model, meta = _load_seg(args["model"])
    _, split = _load_corpus(args["corpus"])
    fold = args["fold"] or meta.get("fold", "a")
    _, test_anoms = _fold(split, fold)
    test = split.normal_test + test_anoms
    x = torch.stack([s.latent for s in test])
    scores = predict(model, x)
    gts = np.stack([(s.mask > 0.5).numpy() for s in test])
    report = metrics_report(scores.numpy(), gts)
    _write_json(out / "metrics.json", report.to_dict())
    for s, sc in zip(test, scores):
        save_pgm(out / "scores" / f"{s.id}.pgm", sc)
    shown = [i for i, s in enumerate(test) if s.is_anomalous][:12]
    plot_maps([scores[i] for i in shown], out / "figures" / "scores.png", titles=[test[i].id for i in shown])
    return {"fold_trained": fold, "test_samples": len(test), **report.to_dict()}


def cmd_landscape(cfg: RunConfig, args: dict, out: Path, seed: int):
    from .downstream.landscape import loss_landscape
    from .report import plot_landscape

    model, meta = _load_seg(args["model"])
    _, split = _load_corpus(args["corpus"])
    fold = args["fold"] or meta.get("fold", "a")
    _, test_anoms = _fold(split, fold)
    d = cfg.downstream
    ls = loss_landscape(model, split.normal_test + test_anoms, d.landscape_span, d.landscape_resolution, seed, d.gamma, d.alpha_bal)
    (out / "landscape.csv").write_text(ls.to_csv())
    plot_landscape(ls.alphas, ls.betas, ls.values, out / "figures" / "landscape.png")
    return {"center": ls.center(), "flatness": ls.flatness(), "resolution": d.landscape_resolution}


def cmd_verify(cfg: RunConfig, args: dict, out: Path):
    from .oracle import run_suite
    from .report import plot_theorem1
    from .schedule import make_linear_schedule

    s = cfg.schedule
    suite = run_suite(make_linear_schedule(s.T, s.beta_start, s.beta_end), cfg.sampler.steps, size=cfg.dataset.size, channels=cfg.dataset.channels)
    detail = next(c.detail for c in suite.checks if c.name == "theorem1")
    plot_theorem1(detail, out / "figures" / "theorem1.png")
    result = suite.to_dict()
    if args.get("generator"):
        result["diagnostics"] = _network_diagnostics(cfg, args["generator"])
    return result


def _network_diagnostics(cfg: RunConfig, gen: str) -> dict:
    """Gap-preservation residual with a trained network; reported, not asserted."""
    from .denoiser import load_denoiser
    from .oracle import _case
    from .pipeline import sampler_config
    from .sampler import NetworkEps, composite_step, init_star, masked_invert_fn, reconstruct_masked_fn
    from .schedule import background

    model, _ = load_denoiser(_checkpoint_dir(gen, "generator"))
    sc = sampler_config(cfg)
    z0, m = _case(0, cfg.dataset.size, cfg.dataset.channels)
    z0, mm = z0[None], m[None, None]
    with torch.no_grad():
        fns = NetworkEps(model, mm)
        inv = masked_invert_fn(z0, mm, fns.masked, sc)
        rec = reconstruct_masked_fn(inv.last, mm, fns.masked, sc)
        z = init_star(inv.last, mm, Rng(0, (47,)))
        ts = sc.timesteps
        worst = 0.0
        for k, t in enumerate(ts):
            if k:
                z = composite_step(z, ts[k - 1], t, mm, fns.masked, fns.full, sc.schedule)
            ref = inv.at(t)
            g1 = background(rec.at(t) - ref, mm).double().pow(2).sum()
            g2 = background(z - ref, mm).double().pow(2).sum()
            worst = max(worst, float((g1 - g2).abs()))
        round_trip = float((background(rec.last - z0, mm)).abs().max())
    return {"prop1_gap_difference": worst, "background_round_trip_max_abs": round_trip}


def cmd_bench(cfg: RunConfig, args: dict, out: Path, seed: int):
    from .pipeline import run_benchmark
    from .report import plot_bench

    seeds = range(seed, seed + args["seeds"])
    res = run_benchmark(cfg, seeds, log=lambda msg: print(msg, file=sys.stderr, flush=True))
    (out / "bench.csv").write_text(res.to_csv())
    plot_bench(res.rows, out / "figures" / "bench.png")
    summary = res.summary()
    timings = summary.pop("timings_s")
    summary["margin"] = args["margin"]
    summary["passed"] = summary["gain"] >= args["margin"]
    return summary, {"timings_s": timings}


# ---------------------------------------------------------------- dispatch


SEEDED = {
    "dataset": ("dataset", "seed"),
    "train-gen": ("train", "seed"),
    "train-seg": ("downstream", "seed"),
}


def _apply_seed(cfg: RunConfig, command: str, seed: int | None) -> int:
    """Route ``--seed`` into the config section the command draws from."""
    if command in SEEDED:
        section, key = SEEDED[command]
        if seed is not None:
            setattr(getattr(cfg, section), key, seed)
        return getattr(getattr(cfg, section), key)
    return 0 if seed is None else seed


def execute(command: str, args: dict, cfg: RunConfig, seed: int | None, out: Path) -> tuple[int, dict]:
    seed = _apply_seed(cfg, command, seed)
    out = _fresh_dir(out)
    volatile = None
    t0 = time.perf_counter()
    if command == "dataset":
        result = cmd_dataset(cfg, args, out)
    elif command == "train-gen":
        result = cmd_train_gen(cfg, args, out)
    elif command == "synth":
        result = cmd_synth(cfg, args, out, seed)
    elif command == "refine":
        result = cmd_refine(cfg, args, out)
    elif command == "train-seg":
        result = cmd_train_seg(cfg, args, out)
    elif command == "eval":
        result = cmd_eval(cfg, args, out)
    elif command == "landscape":
        result = cmd_landscape(cfg, args, out, seed)
    elif command == "verify":
        result = cmd_verify(cfg, args, out)
    elif command == "bench":
        result, volatile = cmd_bench(cfg, args, out, seed)
    else:
        raise UsageError(f"unknown command {command}")
    volatile = dict(volatile or {}, wall_s=round(time.perf_counter() - t0, 2))
    _finish(out, command, args, cfg, seed, result, volatile)
    if command == "verify" and not result["passed"]:
        failed = [c["name"] for c in result["checks"] if not c["passed"]]
        raise CheckFailed("verification failed: " + ", ".join(failed), out)
    if command == "bench" and not result["passed"]:
        raise CheckFailed(f"augmentation gain {result['gain']:.4f} below margin {result['margin']}", out)
    return 0, result


def replay(run_dir: Path, out: Path) -> dict:
    """Re-execute a run from its manifest and compare artifact hashes."""
    manifest_path = _need_dir(str(run_dir / MANIFEST), "manifest")
    manifest = json.loads(manifest_path.read_text())
    cfg = config_from_dict(manifest["config"])
    try:
        execute(manifest["command"], manifest["args"], cfg, manifest["seed"], out)
    except CheckFailed:
        pass  # the original run recorded the same outcome; hashes decide
    new = json.loads((out / MANIFEST).read_text())["artifacts"]
    old = manifest["artifacts"]
    mismatched = sorted(k for k in set(old) | set(new) if old.get(k) != new.get(k))
    report = {"source": str(run_dir), "replay": str(out), "artifacts": len(old), "mismatched": mismatched}
    if mismatched:
        raise CheckFailed(f"replay differs in {len(mismatched)} artifact(s): {', '.join(mismatched[:5])}")
    return report


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdlab", description="Toy latent-diffusion defect synthesis lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, help="seed for this command")
        sp.add_argument("--out", help="run directory to create (default: <paths.runs>/<command>-<digest>)")
        return sp

    add("dataset", "generate the toy corpus with fold split")
    sp = add("train-gen", "train a defect generator on one class of one fold")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--defect", required=True, help=f"one of {', '.join(DEFECTS)}")
    sp.add_argument("--fold", default="a", choices=["a", "b"])
    sp = add("synth", "synthesize defects on normal latents")
    sp.add_argument("--generator", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--count", type=int, default=0, help="default: downstream.synthetic_per_class")
    sp = add("refine", "threshold a synth run's attention into label masks")
    sp.add_argument("--synth", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp = add("train-seg", "train the anomaly segmenter")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--fold", default="a", choices=["a", "b"])
    sp.add_argument("--synth", action="append", default=[], help="synth run directory (repeatable)")
    sp = add("eval", "evaluate a segmenter on the held-out fold")
    sp.add_argument("--model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--fold", choices=["a", "b"])
    sp = add("landscape", "scan the segmenter loss on a random 2-D slice")
    sp.add_argument("--model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--fold", choices=["a", "b"])
    sp = add("verify", "run the closed-form oracle checks")
    sp.add_argument("--generator", help="also report diagnostics for a trained generator")
    sp = add("bench", "two-fold augmentation benchmark")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--margin", type=float, default=0.02)

    rp = sub.add_parser("replay", help="re-run a command from its manifest and compare artifacts")
    rp.add_argument("run_dir")
    rp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    configure_threads()
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if ns.command == "replay":
            report = replay(Path(ns.run_dir), Path(ns.out))
            print(json.dumps(report, indent=2))
            return 0
        cfg = load_config(ns.config)
        for assignment in ns.set:
            apply_override(cfg, assignment)
        args = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "set", "seed", "out")}
        out = Path(ns.out) if ns.out else Path(cfg.paths.runs) / f"{ns.command}-{cfg.digest()[:8]}-s{ns.seed if ns.seed is not None else 'd'}"
        _, result = execute(ns.command, args, cfg, ns.seed, out)
        print(json.dumps(result, indent=2, sort_keys=True))
        print(f"run directory: {out}", file=sys.stderr)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except MdlError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
