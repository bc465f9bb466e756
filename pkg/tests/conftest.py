import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(int(os.environ.get("MDL_THREADS", "1")))

settings.register_profile(
    "mdlab",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("mdlab")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    def log(number: int, title: str, passed: bool, detail: str = ""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return log


TINY_CONFIG = {
    "dataset": {"n_normal": 8, "n_per_defect": 4},
    "train": {"iters": 20, "batch": 4},
    "model": {"widths": [8, 16], "d_c": 8, "temb_dim": 16},
    "sampler": {"steps": 10},
    "downstream": {"epochs": 2, "synthetic_per_class": 3, "landscape_resolution": 3, "batch": 8},
}


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """Every CLI command run once on a small config; returns {name: run dir}."""
    import json

    from mdlab.cli import main

    root = tmp_path_factory.mktemp("runs")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    r = {k: root / k for k in ("dataset", "train-gen", "synth", "refine", "train-seg", "eval", "landscape", "verify", "bench")}
    base = ["--config", str(cfg)]
    steps = [
        ["dataset"],
        ["train-gen", "--corpus", str(r["dataset"]), "--defect", "blob"],
        ["synth", "--generator", str(r["train-gen"]), "--corpus", str(r["dataset"]), "--seed", "7"],
        ["refine", "--synth", str(r["synth"])],
        ["train-seg", "--corpus", str(r["dataset"]), "--synth", str(r["synth"])],
        ["eval", "--model", str(r["train-seg"]), "--corpus", str(r["dataset"])],
        ["landscape", "--model", str(r["train-seg"]), "--corpus", str(r["dataset"])],
        ["verify", "--generator", str(r["train-gen"])],
        ["bench", "--seeds", "1", "--margin", "-1"],
    ]
    for step in steps:
        code = main(step + base + ["--out", str(r[step[0]])])
        assert code == 0, step
    r["config"] = cfg
    return r
