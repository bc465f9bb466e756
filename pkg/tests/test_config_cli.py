import json

import pytest

from mdlab import cli
from mdlab.cli import main
from mdlab.config import ConfigError, RunConfig, apply_override, config_from_dict, load_config
from mdlab.oracle import CheckResult, OracleSuite

# ---------------------------------------------------------------- config


def test_defaults_and_digest():
    a, b = RunConfig(), RunConfig()
    assert a.digest() == b.digest()
    b.train.iters = 7
    assert a.digest() != b.digest()
    assert json.loads(a.to_json())["sampler"]["steps"] == 50


def test_unknown_key_names_path():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"train": {"iterz": 3}})
    assert exc.value.path == "train.iterz"


def test_type_and_choice_checks():
    with pytest.raises(ConfigError, match="train.iters"):
        config_from_dict({"train": {"iters": "many"}})
    with pytest.raises(ConfigError, match="downstream.label"):
        config_from_dict({"downstream": {"label": "guess"}})
    assert config_from_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_override():
    cfg = RunConfig()
    apply_override(cfg, "sampler.steps=25")
    apply_override(cfg, "downstream.label=refined")
    apply_override(cfg, "model.widths=[16, 32]")
    assert (cfg.sampler.steps, cfg.downstream.label, cfg.model.widths) == (25, "refined", [16, 32])
    with pytest.raises(ConfigError):
        apply_override(cfg, "sampler.steps")
    with pytest.raises(ConfigError, match="sampler.nope"):
        apply_override(cfg, "sampler.nope=1")


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


# ---------------------------------------------------------------- exit codes


def test_unknown_key_exits_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schedule": {"betas": 1}}))
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "schedule.betas" in capsys.readouterr().err


def test_bad_override_exits_2(tmp_path, capsys):
    assert main(["verify", "--set", "sampler.steps=abc", "--out", str(tmp_path / "o")]) == 2
    assert "sampler.steps" in capsys.readouterr().err


def test_missing_model_exits_2(tmp_path, capsys, tiny_runs):
    assert main(["eval", "--corpus", str(tiny_runs["dataset"]), "--out", str(tmp_path / "o")]) == 2
    assert "model" in capsys.readouterr().err
    missing = tmp_path / "nowhere"
    assert main(["eval", "--model", str(missing), "--corpus", str(tiny_runs["dataset"]), "--out", str(tmp_path / "p")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_argparse_error_exits_2(capsys):
    assert main(["synth"]) == 2


def test_run_dirs_are_append_only(tiny_runs, capsys):
    assert main(["verify", "--config", str(tiny_runs["config"]), "--out", str(tiny_runs["verify"])]) == 2
    assert "append-only" in capsys.readouterr().err


def test_verify_passes_with_json(tiny_runs):
    result = json.loads((tiny_runs["verify"] / "result.json").read_text())
    assert result["passed"] is True
    assert {c["name"] for c in result["checks"]} >= {"lemma1", "prop1", "theorem1"}
    assert "prop1_gap_difference" in result["diagnostics"]


def test_verify_failure_exits_1(tmp_path, monkeypatch):
    failing = OracleSuite([CheckResult("theorem1", 0.2, 0.05, False, {"0.004": [0.2], "4e-05": [0.2]})])
    monkeypatch.setattr("mdlab.oracle.run_suite", lambda *a, **k: failing)
    assert main(["verify", "--out", str(tmp_path / "v")]) == 1
    assert (tmp_path / "v" / "manifest.json").exists()


def test_manifest_contents(tiny_runs):
    m = json.loads((tiny_runs["synth"] / "manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 7
    assert m["config_digest"] == config_from_dict(m["config"]).digest()
    assert "z0_star.mdlt" in m["artifacts"] and "result.json" in m["artifacts"]
    assert set(m["versions"]) >= {"mdlab", "torch", "numpy"}


def test_synth_same_seed_identical(tiny_runs, tmp_path):
    out = tmp_path / "again"
    argv = ["synth", "--config", str(tiny_runs["config"]), "--generator", str(tiny_runs["train-gen"])]
    argv += ["--corpus", str(tiny_runs["dataset"]), "--seed", "7", "--out", str(out)]
    assert main(argv) == 0
    a = json.loads((tiny_runs["synth"] / "manifest.json").read_text())["artifacts"]
    b = json.loads((out / "manifest.json").read_text())["artifacts"]
    assert a == b


def test_replay_detects_tampering(tiny_runs, tmp_path):
    src = tmp_path / "ref"
    assert main(["refine", "--synth", str(tiny_runs["synth"]), "--out", str(src)]) == 0
    assert main(["replay", str(src), "--out", str(tmp_path / "ok")]) == 0
    manifest = json.loads((src / "manifest.json").read_text())
    manifest["artifacts"]["m_star.mdlt"] = "0" * 64
    (src / "manifest.json").write_text(json.dumps(manifest))
    assert main(["replay", str(src), "--out", str(tmp_path / "bad")]) == 1


def test_seed_routing():
    cfg = RunConfig()
    assert cli._apply_seed(cfg, "dataset", 9) == 9 and cfg.dataset.seed == 9
    assert cli._apply_seed(cfg, "train-seg", None) == cfg.downstream.seed
    assert cli._apply_seed(cfg, "synth", None) == 0
