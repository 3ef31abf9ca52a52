import json
import math

import numpy as np
import pytest
import yaml

from hcdefect.cli import build_parser, main
from hcdefect.errors import ConfigurationError
from hcdefect.experiments import ExperimentConfig, RunManifest
from hcdefect.experiments.records import fmt, load_fields, read_csv, save_fields, sha256, write_csv

QUICK = "configs/quick.yaml"


def test_default_config_is_valid_and_hash_is_stable():
    a, b = ExperimentConfig().validate(), ExperimentConfig().validate()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    b.output_dir = "elsewhere"
    assert a.hash() == b.hash()
    b.seeds = [7]
    assert a.hash() != b.hash()


def test_config_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig.load(QUICK)
    cfg.dump(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict() and back.hash() == cfg.hash()


@pytest.mark.parametrize("data", [
    {"epsilons": [0.125, 0.25]},
    {"epsilons": []},
    {"seeds": []},
    {"A1": [[1, 2], [0, 1]]},
    {"A1": -1.0},
    {"nonsense": 1},
    {"mesh": {"box_half": 1.3}},
    {"defect": {"radius": 2.0}},
    {"defect": {"tune_fraction": 1.5}},
    {"spectral": {"lam_range": [10, 5]}},
    {"geometry": {"radius_law": [0.3, 0.2]}},
])
def test_bad_configs_are_rejected(data):
    with pytest.raises(Exception) as exc:
        ExperimentConfig.from_dict(data)
    assert isinstance(exc.value, (ConfigurationError, ValueError)) or "Violation" in type(exc.value).__name__


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(tmp_path / "missing.yaml")


def test_fmt_round_trips_floats():
    for v in (0.1, 1 / 3, 1e-300, -2.5e17, 76.29233317406751):
        assert float(fmt(v)) == v
        assert float(fmt(np.float64(v))) == v
    assert fmt(True) == "true" and fmt(np.bool_(False)) == "false"
    assert fmt(np.int64(3)) == "3" and fmt(float("nan")) == "nan" and fmt(None) == ""


def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "c": "x"}]
    p = write_csv(tmp_path / "t.csv", rows)
    back = read_csv(p)
    assert list(back[0]) == ["a", "b", "c"]
    assert back[0]["b"] == "0.1" and back[1]["c"] == "x" and back[1]["b"] == ""


def test_fields_archive_is_byte_stable(tmp_path):
    x = np.arange(10.0)
    save_fields(tmp_path / "a.npz", u=x, v=np.eye(2))
    save_fields(tmp_path / "b.npz", v=np.eye(2), u=x)
    assert sha256(tmp_path / "a.npz") == sha256(tmp_path / "b.npz")
    assert np.array_equal(load_fields(tmp_path / "a.npz")["u"], x)


def test_manifest_verify(tmp_path):
    (tmp_path / "x.csv").write_text("a\n1\n")
    m = RunManifest("demo", "abc", seeds=[0])
    with m.stage("work"):
        pass
    m.write(tmp_path)
    back = RunManifest.read(tmp_path)
    assert back.verify(tmp_path) and "work" in back.timings
    assert json.loads((tmp_path / "manifest.json").read_text())["files"]
    (tmp_path / "x.csv").write_text("a\n2\n")
    assert not back.verify(tmp_path)


def test_parser():
    p = build_parser()
    a = p.parse_args(["gap-scan", "--seed", "3", "--threads", "2", "--out", "o"])
    assert (a.campaign, a.seed, a.threads, a.out) == ("gap-scan", 3, 2, "o")
    with pytest.raises(SystemExit):
        p.parse_args(["nope"])
    assert main(["gap-scan", "--threads", "0"]) == 2


def test_cli_reports_config_errors(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"epsilons": [0.1, 0.2]}))
    assert main(["gap-scan", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.slow
def test_quick_gap_scan_end_to_end(tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["gap-scan", "--config", QUICK, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "FAIL" not in text
    d = out / "gap-scan"
    for name in ("beta_table.csv", "gaps.csv", "dirichlet_oracle.csv", "assertions.csv", "manifest.json", "beta.png"):
        assert (d / name).is_file()
    man = RunManifest.read(d)
    assert man.verify(d) and man.config_hash == ExperimentConfig.load(QUICK).hash()
    gaps = read_csv(d / "gaps.csv")
    assert gaps and all(math.isfinite(float(g["lo"])) for g in gaps)
    # second invocation reuses the verified outputs
    before = sha256(d / "manifest.json")
    assert main(["gap-scan", "--config", QUICK, "--out", str(out)]) == 0
    assert "up to date" in capsys.readouterr().out
    assert sha256(d / "manifest.json") == before
