import json
from pathlib import Path

import numpy as np
import pytest

from picard_lab.cli import main
from picard_lab.config import parse_config_text, render_config, resolve_config

TINY_CONVERGE = """\
# tiny but real convergence run
model.preset = ou
model.theta = 1.0
model.sigma = 1.0
model.kappa = 1.0
model.x0 = 1.0
experiment.T = 1.0
experiment.n_list = 4,8,16
experiment.n_ref = 64
experiment.p_list = 2
experiment.M_X = 96
experiment.M_Y = 4
experiment.g = identity,indicator
experiment.seed = 7
"""


def _write(tmp_path: Path, name: str, text: str) -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _read_outputs(out_dir: Path) -> dict[str, bytes]:
    return {
        p.name: p.read_bytes()
        for p in sorted(out_dir.iterdir())
        if p.suffix in (".csv", ".json") and p.name != "manifest.json"
    }


def test_converge_outputs_are_worker_invariant(tmp_path):
    cfg = _write(tmp_path, "ou.cfg", TINY_CONVERGE)
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    assert main(["converge", "--config", str(cfg), "--out", str(out1), "--workers", "1"]) == 0
    assert main(["converge", "--config", str(cfg), "--out", str(out2), "--workers", "2"]) == 0
    a = _read_outputs(out1)
    b = _read_outputs(out2)
    assert set(a) == set(b)
    assert a == b
    # digests recorded in the two manifests agree file by file
    da = {f["path"]: f["sha256"] for f in json.loads((out1 / "manifest.json").read_text())["files"]}
    db = {f["path"]: f["sha256"] for f in json.loads((out2 / "manifest.json").read_text())["files"]}
    assert da == db


def test_converge_seed_flag_overrides_config(tmp_path):
    cfg = _write(tmp_path, "ou.cfg", TINY_CONVERGE)
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert main(["converge", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["converge", "--config", str(cfg), "--out", str(out2), "--seed", "8"]) == 0
    assert _read_outputs(out1) != _read_outputs(out2)


def test_converge_report_config_roundtrip(tmp_path):
    cfg = _write(tmp_path, "ou.cfg", TINY_CONVERGE)
    out = tmp_path / "run"
    assert main(["converge", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "converge_report.json").read_text())
    echoed = report["config"]
    reparsed = parse_config_text(render_config(echoed))
    assert reparsed == echoed
    resolved = resolve_config("converge", reparsed)
    assert resolved.echo() == echoed
    assert report["seed"] == 7


def test_converge_csv_schema(tmp_path):
    cfg = _write(tmp_path, "ou.cfg", TINY_CONVERGE)
    out = tmp_path / "run"
    assert main(["converge", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "converge_identity.csv").read_text().splitlines()
    assert lines[0] == "n,p,error,stderr,n_ref,M_X,M_Y,seed"
    assert len(lines) == 4
    first = lines[1].split(",")
    assert first[0] == "4" and first[4] == "64" and first[7] == "7"
    slope_lines = (out / "converge_identity_slopes.csv").read_text().splitlines()
    assert slope_lines[0] == "p,slope,intercept,slope_halfwidth,residual"


def test_normalized_flag_changes_output_and_echo(tmp_path):
    cfg = _write(tmp_path, "ou.cfg", TINY_CONVERGE)
    out1 = tmp_path / "plain"
    out2 = tmp_path / "norm"
    assert main(["converge", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["converge", "--config", str(cfg), "--out", str(out2), "--normalized"]) == 0
    assert _read_outputs(out1) != _read_outputs(out2)
    report = json.loads((out2 / "converge_report.json").read_text())
    assert report["normalized"] is True
    assert report["config"]["experiment.normalized"] == "true"


def test_unknown_config_key_is_rejected(tmp_path):
    cfg = _write(tmp_path, "bad.cfg", TINY_CONVERGE + "experiment.bogus = 3\n")
    assert main(["converge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_malformed_line_is_rejected(tmp_path):
    cfg = _write(tmp_path, "bad.cfg", "model.preset = ou\nnot a key value line\n")
    code = main(["converge", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2


def test_missing_config_is_rejected(tmp_path):
    assert main(["converge", "--out", str(tmp_path / "o")]) == 2
    assert main(["converge", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_unknown_subcommand_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        main(["frobnicate"])
    assert excinfo.value.code == 2


def test_env_seed_fallback(tmp_path, monkeypatch):
    cfg = _write(
        tmp_path,
        "ou.cfg",
        TINY_CONVERGE.replace("experiment.seed = 7\n", ""),
    )
    out = tmp_path / "run"
    monkeypatch.setenv("PICARD_LAB_SEED", "99")
    assert main(["converge", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "converge_report.json").read_text())
    assert report["seed"] == 99


FILTER_SILENT = """\
model.preset = ou
model.kappa = 0.0
filter.T = 1.0
filter.n = 8
filter.substeps = 1
filter.particles = 64
filter.g = one
filter.seed = 3
"""


def test_filter_silent_observation_normalized_column_is_one(tmp_path):
    cfg = _write(tmp_path, "filter.cfg", FILTER_SILENT)
    out = tmp_path / "run"
    assert main(["filter", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "filter.csv").read_text().splitlines()
    assert lines[0] == "node,t,unnormalized,normalized,normalized_se"
    assert len(lines) == 10
    for line in lines[1:]:
        assert line.split(",")[3] == "1"


def test_simulate_writes_reproducible_tables(tmp_path):
    cfg = _write(
        tmp_path,
        "sim.cfg",
        "model.preset = ou\nsimulate.T = 1.0\nsimulate.n = 16\nsimulate.replicas = 6\nsimulate.seed = 5\n",
    )
    out1 = tmp_path / "s1"
    out2 = tmp_path / "s2"
    assert main(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
    assert _read_outputs(out1) == _read_outputs(out2)
    paths = (out1 / "paths.csv").read_text().splitlines()
    assert paths[0] == "replica,node,t,x0"
    assert len(paths) == 1 + 6 * 17
    weights = (out1 / "weights.csv").read_text().splitlines()
    assert weights[0] == "replica,log_weight"
    assert len(weights) == 7
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert {f["path"] for f in manifest["files"]} == {"paths.csv", "weights.csv"}


KALMAN_SMALL = """\
model.preset = linear
model.a = -0.5
model.sigma = 1.0
model.h = 1.0
model.x0 = 1.0
kalman.T = 1.0
kalman.n = 64
kalman.substeps = 2
kalman.particles = 4000
kalman.tolerance = 0.05
kalman.seed = 2
"""


def test_kalman_check_small_run_passes(tmp_path):
    cfg = _write(tmp_path, "kalman.cfg", KALMAN_SMALL)
    out = tmp_path / "run"
    assert main(["kalman-check", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "kalman_check.csv").read_text().splitlines()
    assert lines[0] == "node,t,kalman_mean,picard_mean,abs_diff,picard_se"
    assert len(lines) == 66


def test_kalman_check_requires_linear_preset(tmp_path):
    cfg = _write(tmp_path, "kalman.cfg", KALMAN_SMALL.replace("model.preset = linear", "model.preset = ou").replace("model.a = -0.5\n", "").replace("model.h = 1.0\n", ""))
    assert main(["kalman-check", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_selftest_passes():
    assert main(["selftest"]) == 0


def test_numbers_serialized_with_17_significant_digits(tmp_path):
    cfg = _write(tmp_path, "ou.cfg", TINY_CONVERGE)
    out = tmp_path / "run"
    assert main(["converge", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "converge_identity.csv").read_text().splitlines()
    for line in lines[1:]:
        error_text = line.split(",")[2]
        assert float(error_text) == np.float64(error_text)
        # enough digits for an exact float round-trip
        value = float(error_text)
        assert format(value, ".17g") == error_text
