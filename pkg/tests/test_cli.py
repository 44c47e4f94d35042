"""Configuration resolution, artifact layout and exit codes of the CLI."""

import json

import numpy as np
import pytest

from lodadapt import cli, field
from lodadapt.errors import ConfigError


def test_resolve_preset_fills_defaults(tmp_path):
    cfg = cli.resolve_config("kconv-mini", None, str(tmp_path / "o"))
    assert cfg["kind"] == "kconv"
    assert cfg["preset"] == "kconv-mini"
    assert cfg["out"] == str(tmp_path / "o")
    assert cfg["mode"] == "fine"
    assert cfg["include_rhs"] is True
    assert cfg["threads"] is None
    assert cfg["mesh"]["dirichlet_axes"] == [0]
    assert cfg["field"]["seed"] == 1


def test_config_file_overrides_preset(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 9, "ks": [1, 2]}))
    cfg = cli.resolve_config("kconv-mini", str(path), None)
    assert cfg["seed"] == 9
    assert cfg["ks"] == [1, 2]
    assert cfg["kind"] == "kconv"  # untouched preset entries survive
    assert cfg["out"].endswith("kconv-mini")


def test_config_without_preset(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({
        "kind": "single_solve",
        "mesh": {"domain": [[0, 1], [0, 1]], "coarse": [2, 2], "refine": [2, 2]},
        "field": {"kind": "constant", "value": 1.0},
    }))
    cfg = cli.resolve_config(None, str(path), None)
    assert cfg["seed"] == 0
    assert cfg["k"] == 2
    assert cfg["mesh"]["dim"] == 2
    assert cfg["out"].endswith("single_solve")


def test_resolve_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigError):
        cli.resolve_config("no-such-preset", None, None)
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError):
        cli.resolve_config(None, str(bad), None)
    wrong_kind = tmp_path / "k.json"
    wrong_kind.write_text(json.dumps({"kind": "mystery"}))
    with pytest.raises(ConfigError):
        cli.resolve_config(None, str(wrong_kind), None)
    missing_mesh = tmp_path / "m.json"
    missing_mesh.write_text(json.dumps({"kind": "kconv", "field": {"kind": "constant"}}))
    with pytest.raises(ConfigError):
        cli.resolve_config(None, str(missing_mesh), None)


def test_run_kconv_mini_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["run", "--preset", "kconv-mini", "--out", str(out)])
    assert rc == 0
    assert (out / "errors.csv").is_file()
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["kind"] == "kconv"
    assert meta["seed"] == 1
    assert meta["ks"] == [1, 2, 3]
    rows = (out / "errors.csv").read_text().strip().splitlines()
    assert rows[0].startswith("k,")
    assert len(rows) == 4
    # localization error decays with k even on the mini problem
    errs = [float(r.split(",")[1]) for r in rows[1:]]
    assert errs[2] < errs[0]


def test_run_tolsweep_mini_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["run", "--preset", "tolsweep-mini", "--out", str(out)])
    assert rc == 0
    for tol in ("0.5", "0.05"):
        assert (out / f"summary_tol{tol}.csv").is_file()
        assert (out / f"mask_tol{tol}.csv").is_file()
        assert (out / f"indicators_tol{tol}.csv").is_file()
    head = (out / "summary_tol0.5.csv").read_text().splitlines()[0]
    for col in ("n", "recomputed_count", "energy_err", "wall_ms"):
        assert col in head


def test_run_darcy2d_mini_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["run", "--preset", "darcy2d-mini", "--out", str(out)])
    assert rc == 0
    assert (out / "stats.csv").is_file()
    assert (out / "flux_final.csv").is_file()
    assert (out / "comparison.csv").is_file()
    sats = sorted((out / "sat").glob("sat_*.txt"))
    assert len(sats) == 5  # initial state plus four steps
    counts, vals = field.read_field(sats[-1])
    assert list(counts) == [4, 4]
    assert np.all(vals >= -1e-12) and np.all(vals <= 1 + 1e-12)
    rows = (out / "comparison.csv").read_text().strip().splitlines()
    assert rows[0] == "n,sat_err_lod,sat_err_fem"
    assert len(rows) == 5


def test_run_darcy3d_mini_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["run", "--preset", "darcy3d-mini", "--out", str(out)])
    assert rc == 0
    for label in ("k1_tol0.1", "k1_tol0.01"):
        assert (out / f"stats_{label}.csv").is_file()
        assert (out / f"sat_final_{label}.txt").is_file()
    diffs = (out / "diffs.csv").read_text().strip().splitlines()
    assert diffs[0] == "run_a,run_b,l2_diff,linf_diff"
    assert len(diffs) == 2


def test_run_single_mini_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["run", "--preset", "single-mini", "--out", str(out)])
    assert rc == 0
    assert (out / "solution.csv").is_file()
    header, row = (out / "summary.csv").read_text().strip().splitlines()
    summary = dict(zip(header.split(","), row.split(",")))
    assert float(summary["energy_err"]) < 1.0


def test_run_requires_config_or_preset():
    assert cli.main(["run"]) == 2


def test_exit_code_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"kind": "kconv"}))
    assert cli.main(["run", "--config", str(cfg)]) == 2


def test_exit_code_numeric_failure(tmp_path):
    # no Dirichlet boundary at all: the corrector systems are singular
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "kind": "single_solve",
        "mesh": {"domain": [[0, 1], [0, 1]], "coarse": [3, 3],
                 "refine": [2, 2], "dirichlet_axes": []},
        "field": {"kind": "constant", "value": 1.0},
        "k": 1,
    }))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_gen_field_round_trip(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "kind": "checkerboard_base", "seed": 6, "counts": [16, 16],
    }))
    out = tmp_path / "field.dat"
    assert cli.main(["gen-field", "--spec", str(spec), "--out", str(out)]) == 0
    counts, vals = field.read_field(out)
    assert list(counts) == [16, 16]
    assert np.array_equal(vals, field.checkerboard_base([16, 16], seed=6))


def test_field_file_counts_must_match_mesh(tmp_path):
    data = tmp_path / "f.dat"
    field.write_field(data, [8, 8], np.ones(64))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "kind": "single_solve",
        "mesh": {"domain": [[0, 1], [0, 1]], "coarse": [2, 2], "refine": [2, 2]},
        "field": {"kind": "file", "path": str(data)},
    }))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_metadata_echoes_resolved_config(tmp_path):
    out = tmp_path / "run"
    cli.main(["run", "--preset", "single-mini", "--out", str(out)])
    meta = json.loads((out / "metadata.json").read_text())
    cfg = cli.resolve_config("single-mini", None, str(out))
    for key, val in cfg.items():
        assert meta[key] == val
