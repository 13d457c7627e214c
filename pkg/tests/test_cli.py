import json

import numpy as np
import pytest

from decaf import cli, config, fileio

SMALL = ["grid.nx=32", "grid.ny=32", "grid.nz=4", "grid.z0=-0.75", "train.iters=20", "train.log_every=10",
         "mlp.width=16", "mlp.n_layers=4", "tikhonov.taus=[1e-4, 1e-2, 1]"]


def _sets(extra=()):
    out = []
    for s in list(SMALL) + list(extra):
        out += ["--set", s]
    return out


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


# ---------------------------------------------------------------- config

def test_defaults_validate_and_resolve(tmp_path):
    cfg = config.RunConfig()
    assert cfg.grid.nx == 64 and cfg.setup.preset == "annular24"
    path = config.resolve(cfg, tmp_path / "o")
    assert config.load(path) == cfg


def test_unknown_keys_rejected():
    with pytest.raises(config.ConfigError, match="grid.nq"):
        config.parse({"grid": {"nq": 3}})
    with pytest.raises(config.ConfigError):
        config.parse({"bogus": {}})
    with pytest.raises(config.ConfigError):
        config.parse({"loss": {"alpha": -1}})


def test_overrides():
    cfg = config.apply_overrides(config.RunConfig(), ["loss.alpha=0.5", "setup.preset=dense89",
                                                       "encoding.thetas=[0, 0.3]"])
    assert cfg.loss.alpha == 0.5 and cfg.setup.preset == "dense89" and list(cfg.encoding.thetas) == [0, 0.3]
    with pytest.raises(config.ConfigError):
        config.apply_overrides(config.RunConfig(), ["loss.alpha"])
    with pytest.raises(config.ConfigError):
        config.apply_overrides(config.RunConfig(), ["loss.gamma=1"])


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        config.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(config.ConfigError):
        config.load(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(config.ConfigError):
        config.load(bad)


def test_setup_sections():
    ring = config.parse({"setup": {"ring": {"count": 12, "angle_deg": 30}}}).setup.build()
    assert len(ring.sources) == 12
    with pytest.raises(config.ConfigError):
        config.parse({"setup": {"preset": "annular24", "ring": {"count": 12, "angle_deg": 30}}})


# ---------------------------------------------------------------- CLI

def test_pipeline_smoke(tmp_path, capsys):
    sim, rec, tik = tmp_path / "sim", tmp_path / "rec", tmp_path / "tik.dcaf"
    assert run(capsys, "simulate", "--out", sim, *_sets())[0] == 0
    assert (sim / "phantom.dcaf").exists() and (sim / "measurements.dcam").exists()
    assert (sim / "resolved_config.json").exists()
    rc, out, _ = run(capsys, "reconstruct", "--measurements", sim / "measurements.dcam", "--out", rec, *_sets())
    assert rc == 0
    for name in ("weights.dcfw", "volume.dcaf", "train_log.csv", "resolved_config.json"):
        assert (rec / name).exists()
    header = (rec / "train_log.csv").read_text().splitlines()[0].split(",")
    assert header[:7] == ["iter", "term1", "term2", "term3", "total", "MAE", "lr"]
    rc, _, _ = run(capsys, "evaluate", "--reference", sim / "phantom.dcaf", "--estimate", rec / "volume.dcaf",
                   "--out", tmp_path / "metrics.json")
    assert rc == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert np.isfinite(metrics["ri"]["psnr_db"])
    assert run(capsys, "tikhonov", "--measurements", sim / "measurements.dcam", "--out", tik, *_sets())[0] == 0
    assert fileio.read_volume(tik).grid.shape == (4, 32, 32)

    # render at training density reproduces the reconstruct output bitwise
    rc, _, _ = run(capsys, "render", "--weights", rec / "weights.dcfw", "--out", tmp_path / "r1.dcaf", *_sets())
    assert rc == 0
    assert (tmp_path / "r1.dcaf").read_bytes() == (rec / "volume.dcaf").read_bytes()
    rc, _, _ = run(capsys, "render", "--weights", rec / "weights.dcfw", "--upsample", "2x2x2", "--export", "png",
                   "--out", tmp_path / "r2.dcaf", *_sets())
    assert rc == 0
    assert fileio.read_volume(tmp_path / "r2.dcaf").grid.shape == (7, 63, 63)
    assert list(tmp_path.glob("r2.z3.png"))

    rc, _, _ = run(capsys, "export", "--volume", rec / "volume.dcaf", "--format", "csv", "--index", 1,
                   "--out", tmp_path / "s.csv")
    assert rc == 0 and (tmp_path / "s.csv").exists()
    rc, _, _ = run(capsys, "export", "--volume", rec / "volume.dcaf", "--profile", 0, 0, 31, 31,
                   "--out", tmp_path / "p.csv")
    assert rc == 0 and (tmp_path / "p.csv").read_text().startswith("distance_px,value")


def test_evaluate_identical_inputs(tmp_path, capsys):
    assert run(capsys, "simulate", "--out", tmp_path, *_sets())[0] == 0
    rc, out, err = run(capsys, "evaluate", "--reference", tmp_path / "phantom.dcaf",
                       "--estimate", tmp_path / "phantom.dcaf")
    assert rc == 0 and "identical inputs" in err
    assert json.loads(out)["identical_inputs"] is True


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert run(capsys, "simulate", "--out", tmp_path, "--set", "grid.nq=3")[0] == cli.EXIT_CONFIG
    assert run(capsys, "reconstruct", "--config", tmp_path / "none.json", "--out", tmp_path)[0] == cli.EXIT_IO
    assert run(capsys, "render", "--weights", tmp_path / "none.dcfw", "--out", tmp_path / "x.dcaf")[0] == cli.EXIT_IO
    # measurements simulated on 32x32 do not fit a 64x64 grid
    assert run(capsys, "simulate", "--out", tmp_path / "s", *_sets())[0] == 0
    rc, _, err = run(capsys, "reconstruct", "--measurements", tmp_path / "s" / "measurements.dcam",
                     "--out", tmp_path / "r")
    assert rc == cli.EXIT_SHAPE and "dimension mismatch" in err
    rc, _, err = run(capsys, "reconstruct", "--out", tmp_path / "d", *_sets(["train.lr0=1e300"]))
    assert rc == cli.EXIT_DIVERGED, err
    monkeypatch.setenv("DECAF_THREADS", "zero")
    assert run(capsys, "simulate", "--out", tmp_path)[0] == cli.EXIT_CONFIG


def test_simulate_options(tmp_path, capsys):
    spec = tmp_path / "phantom.json"
    spec.write_text(json.dumps({"cells": [{"center": [0, 0, 0], "semi_axes": [1.0, 1.0, 0.6], "re": 0.05}]}))
    rc, _, _ = run(capsys, "simulate", "--spec", spec, "--setup", "dense89", "--noise", 0.01, "--out", tmp_path / "o",
                   *_sets())
    assert rc == 0
    assert fileio.read_measurements(tmp_path / "o" / "measurements.dcam").images.shape == (89, 32, 32)
    assert fileio.read_volume(tmp_path / "o" / "phantom.dcaf").re.max() == pytest.approx(0.05, abs=1e-7)
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert resolved["setup"]["preset"] == "dense89" and resolved["noise"]["std"] == 0.01
