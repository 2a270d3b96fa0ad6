import csv
import json

import numpy as np
import pytest

from fera.cli import main
from fera.config import load_config
from fera.io import load_tensor
from fera.objective import ConfigError
from fera.svg import parse_series

SMALL = ["data.n_train=16", "data.n_val=4", "pretrain.steps=4", "train.steps=3", "train.batch=2",
         "train.val_repeats=1", "sampler.steps=5", "sampler.n_samples=2", "analysis.n_seeds=2",
         "analysis.n_noise_draws=8", "schedule.T=100", "data.size=16"]


def _args(cmd, out, *extra, seed=0):
    argv = [cmd, "--out", str(out), "--seed", str(seed)]
    for s in SMALL + list(extra):
        argv += ["--set", s]
    return argv


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_unknown_key_names_the_key(tmp_path):
    with pytest.raises(ConfigError, match="train.lrr"):
        load_config(None, ["train.lrr=1"])
    ini = tmp_path / "c.ini"
    ini.write_text("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(ini)
    with pytest.raises(ConfigError, match="train.M"):
        load_config(None, ["train.M=three"])


def test_override_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nlr = 0.5\nM = 2\n[run]\nseed = 3\n")
    cfg = load_config(ini, ["train.lr=0.25"])
    assert cfg["train.lr"] == 0.25 and cfg["train.M"] == 2 and cfg.seed == 3
    assert load_config(ini, [], seed=9).seed == 9
    assert load_config(None)["train.lr"] == 1e-3


def test_resolved_config_round_trips(tmp_path):
    cfg = load_config(None, ["ablate.seeds=0,1", "train.layers=1,2", "filter.kappa=0.5"])
    path = cfg.write(tmp_path / "r.ini")
    again = load_config(path)
    assert again.to_ini() == cfg.to_ini()
    assert again["ablate.seeds"] == (0, 1) and again["train.layers"] == (1, 2)
    tc = again.train_config("pretrain")
    assert tc.kappa == 0.5 and tc.steps == again["pretrain.steps"]


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "train.nope=1"]) == 2
    assert "train.nope" in capsys.readouterr().err


def test_analyze_outputs(tmp_path):
    assert main(_args("analyze", tmp_path)) == 0
    rows = _csv(tmp_path / "evolution.csv")
    assert rows[0] == ["t", "alpha_bar", "e1", "e2", "e3"] and len(rows) == 102
    e = np.array(rows[1:], dtype=float)
    assert e[0, 2] > e[-1, 2]  # low band dominates the clean field
    np.testing.assert_allclose(e[:, 2:].sum(axis=1), 1.0, atol=1e-6)
    series = parse_series((tmp_path / "evolution.svg").read_text())
    assert series["e1"] == [r[2] for r in rows[1:]]
    assert series["x"] == [r[0] for r in rows[1:]]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok" and not manifest["partial"]
    assert "config.ini" in manifest["files"] and "evolution.csv" in manifest["files"]


def test_analyze_reads_input_tensor(tmp_path):
    from fera.io import save_tensor
    x = np.random.default_rng(0).standard_normal((1, 16, 16)).astype(np.float32)
    save_tensor(tmp_path / "x.fera", x)
    assert main(_args("analyze", tmp_path / "o", f"data.input={tmp_path / 'x.fera'}")) == 0


def test_snr_crossings(tmp_path):
    assert main(_args("snr", tmp_path, "filter.n_bands=2")) == 0
    rows = _csv(tmp_path / "crossings.csv")
    assert rows[0] == ["seed", "t1", "t2"] and len(rows) == 3
    snr = _csv(tmp_path / "snr.csv")
    assert snr[0] == ["t", "alpha_bar", "snr1", "snr2"] and len(snr) == 102


def test_snr_flat_spectrum_crossings_close(tmp_path):
    assert main(_args("snr", tmp_path, "data.gamma=0", "data.size=32", "schedule.T=1000",
                      "analysis.n_seeds=4", "analysis.n_noise_draws=8")) == 0
    cross = np.array(_csv(tmp_path / "crossings.csv")[1:], dtype=float)[:, 1:]
    assert np.all(cross.max(axis=1) - cross.min(axis=1) <= 0.05 * 1000)


def test_train_and_sample(tmp_path):
    out = tmp_path / "train"
    assert main(_args("train", out)) == 0
    for name in ("pretrain.csv", "train.csv", "base.ckpt", "adapted.ckpt", "report.csv"):
        assert (out / name).exists()
    report = _csv(out / "report.csv")
    assert [r[0] for r in report[1:]] == ["pretrain", "adapt"]
    s_out = tmp_path / "sample"
    assert main(_args("sample", s_out, f"sampler.checkpoint={out / 'adapted.ckpt'}")) == 0
    rows = _csv(s_out / "samples.csv")
    assert rows[0][-1] == "spectral_slope" and len(rows) == 3
    x = load_tensor(s_out / "samples" / "sample_000.fera")
    assert x.shape == (1, 16, 16) and np.isfinite(x).all()


def test_route_compare_discrete_switches_once(tmp_path):
    assert main(_args("route-compare", tmp_path, "sampler.steps=12")) in (0, 1)
    disc = np.array(_csv(tmp_path / "trace_discrete.csv")[1:], dtype=float)
    alpha = disc[:, -3:]
    assert len(disc) == 12
    jumps = np.abs(np.diff(alpha, axis=0)).max(axis=1)
    assert np.count_nonzero(jumps) == 2  # three experts on even intervals: two switches
    summary = _csv(tmp_path / "route_compare.csv")
    assert summary[2][0] == "discrete" and float(summary[2][1]) == 1.0
    svg = (tmp_path / "heatmap_soft.svg").read_text()
    assert svg.count("<rect") >= 3 * 12


def test_route_compare_two_experts_single_switch(tmp_path):
    main(_args("route-compare", tmp_path, "sampler.steps=10", "train.M=2"))
    alpha = np.array(_csv(tmp_path / "trace_discrete.csv")[1:], dtype=float)[:, -2:]
    assert np.count_nonzero(np.abs(np.diff(alpha, axis=0)).max(axis=1)) == 1


def test_ablate_grid(tmp_path):
    assert main(_args("ablate", tmp_path, "ablate.experts=1,2", "ablate.lambda_f=0,0.1")) == 0
    rows = _csv(tmp_path / "ablate.csv")
    assert len(rows) == 5
    assert [(r[1], r[2]) for r in rows[1:]] == [("1", "0"), ("1", "0.1"), ("2", "0"), ("2", "0.1")]
    assert not (tmp_path / "routing_grid.csv").exists()


def test_ablate_routing_grid(tmp_path, monkeypatch):
    monkeypatch.setenv("FERA_THREADS", "2")
    modes = "fei_soft,fei_hard,timestep_soft,timestep_hard"
    assert main(_args("ablate", tmp_path, f"ablate.routing={modes}")) == 0
    t3 = _csv(tmp_path / "routing_grid.csv")
    assert [r[0] for r in t3[1:]] == modes.split(",")
    monkeypatch.setenv("FERA_THREADS", "1")
    assert main(_args("ablate", tmp_path / "serial", f"ablate.routing={modes}")) == 0
    assert (tmp_path / "ablate.csv").read_bytes() == (tmp_path / "serial" / "ablate.csv").read_bytes()


def test_gradcheck_command(tmp_path):
    assert main(_args("gradcheck", tmp_path)) == 0
    rows = _csv(tmp_path / "gradcheck.csv")
    assert all(r[2] == "1" for r in rows[1:]) and len(rows) >= 8


def test_failure_sets_partial_manifest(tmp_path):
    missing = tmp_path / "nope.ckpt"
    assert main(_args("sample", tmp_path, f"sampler.checkpoint={missing}")) == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["partial"] and manifest["status"] == "error" and manifest["error"]


@pytest.mark.parametrize("cmd", ["analyze", "snr", "train", "sample", "route-compare"])
def test_rerun_is_byte_identical(tmp_path, cmd):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(_args(cmd, a, seed=5)) == main(_args(cmd, b, seed=5))
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert any(str(f).endswith(".csv") for f in files)
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
