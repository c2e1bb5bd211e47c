import json
import subprocess
import sys

import pytest

from anisograph import config
from anisograph.cli import main
from anisograph.pipeline import STAGES, aggregate, cache_path, run_pipeline, run_stage

AREA = ["--set", "mode='area'", "--set", "k=3"]


def test_missing_upstream_exit_code(tmp_path, capsys):
    assert main(["foliate", "--out", str(tmp_path)] + AREA) == 3
    assert "profile" in capsys.readouterr().err


def test_config_rejected_exit_code(tmp_path):
    assert main(["profile", "--out", str(tmp_path), "--set", "k=2"]) == 2
    assert main(["profile", "--out", str(tmp_path), "--set", "nope=1"]) == 2


def test_staged_commands_and_report(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["profile", "--out", out] + AREA) == 0
    assert main(["foliate", "--out", out] + AREA) == 0
    assert (tmp_path / "foliation.csv").exists() and (tmp_path / "foliate.json").exists()
    header = (tmp_path / "foliation.csv").read_text().splitlines()[0]
    assert header.startswith("tau")
    capsys.readouterr()
    # the report covers what is cached and stops at the first missing stage
    assert main(["report", "--out", out] + AREA) == 1
    last = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert last["halted_at"] == "perturb" and last["stages"] == ["profile", "foliate"]


def test_bump_family_halts_at_profile(tmp_path, capsys):
    rc = main(["run", "--out", str(tmp_path), "--set", "mode='anisotropic'",
               "--set", "integrand.kind='bump'"])
    assert rc == 1
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["halted_at"] == "profile" and rep["pass"] is False
    err = rep["stages"]["profile"]["error"]
    assert err["type"] == "InfeasibleFamily"
    assert not (tmp_path / "foliate.json").exists()


def test_emit_plots(tmp_path):
    out = str(tmp_path)
    assert main(["profile", "--out", out, "--emit-plots"] + AREA) == 0
    assert main(["foliate", "--out", out, "--emit-plots"] + AREA) == 0
    svgs = sorted(p.name for p in tmp_path.glob("*.svg"))
    assert "phase_plane.svg" in svgs and "leaves.svg" in svgs
    assert (tmp_path / "leaves.svg").read_text().lstrip().startswith("<?xml")


def test_cache_reuse_and_hash_sensitivity(tmp_path):
    cfg = config.load(overrides={"mode": "area", "k": 3})
    _, r1, _, cached1 = run_stage("profile", cfg, tmp_path)
    _, r2, secs, cached2 = run_stage("profile", cfg, tmp_path)
    assert not cached1 and cached2 and secs == 0.0 and r1 == r2
    # downstream keys do not touch upstream hashes; upstream keys propagate
    assert cache_path(cfg, "profile", tmp_path) == \
        cache_path({**cfg, "pde.omega": 0.5}, "profile", tmp_path)
    assert cache_path(cfg, "solve", tmp_path) != \
        cache_path({**cfg, "foliation.tol_ode": 1e-9}, "solve", tmp_path)


def test_report_deterministic(tmp_path):
    cfg = config.load(overrides={"mode": "area", "k": 3})
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(cfg, a, stages=STAGES[:3])
    run_pipeline(cfg, b, stages=STAGES[:3])
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "perturb.csv").read_bytes() == (b / "perturb.csv").read_bytes()
    rep = aggregate(cfg, a)
    assert list(rep.stages) == ["profile", "foliate", "perturb"]
    assert json.loads((a / "timings.json").read_text())["profile"]["cached"] is False


@pytest.mark.parametrize("args", [["--help"], ["run", "--help"]])
def test_console_entry(args):
    res = subprocess.run([sys.executable, "-m", "anisograph.cli"] + args,
                         capture_output=True, text=True)
    assert res.returncode == 0 and "usage" in res.stdout
