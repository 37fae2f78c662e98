import json
import math

import numpy as np
import pytest

from symbranch import ModelParams
from symbranch.cli import main
from symbranch.config import KINDS, build_config, load_config, parse_config_text
from symbranch.core import ConfigurationError
from symbranch.harness import RunReport, run_experiment, self_duality_check
from symbranch.lattice import LatticeConfig


def test_parse_grammar():
    raw = parse_config_text("""
        # comment line
        kind = exit-dist   # trailing comment
        RHO = -0.5
        times = 1, 2 ,3
    """)
    assert raw == {"kind": "exit-dist", "rho": "-0.5", "times": "1, 2 ,3"}
    cfg = build_config(raw)
    assert cfg.rho == -0.5
    assert cfg.times == (1.0, 2.0, 3.0)
    assert cfg.seed == 0


@pytest.mark.parametrize("text", [
    "kind = lyapunov\nkind = lyapunov",
    "kind lyapunov",
    "kind = lyapunov\n9x = 1",
    "kind = lyapunov\nrho =",
    "kind = lyapunov\ncolour = 1",
    "kind = lyapunov\nrho = 2",
    "kind = lyapunov\nkappa = 0",
    "kind = lyapunov\nrho = nan",
    "kind = lyapunov\nreplicas = 1.5",
    "kind = lyapunov\ntimes = 3, 1",
    "kind = lyapunov\nestimator = magic",
    "kind = lyapunov\nsvg = maybe",
    "kind = lyapunov\ndecay_bounds = 1",
    "kind = nothing",
    "rho = 0.1",
    "kind = exit-dist\nu0 = 0",
])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        load_config(text=text)


def test_hash_is_deterministic_and_sensitive(tmp_path):
    a = load_config(text="kind = exit-dist\nrho = 0.25\nseed = 3")
    b = load_config(text="seed = 3\nrho=0.25\nkind=exit-dist")
    c = load_config(text="kind = exit-dist\nrho = 0.25\nseed = 4")
    assert a.hash == b.hash
    assert a.hash != c.hash
    assert len(a.hash) == 64
    p = tmp_path / "c.cfg"
    p.write_text("kind = exit-dist\nrho = 0.25\nseed = 3\n")
    assert load_config(p).hash == a.hash
    assert load_config(p, seed=4).hash == c.hash
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.cfg")


def test_every_kind_has_a_subcommand():
    from symbranch.harness import RUNNERS

    assert set(RUNNERS) == set(KINDS)


def test_cli_pass_and_outputs(tmp_path, capsys):
    out = tmp_path / "cc"
    assert main(["critical-curve", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.count("[PASS]") == 3
    lines = (out / "critical_curve.csv").read_text().splitlines()
    assert lines[:2] == ["# schema=1", "rho,p_of_rho"]
    rep = json.loads((out / "report.json").read_text())
    assert rep["runs"][0]["passed"] is True
    assert rep["runs"][0]["provenance"]["config_hash"]


def test_cli_failure_exit_code(tmp_path):
    out = tmp_path / "ex"
    code = main(["exit-dist", "--out", str(out), "--replicas", "200", "--set", "dt=1e-3",
                 "--set", "tol_ks=1e-6", "--quiet"])
    assert code == 1
    rep = json.loads((out / "report.json").read_text())["runs"][-1]
    assert not rep["passed"]
    assert any(not c["passed"] for c in rep["checks"])


def test_cli_config_errors(tmp_path, capsys):
    assert main(["no-such-kind"]) == 2
    assert main([]) == 2
    assert main(["exit-dist", "--set", "colour=1"]) == 2
    assert main(["exit-dist", "--set", "broken"]) == 2
    cfg = tmp_path / "c.cfg"
    cfg.write_text("kind = lyapunov\n")
    assert main(["exit-dist", "--config", str(cfg)]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_module_error_lands_in_report(tmp_path):
    cfg = load_config(kind="lattice-moments", side="8", dt="0.5", out=str(tmp_path))
    rep = run_experiment(cfg)
    assert rep.exit_code == 1
    assert "ConfigurationError" in rep.error
    assert json.loads((tmp_path / "report.json").read_text())["runs"][0]["error"]


def test_reruns_are_byte_identical_and_reports_append(tmp_path):
    args = ["exit-dist", "--out", str(tmp_path), "--replicas", "300", "--set", "dt=1e-3",
            "--seed", "5", "--quiet"]
    main(args)
    first = (tmp_path / "exit_samples.csv").read_bytes()
    main(args)
    assert (tmp_path / "exit_samples.csv").read_bytes() == first
    runs = json.loads((tmp_path / "report.json").read_text())["runs"]
    assert len(runs) == 2
    assert runs[0]["provenance"]["config_hash"] == runs[1]["provenance"]["config_hash"]
    main(args[:-2] + ["7", "--quiet"])
    assert (tmp_path / "exit_samples.csv").read_bytes() != first


def test_report_append_rejects_foreign_file(tmp_path):
    p = tmp_path / "report.json"
    p.write_text("not json")
    rep = RunReport("critical-curve", {}, "0" * 64, 0)
    with pytest.raises(ConfigurationError):
        rep.append_to(p)


def test_svg_output(tmp_path):
    assert main(["critical-curve", "--out", str(tmp_path), "--set", "svg=true", "--quiet"]) == 0
    svg = (tmp_path / "critical_curve.svg").read_text()
    assert svg.lstrip().startswith("<svg") or svg.lstrip().startswith("<?xml")
    assert "<polyline" in svg


def test_self_duality_at_time_zero_is_exact():
    cfg = LatticeConfig(1, 16)
    res = self_duality_check(ModelParams(0.3, 1.0), cfg, 0.0, 10)
    exact = math.exp(-2.0 * math.sqrt(0.7))
    for est in (res.lhs_re, res.rhs_re):
        assert abs(est.mean - exact) <= 1e-12
    assert res.lhs_im.mean == 0.0 and res.rhs_im.mean == 0.0
    assert res.z_real == 0.0


def test_self_duality_asymmetric_data():
    cfg = LatticeConfig(1, 6)
    ut = np.zeros(6)
    vt = np.zeros(6)
    ut[0], vt[1] = 0.4, 0.2
    res = self_duality_check(ModelParams(0.0, 1.0), cfg, 0.5, 4000, rng=3, u_tilde=ut, v_tilde=vt,
                             dt=0.01)
    # the right side pairs against (1, 1), whose difference vanishes
    assert res.rhs_im.se == 0.0 and res.rhs_im.mean == 0.0
    assert res.lhs_im.se > 0.0
    assert res.z_imag <= 3.0
    assert res.z_real <= 3.0
    d = res.as_dict()
    assert set(d) >= {"T", "lhs_re", "rhs_re"}


def test_self_duality_rejects_degenerate_rho():
    with pytest.raises(ConfigurationError):
        self_duality_check(ModelParams(1.0, 1.0), LatticeConfig(1, 4), 0.1, 10)


def test_dual_moments_kind_single_site(tmp_path):
    cfg = load_config(kind="dual-moments", rho="0.5", n="2", m="0", t="1", replicas="2000",
                      estimator="conditional", out=str(tmp_path))
    rep = run_experiment(cfg)
    assert rep.passed
    names = [c.name for c in rep.checks]
    assert any("closed form" in n for n in names)
