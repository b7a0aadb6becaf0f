import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from impact_hedger.cli import EXIT_CONFIG, load_config, main, run

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def test_load_config_round_trip():
    cfg = load_config(SCENARIOS / "exponential.ini")
    assert cfg.driver_kind == "drifted_quadratic"
    assert cfg.n_steps == 200
    assert cfg.y_grid.size == 121
    echo = cfg.echo()
    assert echo["market"]["eta"] == 0.3


def test_missing_config_exits_2(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[driver]\nkind = warp\n[utility]\ngamma_a = 2\n[numerics]\nn_steps = 10\n")
    assert main(["gexp", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_gexp_command(tmp_path):
    report = run("gexp", SCENARIOS / "entropic_gexp.ini", tmp_path)
    assert report.exit_code == 0
    assert report.results["pi_root"] == pytest.approx(-0.5, abs=0.01)
    body = (tmp_path / "gexp.csv").read_text().splitlines()
    assert body[0] == "level,node,t,W,pi,z"
    # one row per node of the full lattice
    assert len(body) - 1 == sum(k + 1 for k in range(201))
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["exit_code"] == 0


def test_price_command_risk_neutral_rows(tmp_path):
    cfg = tmp_path / "rn.ini"
    cfg.write_text(
        "[driver]\nkind = zero\n"
        "[utility]\nkind = cara\ngamma_a = 2.0\n"
        "[market]\npayoff = brownian\n"
        "[numerics]\nn_steps = 50\n"
        "[price]\nz_values = -0.5,0.0,0.5\ny_values = 0.5,1.0\n"
        "[outputs]\nformats = csv,json\n"
    )
    report = run("price", cfg, tmp_path)
    assert report.exit_code == 0
    rows = (tmp_path / "price.csv").read_text().splitlines()[1:]
    for row in rows:
        t, z, y, p = (float(v) for v in row.split(","))
        assert p == pytest.approx(y * 0.0, abs=1e-12)  # E[S] = 0 for the Brownian payoff


def test_solve_command_desk_values(tmp_path):
    report = run("solve", SCENARIOS / "exponential.ini", tmp_path)
    assert report.exit_code == 0
    assert report.results["z_star"] == pytest.approx(0.1, abs=1e-3)
    assert report.results["zeta0"] == pytest.approx(0.015, abs=1e-3)
    assert report.flags["non_convergence"] is False
    header = (tmp_path / "solve.csv").read_text().splitlines()[0]
    assert header == "level,node,x,zeta,m,theta,h"


def test_closedform_command(tmp_path):
    report = run("closedform", SCENARIOS / "exponential.ini", tmp_path)
    assert report.exit_code == 0
    assert report.results["lambda"] == pytest.approx(2.0 * np.exp(-0.03), abs=1e-9)
    assert report.results["no_trade_applicable"] is False
    assert report.results["terminal_wealth_gap"] <= 1e-6


def test_value_command(tmp_path):
    report = run("value", SCENARIOS / "exponential.ini", tmp_path)
    assert report.exit_code == 0
    assert report.results["value_at_x0"] == pytest.approx(-np.exp(-0.03), abs=1e-3)
    header = (tmp_path / "value.csv").read_text().splitlines()[0]
    assert header == "t,x,V,Vx,Vxx,upsilon,theta_hat,residual"


def test_verify_no_trade_scenario(tmp_path):
    report = run("verify", SCENARIOS / "no_trade.ini", tmp_path)
    assert report.exit_code == 0
    roots = report.results["theta_roots"]
    for route in ("closedform", "cara", "picard"):
        assert roots[route] == pytest.approx(0.0, abs=1e-12)
    assert report.results["max_route_gap"] <= 1e-12


def test_verify_exponential_scenario_routes_agree(tmp_path):
    report = run("verify", SCENARIOS / "exponential.ini", tmp_path)
    assert report.exit_code == 0
    assert report.results["max_route_gap"] <= 1e-3
    for name in ("verify_closedform.csv", "verify_cara.csv", "verify_picard.csv"):
        assert (tmp_path / name).exists()


def test_outputs_are_finite(tmp_path):
    run("solve", SCENARIOS / "exponential.ini", tmp_path)
    for line in (tmp_path / "solve.csv").read_text().splitlines()[1:]:
        assert all(np.isfinite(float(v)) for v in line.split(","))


def _run_cli_subprocess(command, config, out_dir, threads):
    env = dict(os.environ, THREADS=str(threads))
    proc = subprocess.run(
        [sys.executable, "-m", "impact_hedger.cli", command, "--config", str(config), "--out", str(out_dir)],
        capture_output=True,
        env=env,
        text=True,
    )
    return proc


def test_verify_byte_identical_across_threads(tmp_path):
    outs = {}
    for threads in (1, 4):
        for rep in (0, 1):
            out = tmp_path / f"t{threads}_r{rep}"
            proc = _run_cli_subprocess("verify", SCENARIOS / "no_trade.ini", out, threads)
            assert proc.returncode == 0, proc.stderr
            outs[(threads, rep)] = {
                p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))
            }
    reference = outs[(1, 0)]
    assert reference  # at least one CSV produced
    for key, files in outs.items():
        assert files.keys() == reference.keys()
        for name, blob in files.items():
            assert blob == reference[name], f"{name} differs for {key}"


def test_invalid_threads_rejected(tmp_path):
    proc = _run_cli_subprocess("gexp", SCENARIOS / "entropic_gexp.ini", tmp_path, "many")
    assert proc.returncode == EXIT_CONFIG


def test_nonconvergence_exits_3_with_partial_outputs(tmp_path):
    cfg = tmp_path / "stall.ini"
    cfg.write_text(
        "[driver]\nkind = drifted_quadratic\ngamma = 1.0\neta = 0.3\n"
        "[utility]\nkind = cara\ngamma_a = 2.0\n"
        "[market]\npayoff = brownian\neta = 0.3\n"
        "[numerics]\nn_steps = 50\ny_grid = -1.5:1.5:61\ntol = 1e-14\nmax_iter = 2\n"
        "[outputs]\nformats = csv,json\n"
    )
    code = main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 3
    assert (tmp_path / "o" / "solve.csv").exists()  # partial outputs written
    payload = json.loads((tmp_path / "o" / "report.json").read_text())
    assert payload["flags"]["non_convergence"] is True
    assert payload["exit_code"] == 3


def test_numeric_failure_exits_4(tmp_path):
    cfg = tmp_path / "blow.ini"
    cfg.write_text(
        "[driver]\nkind = entropic\ngamma = 200.0\n"
        "[utility]\nkind = cara\ngamma_a = 2.0\n"
        "[market]\npayoff = brownian\n"
        "[numerics]\nn_steps = 4\n"
        "[outputs]\nformats = csv,json\n"
    )
    code = main(["gexp", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 4
