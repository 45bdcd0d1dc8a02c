import numpy as np
import pytest

from seisoed import cli
from seisoed import design as D
from seisoed.design import (DesignSpec, laplace_eig, load_config, parse_config,
                            per_parameter_sweep, read_csv_rows, run_scenario, scenario_designs)
from seisoed.errors import ConfigError, NumericalError

DESK = """\
# small layered problem
x1_min = -6000
x1_max = 6000
x2_min = -4000
h = 200
dt = 0.025
T = 1.0
interval = -4000, 4000
mc_samples = 6
receivers = -2000, 0, 2000
"""

SCENARIO_III = """\
x1_min = -10000
x1_max = 10000
x2_min = -5000
h = 200
dt = 0.025
T = 2.0
mc_samples = 40
scenario = III
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


# --------------------------------------------------------------------------
# configuration


def test_minimal_config_defaults():
    cfg = parse_config("h = 200\ndt = 0.025\nT = 8\n")
    assert cfg.N_t == 321
    assert cfg.extents == (-10000.0, 10000.0, -15000.0, 0.0)
    assert cfg.free == list(range(7))
    assert cfg.estimator == "laplace" and cfg.mc_samples == 500
    assert np.array_equal(cfg.noise.cov, 1e-4 * np.eye(2))
    assert "T = 8" in cfg.canonical() and len(cfg.digest()) == 16


def test_cfl_violation_reports_limit():
    with pytest.raises(ConfigError, match=r"line 2: .*CFL limit 0\.0259"):
        parse_config("h = 200\ndt = 0.032\nT = 8\n")


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"line 3: unknown key 'foo'"):
        parse_config("h = 200\ndt = 0.025\nfoo = 1\nT = 8\n")


def test_missing_key():
    with pytest.raises(ConfigError, match="missing required key 'T'"):
        parse_config("h = 200\ndt = 0.025\n")


@pytest.mark.parametrize("text,pattern", [
    ("h = 200\nh = 100\ndt = 0.025\nT = 8\n", "line 2: duplicate key 'h'"),
    ("h = 200\ndt = abc\nT = 8\n", "line 2: bad value for 'dt'"),
    ("h = 200\ndt = 0.025\nT = 8\nnonsense\n", "line 4: expected"),
    ("h = 400\ndt = 0.025\nT = 8\n", "line 1: .*divid|line 1: .*multiple"),
    ("h = 200\ndt = 0.025\nT = 8\nreceivers = 0, 20000\n", "line 4: receiver"),
    ("h = 200\ndt = 0.025\nT = 8\nx2_min = -3400\n", "3h"),
    ("h = 200\ndt = 0.025\nT = 8\nestimator = magic\n", "line 4: 'estimator'"),
    ("h = 200\ndt = 0.025\nT = 8\nfree_params = x1s, bogus\n", "line 4: unknown parameter"),
    ("h = 200\ndt = 0.025\nT = 8\nfree_params = x2s\nnested_marginalize = m11\n",
     "line 5: nested_marginalize"),
    ("h = 200\ndt = 0.025\nT = 8\nprior_low = 0, 0\n", "line 4: 'prior_low' needs 7"),
])
def test_validation_errors(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_replace_revalidates():
    cfg = parse_config(DESK)
    assert cfg.replace(seed=5).seed == 5
    with pytest.raises(ConfigError):
        cfg.replace(estimator="magic")


# --------------------------------------------------------------------------
# designs


def test_design_spec_symmetric():
    d = DesignSpec(5, 1000.0)
    assert np.array_equal(d.positions, [-2000.0, -1000.0, 0.0, 1000.0, 2000.0])
    assert np.array_equal(DesignSpec(3, 8000.0).positions, [-8000.0, 0.0, 8000.0])
    assert np.array_equal(DesignSpec(4, 10.0).positions, -DesignSpec(4, 10.0).positions[::-1])
    with pytest.raises(ConfigError):
        DesignSpec(0, 1.0)


def test_scenario_lists():
    cfg = parse_config("h = 200\ndt = 0.025\nT = 8\n")
    one = scenario_designs(cfg, "I")
    assert [d.N_R for d in one] == [3, 5, 9, 17, 41, 81]
    assert all(d.positions[0] == -8000.0 and d.positions[-1] == 8000.0 for d in one)
    two = scenario_designs(cfg, "II")
    assert [d.N_R for d in two] == list(range(1, 20, 2)) and {d.d_R for d in two} == {1000.0}
    three = scenario_designs(cfg, "III")
    assert [d.d_R for d in three] == [200.0 * k for k in range(1, 21)]
    assert {d.N_R for d in three} == {5}
    with pytest.raises(ConfigError):
        scenario_designs(cfg)


# --------------------------------------------------------------------------
# sweeps


def test_single_point_sweep_equals_library_call(tmp_path):
    cfg = parse_config(DESK + "scenario = II\nsweep_nr = 3\n")
    rows = run_scenario(cfg, tmp_path)
    direct = laplace_eig(cfg, [DesignSpec(3, 1000.0)])[0].estimate
    assert len(rows) == 1
    assert float(rows[0][4]) == direct.value and float(rows[0][5]) == direct.stderr
    header, columns, _ = read_csv_rows(tmp_path / "sweep_II.csv")
    assert columns == D.SWEEP_COLUMNS
    assert f"config_sha256={cfg.digest()}" in header and "seed=0" in header
    assert any(h.startswith("seisoed ") for h in header)


def test_sweep_restart_skips_completed(tmp_path, monkeypatch):
    cfg = parse_config(DESK + "scenario = II\nsweep_nr = 1, 3\n")
    first = run_scenario(cfg, tmp_path)
    before = (tmp_path / "sweep_II.csv").read_bytes()

    def boom(*a, **k):
        raise AssertionError("completed design points were recomputed")

    monkeypatch.setattr(D, "evaluate_designs", boom)
    assert run_scenario(cfg, tmp_path) == [[str(c) for c in r] for r in first]
    assert (tmp_path / "sweep_II.csv").read_bytes() == before
    # a changed configuration invalidates the stored rows
    with pytest.raises(AssertionError):
        run_scenario(cfg.replace(seed=1), tmp_path)


def test_sweep_continues_after_failure(tmp_path, monkeypatch):
    cfg = parse_config(DESK + "scenario = II\nsweep_nr = 1, 3\n")

    def failing(*a, **k):
        raise NumericalError("synthetic failure")

    monkeypatch.setattr(D, "laplace_eig", failing)
    rows = run_scenario(cfg, tmp_path)
    assert [r[-1] for r in rows] == ["failed: synthetic failure"] * 2
    monkeypatch.undo()
    rows = run_scenario(cfg, tmp_path)
    assert [r[-1] for r in rows] == ["ok", "ok"]


def test_scenario_three_interior_maximum_and_per_param(tmp_path):
    cfg = parse_config(SCENARIO_III)
    rows = per_parameter_sweep(cfg, tmp_path / "a")
    q = np.array([[float(v) for v in r[2:9]] for r in rows])
    assert np.all(np.isfinite(q))
    k = int(np.argmax(q[:, 1]))
    assert 0 < k < len(rows) - 1
    per_parameter_sweep(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "per_param.csv").read_bytes() == \
        (tmp_path / "b" / "per_param.csv").read_bytes()


# --------------------------------------------------------------------------
# command line


def test_cli_eig_and_determinism(tmp_path, capsys):
    path = write_cfg(tmp_path, DESK)
    for out in ("r1", "r2"):
        assert cli.main(["eig", "--config", str(path), "--out", str(tmp_path / out)]) == 0
    assert "EIG=" in capsys.readouterr().out
    a, b = (tmp_path / "r1" / "eig.csv").read_bytes(), (tmp_path / "r2" / "eig.csv").read_bytes()
    assert a == b
    assert cli.main(["eig", "--config", str(path), "--out", str(tmp_path / "r3"),
                     "--seed", "4"]) == 0
    assert (tmp_path / "r3" / "eig.csv").read_bytes() != a


def test_cli_simulate_outputs(tmp_path):
    path = write_cfg(tmp_path, DESK)
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "s")]) == 0
    header, columns, rows = read_csv_rows(tmp_path / "s" / "simulate.csv")
    assert columns == ["receiver", "x1", "component", "step", "t", "u"]
    assert len(rows) == 3 * 2 * 41
    assert (tmp_path / "s" / "receivers.bin").stat().st_size > 0


def test_cli_hessian_writes_condition(tmp_path):
    path = write_cfg(tmp_path, DESK + "estimator = laplace2\n")
    assert cli.main(["hessian", "--config", str(path), "--out", str(tmp_path / "h")]) == 0
    for name in ("condition.csv", "H1.csv", "H1_scaled.csv", "H2.csv"):
        assert (tmp_path / "h" / name).exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, DESK + "foo = 1\n")
    assert cli.main(["eig", "--config", str(path)]) == 2
    assert "foo" in capsys.readouterr().err
    assert cli.main(["eig", "--config", str(tmp_path / "none.cfg")]) == 2


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    # the wavefront cannot reach a distant receiver in four steps
    text = DESK.replace("T = 1.0", "T = 0.1").replace("receivers = -2000, 0, 2000",
                                                      "receivers = 5800")
    path = write_cfg(tmp_path, text)
    assert cli.main(["hessian", "--config", str(path), "--out", str(tmp_path / "h")]) == 3
    assert "unidentifiable" in capsys.readouterr().err


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])


def test_parallel_sweep_matches_serial(tmp_path):
    cfg = parse_config(DESK + "scenario = II\nsweep_nr = 1, 3, 5\n")
    run_scenario(cfg, tmp_path / "serial")
    run_scenario(cfg.replace(workers=2), tmp_path / "parallel")
    assert (tmp_path / "serial" / "sweep_II.csv").read_bytes() == \
        (tmp_path / "parallel" / "sweep_II.csv").read_bytes()
