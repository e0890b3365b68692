import csv
import subprocess
import sys

import numpy as np
import pytest

from randers_eikonal.cli import main
from randers_eikonal.fields import point_sources, read_field, write_field
from randers_eikonal.inversion import piecewise_isotropic


def _kv(text):
    out = {}
    for line in text.strip().splitlines():
        for tok in line.split():
            k, _, v = tok.partition("=")
            out[k] = v
    return out


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def problem(tmp_path):
    N = 21
    x = np.arange(N)[None, :] * np.ones((N, 1))
    g = 1.0 + 0.5 * (x >= N // 2)
    write_field(tmp_path / "m.rfek", [g, 0.1 * np.ones((N, N)), g])
    write_field(tmp_path / "b.rfek", [0.2 * np.ones((N, N)), np.zeros((N, N))])
    write_field(tmp_path / "s.rfek", [point_sources((N, N), [(10, 10)]).astype(float)])
    return tmp_path


def test_solve_sweep_and_jacobi_agree(problem, capsys):
    p = problem
    common = ["solve", "--metric", str(p / "m.rfek"), "--drift", str(p / "b.rfek"),
              "--sources", str(p / "s.rfek"), "--tol", "1e-10"]
    assert main(common + ["--out", str(p / "T1.rfek")]) == 0
    kv = _kv(capsys.readouterr().out)
    assert int(kv["iters"]) >= 1
    assert main(common + ["--out", str(p / "T2.rfek"), "--solver", "jacobi"]) == 0
    _, (T1,) = read_field(p / "T1.rfek")
    _, (T2,) = read_field(p / "T2.rfek")
    assert T1[10, 10] == 0.0
    np.testing.assert_allclose(T1, T2, atol=1e-9)


def test_solve_dimension_mismatch(problem, capsys):
    write_field(problem / "s_small.rfek", [point_sources((5, 5), [(2, 2)]).astype(float)])
    code = main(["solve", "--metric", str(problem / "m.rfek"), "--sources",
                 str(problem / "s_small.rfek"), "--out", str(problem / "T.rfek")])
    assert code == 2
    assert "dimension mismatch" in capsys.readouterr().err


def test_solve_missing_file(tmp_path, capsys):
    code = main(["solve", "--metric", str(tmp_path / "none.rfek"), "--sources",
                 str(tmp_path / "none.rfek"), "--out", str(tmp_path / "T.rfek")])
    assert code == 2


def test_solve_not_converged(problem, capsys):
    code = main(["solve", "--metric", str(problem / "m.rfek"), "--sources", str(problem / "s.rfek"),
                 "--out", str(problem / "T.rfek"), "--max-iters", "1", "--solver", "jacobi"])
    assert code == 3


@pytest.mark.parametrize("case", ["iso", "drift"])
def test_gradcheck_passes(case, capsys):
    assert main(["gradcheck", "--case", case, "--points", "5", "--size", "21"]) == 0
    kv = _kv(capsys.readouterr().out)
    assert kv["result"] == "PASS"
    assert int(kv["points"]) == 5


def test_gradcheck_rejects_zero_points(capsys):
    assert main(["gradcheck", "--points", "0"]) == 2


def test_convergence_needs_three_sizes(tmp_path, capsys):
    assert main(["convergence", "--sizes", "50", "--out", str(tmp_path / "c.csv")]) == 2
    assert main(["convergence", "--sizes", "25,x", "--out", str(tmp_path / "c.csv")]) == 2


def test_convergence_isotropic(tmp_path, capsys):
    out = tmp_path / "c.csv"
    assert main(["convergence", "--sizes", "25,50,100", "--out", str(out)]) == 0
    alpha = float(_kv(capsys.readouterr().out)["alpha"])
    assert 0.5 <= alpha <= 0.9
    rows = _rows(out)
    assert rows[0][0] == "N" and len(rows) == 4


def test_scenario_terrain_flat(tmp_path, capsys):
    pre = str(tmp_path / "t")
    assert main(["scenario", "--kind", "terrain", "--size", "30", "--alpha", "0",
                 "--out-prefix", pre]) == 0
    _, (g11, g12, g22) = read_field(pre + "_metric.rfek")
    assert np.all(g11 == 1) and np.all(g22 == 1) and np.all(g12 == 0)
    _, (T,) = read_field(pre + "_arrival.rfek")
    assert np.all(np.isfinite(T))


def test_scenario_sensitivity_csv(tmp_path, capsys):
    pre = str(tmp_path / "s")
    assert main(["scenario", "--kind", "sensitivity", "--size", "40", "--out-prefix", pre]) == 0
    rows = _rows(pre + "_report.csv")
    assert rows[0] == ["noise_level", "rel_max", "rel_l2"]
    errs = [float(r[1]) for r in rows[1:]]
    assert errs[0] == 0.0
    assert all(a < b for a, b in zip(errs, errs[1:]))


def test_scenario_unknown_kind(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["scenario", "--kind", "volcano", "--out-prefix", str(tmp_path / "v")])
    assert exc.value.code == 2


def test_bench(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--sizes", "20,40", "--repeat", "1", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["N", "iterations", "median_time"]
    assert [r[0] for r in rows[1:]] == ["20", "40"]
    assert main(["bench", "--repeat", "0", "--out", str(out)]) == 2


def test_observe_then_invert(tmp_path, capsys):
    N = 16
    write_field(tmp_path / "truth.rfek", [piecewise_isotropic(N)[0]])
    pre = str(tmp_path / "obs")
    assert main(["observe", "--truth", str(tmp_path / "truth.rfek"), "--at", "8:8", "3:12",
                 "--density", "0.5", "--out-prefix", pre]) == 0
    capsys.readouterr()
    out = str(tmp_path / "rec")
    assert main(["invert", "--obs", pre + "_0.rfek", pre + "_1.rfek", "--truth",
                 str(tmp_path / "truth.rfek"), "--iters", "15", "--out-prefix", out]) == 0
    kv = _kv(capsys.readouterr().out)
    assert int(kv["iters"]) == 15
    assert float(kv["rel_error"]) < 0.5
    hist = _rows(out + "_history.csv")
    assert hist[0] == ["iter", "loss", "rel_error"]
    assert float(hist[-1][1]) < float(hist[1][1])
    _, ch = read_field(out + "_metric.rfek")
    assert len(ch) == 3 and ch[0].shape == (N, N)


def test_console_module_runs():
    r = subprocess.run([sys.executable, "-m", "randers_eikonal.cli", "--help"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "solve" in r.stdout
