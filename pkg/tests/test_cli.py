import numpy as np

from elastosheet.cli import main


def write_cfg(tmp_path, **over):
    vals = dict(n=16, m=8, dt="5e-3", t_end="2e-2", family="shear_elastic",
                U=0.2, f0_amp=0.02, f0_mode=2, outdir=tmp_path / "out")
    vals.update(over)
    path = tmp_path / "sim.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in vals.items()))
    return str(path)


def test_cli_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert "dn-closed-form" in out and "lambda-oracle" in out


def test_cli_run_then_residual(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["run", cfg]) == 0
    assert (tmp_path / "out" / "diagnostics.csv").exists()
    assert main(["residual", cfg, "snap_final"]) == 0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ":" in ln]
    vals = {ln.split(":")[0]: float(ln.split(":")[1]) for ln in lines[-2:]}
    assert set(vals) == {"minus", "plus"}
    assert all(v < 1e-3 for v in vals.values())


def test_cli_stability_tables(tmp_path, capsys):
    cfg = write_cfg(tmp_path, f0_amp=0.0)
    assert main(["stability", cfg, "--kmax", "3"]) == 0
    out = capsys.readouterr().out
    assert "Lambda_min        0.96" in out
    assert "hyperbolic       True" in out
    # oscillation frequency of mode 1 is sqrt(0.96)
    row = [ln for ln in out.splitlines() if ln.strip().startswith("1 ")][0]
    assert abs(abs(float(row.split()[2])) - np.sqrt(0.96)) < 1e-4


def test_cli_stability_reports_unstable(tmp_path, capsys):
    path = tmp_path / "kh.cfg"
    path.write_text("n = 16\nm = 8\nfamily = kh\nU = 0.5\n")
    assert main(["stability", str(path)]) == 0
    out = capsys.readouterr().out
    assert "Lambda_min       -0.25" in out
    assert "hyperbolic       False" in out


def test_cli_error_paths(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.cfg")]) == 1
    err = capsys.readouterr().err
    assert "error:" in err and "not found" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("n = 16\nm = 8\nfamily = kh\nU = 0.5\n")
    # unstable initial data is refused by run (but not by stability)
    assert main(["run", str(bad)]) == 1
    assert "stability margin" in capsys.readouterr().err
