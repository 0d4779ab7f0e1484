"""Command line front end.

Subcommands: run (advance a configured simulation), stability (Lambda,
principal-symbol, and flat-mode spectrum tables for a configured state),
verify (fast built-in oracle checks of the solver stack), residual (momentum
residual of a stored snapshot).  Exit codes follow the run driver: 0 ok,
2 monitor breach, 1 error or failed verification.
"""

import argparse
import sys
import warnings

import numpy as np

from .divcurl import solve_div_curl
from .dn_ops import dn_apply, dn_invert, dn_tilde
from .errors import ConfigError
from .geometry import Interface, StripGrid, flatten_map, trace
from .interface_dynamics import (
    FlatState,
    constant_traces,
    flat_state_spectrum,
    principal_symbol,
    stability_lambda,
    stability_matrix,
    weighted_velocities,
)
from .simulator import (
    init_state,
    load_config,
    load_snapshot,
    make_grid,
    momentum_residual,
    run,
    step,
)
from .spectral_core import HorizontalGrid, project_mean_zero


def _fmap(ifc, m, side):
    return flatten_map(ifc, StripGrid(ifc.grid, ifc.depth(side), m, side))


# ----------------------------------------------------------------------
# stability tables

def cmd_stability(args):
    cfg = load_config(args.config)
    cfg.instability_study = True  # reporting tool: never refuse a state
    grid = make_grid(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state = init_state(cfg, grid)
    rep = state.stability
    fluid = cfg.fluid
    print(f"Lambda_min       {rep.lambda_min: .12g}")
    print(f"hyperbolic       {rep.hyperbolic}  (threshold c0 = {fluid.c0:g})")
    print(f"argmin x         {tuple(round(float(v), 6) for v in rep.argmin_x)}")
    print(f"argmin direction {tuple(round(float(v), 6) for v in rep.argmin_phi)}")

    # recovered traces feed the symbol; axis directions are the extremes
    # reported (full angular sweeps belong to the verify suite)
    from .simulator import _maps, _recover_all, _traces  # late: cycle-free

    ifc, fmaps = _maps(cfg, grid, state.f)
    _recover_all(cfg, state, fmaps, project=False)
    traces = _traces(state)
    dirs = [("e1", np.array([1.0, 0.0]))]
    if fluid.d == 2:
        dirs.append(("e2", np.array([0.0, 1.0])))
    for name, xi in dirs:
        sym = principal_symbol(xi, traces, fluid.rho)
        print(f"symbol ({name})      min {float(np.min(sym)): .6g}   "
              f"max {float(np.max(sym)): .6g}   (negative = hyperbolic)")

    # flat-equilibrium proxy from the lid averages
    flat = FlatState(
        u_minus=state.minus.beta, F_minus=state.minus.gamma,
        u_plus=None if state.plus is None else state.plus.beta,
        F_plus=None if state.plus is None else state.plus.gamma,
        mean_f=float(state.f.mean()))
    ks = list(range(1, args.kmax + 1))
    spec = flat_state_spectrum(flat, fluid.rho, ks, mode=fluid.mode)
    print("flat-mode spectrum (lid-average equilibrium):")
    print("  k    re(l1)      im(l1)      re(l2)      im(l2)")
    for k, lam in zip(ks, spec):
        print(f"  {k:<4d} {lam[0].real: .4e} {lam[0].imag: .4e}"
              f" {lam[1].real: .4e} {lam[1].imag: .4e}")
    return 0


# ----------------------------------------------------------------------
# built-in verification suite

def _check_dn_closed_form():
    grid = HorizontalGrid(d=1, n=64)
    ifc = Interface(grid, np.zeros(grid.shape))
    worst = 0.0
    for side in ("plus", "minus"):
        fm = _fmap(ifc, 32, side)
        for k in range(1, 9):
            g = np.cos(k * grid.x1)
            exact = k * np.tanh(float(k)) * g
            rel = float(np.max(np.abs(dn_apply(fm, g) - exact))
                        / np.max(np.abs(exact)))
            worst = max(worst, rel)
    return worst < 1e-10, f"max rel err {worst:.2e} (tol 1e-10)"


def _check_dn_symmetry(rng):
    grid = HorizontalGrid(d=1, n=48)
    f = 0.15 * np.cos(grid.x1) + 0.05 * np.sin(2.0 * grid.x1)
    ifc = Interface(grid, f * np.ones(grid.shape))
    worst = 0.0
    for side in ("plus", "minus"):
        fm = _fmap(ifc, 24, side)
        for _ in range(5):
            g = project_mean_zero(grid, _rand_scalar(grid, rng))
            h = project_mean_zero(grid, _rand_scalar(grid, rng))
            Ng, Nh = dn_apply(fm, g), dn_apply(fm, h)
            defect = abs(grid.inner(Ng, h) - grid.inner(g, Nh))
            worst = max(worst, defect / (grid.norm(g) * grid.norm(h)))
            if grid.inner(Ng, g) < -1e-10 * grid.norm(g) ** 2:
                return False, "negative quadratic form"
    return worst < 1e-8, f"max symmetry defect {worst:.2e} (tol 1e-8)"


def _check_dn_bijectivity(rng):
    grid = HorizontalGrid(d=1, n=48)
    f = 0.1 * np.cos(2.0 * grid.x1) * np.ones(grid.shape)
    ifc = Interface(grid, f)
    fp, fm = _fmap(ifc, 24, "plus"), _fmap(ifc, 24, "minus")
    q = project_mean_zero(grid, _rand_scalar(grid, rng))
    Tq = dn_tilde(fp, fm, 1.0, 1.2, q)
    back = dn_invert(fp, fm, 1.0, 1.2, Tq)
    rel = grid.norm(back - q) / grid.norm(q)
    return rel < 1e-8, f"inversion defect {rel:.2e} (tol 1e-8)"


def _check_divcurl_constants():
    grid = HorizontalGrid(d=1, n=32)
    ifc = Interface(grid, 0.1 * np.cos(grid.x1) * np.ones(grid.shape))
    fm = _fmap(ifc, 20, "plus")
    zero3 = np.zeros((3,) + grid.shape + (20,))
    u = solve_div_curl(fm, zero3, None, np.zeros(grid.shape),
                       np.array([0.7, -0.3]))
    uN = -ifc.f1 * trace(u[0]) - ifc.f2 * trace(u[1]) + trace(u[2])
    flux = float(np.max(np.abs(uN)))
    avg = abs(float(u[0, ..., -1].mean()) - 0.7)
    ok = flux < 1e-7 and avg < 1e-12
    return ok, f"flux {flux:.2e}, lid-average defect {avg:.2e}"


def _lambda_scan(traces, rho, n_angles=720, newton=3):
    """Direct minimization over tangent directions: coarse angle scan,
    then Newton on h(phi) = a cos^2 + 2b cos sin + c sin^2 pointwise."""
    M = stability_matrix(traces, rho)
    _, v = weighted_velocities(traces, rho)
    a = M[0, 0] - v[0] * v[0]
    b = M[0, 1] - v[0] * v[1]
    c = M[1, 1] - v[1] * v[1]
    phis = np.linspace(0.0, np.pi, n_angles, endpoint=False)
    vals = np.stack([
        a * np.cos(p) ** 2 + 2.0 * b * np.cos(p) * np.sin(p)
        + c * np.sin(p) ** 2 for p in phis
    ])
    phi = phis[np.argmin(vals, axis=0)]
    for _ in range(newton):
        d1 = (c - a) * np.sin(2 * phi) + 2.0 * b * np.cos(2 * phi)
        d2 = 2.0 * (c - a) * np.cos(2 * phi) - 4.0 * b * np.sin(2 * phi)
        stepv = np.where(d2 > 0.0, d1 / np.where(d2 > 0.0, d2, 1.0), 0.0)
        phi = phi - np.clip(stepv, -0.01, 0.01)
    h = (a * np.cos(phi) ** 2 + 2.0 * b * np.cos(phi) * np.sin(phi)
         + c * np.sin(phi) ** 2)
    return float(np.min(h))


def _check_lambda_oracle(rng):
    grid = HorizontalGrid(d=2, n=8)
    worst = 0.0
    for _ in range(20):
        um, up = rng.normal(size=2) * 0.4, rng.normal(size=2) * 0.4
        Fm, Fp = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        tr = constant_traces(grid, um, Fm, up, Fp)
        rho = (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)))
        rep = stability_lambda(tr, rho, c0=0.0)
        brute = _lambda_scan(tr, rho)
        worst = max(worst, abs(rep.lambda_min - brute))
    return worst < 1e-10, f"max |eig - scan| {worst:.2e} (tol 1e-10)"


def _check_spectrum_dichotomy():
    eye = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    ks = list(range(1, 33))
    stab = FlatState(u_minus=(-0.2, 0.0), F_minus=eye,
                     u_plus=(0.2, 0.0), F_plus=eye)
    spec = flat_state_spectrum(stab, (1.0, 1.0), ks)
    ratio = float(np.max(np.abs(spec.real) / np.maximum(np.abs(spec.imag),
                                                        1e-30)))
    if ratio > 1e-6:
        return False, f"stabilized modes grow: re/im {ratio:.2e}"
    kh = FlatState(u_minus=(-0.5, 0.0), F_minus=0.0 * eye,
                   u_plus=(0.5, 0.0), F_plus=0.0 * eye)
    rates = flat_state_spectrum(kh, (1.0, 1.0), [4, 8, 16]).real.max(axis=1)
    r1, r2 = rates[1] / rates[0], rates[2] / rates[1]
    ok = 1.8 <= r1 <= 2.2 and 1.8 <= r2 <= 2.2
    return ok, f"stabilized re/im {ratio:.2e}; shear rate doubling {r1:.3f}, {r2:.3f}"


def _check_quiescent_step():
    cfg = load_config("n = 16\nm = 8\ndt = 1e-2\n")
    grid = make_grid(cfg)
    st = init_state(cfg, grid)
    new = step(cfg, grid, st)
    drift = float(np.max(np.abs(new.f - st.f))
                  + np.max(np.abs(new.minus.omega - st.minus.omega)))
    return drift < 1e-12, f"state drift {drift:.2e} over one step"


def _rand_scalar(grid, rng):
    g = np.zeros(grid.shape)
    for _ in range(6):
        k = int(rng.integers(1, 5))
        g += rng.normal() * np.cos(k * grid.x1 + rng.uniform(0, 2 * np.pi))
    return g


def cmd_verify(args):
    rng = np.random.default_rng(20240817)
    checks = [
        ("dn-closed-form", lambda: _check_dn_closed_form()),
        ("dn-symmetry", lambda: _check_dn_symmetry(rng)),
        ("dn-bijectivity", lambda: _check_dn_bijectivity(rng)),
        ("divcurl-constants", lambda: _check_divcurl_constants()),
        ("lambda-oracle", lambda: _check_lambda_oracle(rng)),
        ("spectrum-dichotomy", lambda: _check_spectrum_dichotomy()),
        ("quiescent-step", lambda: _check_quiescent_step()),
    ]
    failed = 0
    for name, fn in checks:
        ok, detail = fn()
        mark = "ok  " if ok else "FAIL"
        print(f"{mark} {name:<20s} {detail}")
        failed += 0 if ok else 1
    return 1 if failed else 0


# ----------------------------------------------------------------------
# residual and run

def cmd_residual(args):
    cfg = load_config(args.config)
    if args.outdir:
        cfg.outdir = args.outdir
    grid = make_grid(cfg)
    state = load_snapshot(cfg, args.tag)
    res = momentum_residual(cfg, grid, state,
                            pressure_scale=args.pressure_scale)
    for side in ("minus", "plus"):
        if side in res:
            print(f"{side}: {res[side]:.6e}")
    return 0


def cmd_run(args):
    cfg = load_config(args.config)
    if args.outdir:
        cfg.outdir = args.outdir
    return run(cfg)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="elastosheet")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="advance a configured simulation")
    p.add_argument("config", help="config file (key = value)")
    p.add_argument("--outdir", default="", help="override the output directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("stability", help="Lambda and flat-mode spectrum tables")
    p.add_argument("config")
    p.add_argument("--kmax", type=int, default=8)
    p.set_defaults(fn=cmd_stability)

    p = sub.add_parser("verify", help="built-in oracle checks")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("residual", help="momentum residual of a snapshot")
    p.add_argument("config")
    p.add_argument("tag", help="snapshot tag, e.g. snap_final")
    p.add_argument("--outdir", default="")
    p.add_argument("--pressure-scale", type=float, default=1.0)
    p.set_defaults(fn=cmd_residual)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
