"""Method-of-lines driver for the coupled interface / bulk-curl system.

State layout: the interface pair (f, theta) plus, per fluid side, the curl
of the velocity (omega), the curls of the three deformation columns (G),
and the lid averages (beta, gamma).  Everything else is derived: each
right-hand-side evaluation rebuilds the flattening maps at the current f,
recovers (u, F) by the div-curl reconstruction, assembles the bulk pressure
flux traces, and feeds the interface evolution.

Stepping is classical RK4 with a CFL warning against the principal-symbol
wave speed; solenoidality of omega and G is restored by projection after
every full step, and the horizontal mean of f is re-pinned exactly.  A
Picard stepper that freezes coefficients at the midpoint of the previous
iterate and solves the resulting affine system is provided as the implicit
alternative (picard_solve), mainly for contraction diagnostics.

run() adds monitors (interface band, trace-constraint drift, sup norms,
energy proxy, stability margin), CSV diagnostics, and raw little-endian
float64 snapshots with a JSON sidecar.  Exit codes: 0 reached t_end,
2 monitor breach, 1 error (raised to the caller).
"""

import configparser
import csv
import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .bulk_dynamics import (
    beta_gamma_rhs,
    lid_invariants,
    map_motion_term,
    vorticity_rhs,
)
from .divcurl import check_compatibility, recover_side, solve_div_curl
from .elliptic import assemble_pressure, divfree_project
from .errors import ConfigError, ConvergenceError, MonitorBreach
from .geometry import Interface, StripGrid, flatten_map, lid, trace
from .interface_dynamics import (
    PressurePieces,
    TraceBundle,
    bulk_pressure_traces,
    check_trace_constraints,
    energy_es,
    forcing_term,
    principal_rhs,
    stability_lambda,
    stability_matrix,
    theta_rhs,
    weighted_velocities,
)
from .spectral_core import (
    HorizontalGrid,
    fourier_multiplier,
    project_mean_zero,
)


# ----------------------------------------------------------------------
# configuration

@dataclass
class FluidParams:
    """Physical parameters; one_fluid mode is exactly rho_plus = 0."""

    rho_plus: float = 1.0
    rho_minus: float = 1.0
    c0: float = 0.05
    s: int = 3
    mode: str = "two_fluid"
    d: int = 1

    def __post_init__(self):
        if self.mode not in ("two_fluid", "one_fluid"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.rho_minus > 0.0:
            raise ConfigError(f"rho_minus must be positive, got {self.rho_minus}")
        if self.rho_plus < 0.0:
            raise ConfigError(f"rho_plus must be nonnegative, got {self.rho_plus}")
        if (self.mode == "one_fluid") != (self.rho_plus == 0.0):
            raise ConfigError(
                "one_fluid mode requires rho_plus = 0 and vice versa: "
                f"mode={self.mode}, rho_plus={self.rho_plus}"
            )
        if not 0.0 < self.c0 < 1.0:
            raise ConfigError(f"c0 must lie in (0, 1), got {self.c0}")
        if int(self.s) != self.s or self.s < 3:
            raise ConfigError(f"regularity index s must be an integer >= 3, got {self.s}")
        self.s = int(self.s)
        if self.d not in (1, 2):
            raise ConfigError(f"horizontal dimension d must be 1 or 2, got {self.d}")

    @property
    def rho(self):
        return (self.rho_plus, self.rho_minus)

    @property
    def lambda_mode(self):
        # with one horizontal direction the only tangential direction is e1
        return "d1" if self.d == 1 else self.mode

    @property
    def two_sided(self):
        return self.mode == "two_fluid"


@dataclass
class SimConfig:
    fluid: FluidParams = field(default_factory=FluidParams)
    n: int = 64
    m: int = 24
    dt: float = 1e-3
    t_end: float = 0.5
    cfl: float = 0.5
    ell_tol: float = 1e-9
    dn_tol: float = 1e-9
    family: str = "quiescent"
    U: float = 0.0
    a: float = 1.0
    b: float = None
    f0_amp: float = 0.0
    f0_mode: int = 1
    theta0_amp: float = 0.0
    theta0_mode: int = 1
    init_file: str = ""
    outdir: str = "out"
    sample_every: int = 10
    checkpoint_every: int = 0
    watch_modes: tuple = (1, 2, 4, 8)
    instability_study: bool = False
    serial: bool = True
    monitor_sup: float = 50.0
    monitor_tol: float = 1e-4
    monitor_energy: float = 1e8

    def __post_init__(self):
        if self.b is None:
            self.b = self.a
        if self.family not in ("quiescent", "shear_elastic", "kh",
                               "single_mode", "file"):
            raise ConfigError(f"unknown initial-data family {self.family!r}")
        if self.family == "file" and not self.init_file:
            raise ConfigError("family = file needs init_file")
        for name in ("dt", "t_end", "cfl", "ell_tol", "dn_tol"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.m < 6:
            raise ConfigError(f"need at least 6 vertical nodes, got m = {self.m}")


_FLUID_KEYS = {
    "rho_plus": float, "rho_minus": float, "c0": float, "s": int,
    "mode": str, "d": int,
}
_SIM_KEYS = {
    "n": int, "m": int, "dt": float, "t_end": float, "cfl": float,
    "ell_tol": float, "dn_tol": float, "family": str, "U": float,
    "a": float, "b": float, "f0_amp": float, "f0_mode": int,
    "theta0_amp": float, "theta0_mode": int, "init_file": str,
    "outdir": str, "sample_every": int, "checkpoint_every": int,
    "watch_modes": "intlist", "instability_study": bool, "serial": bool,
    "monitor_sup": float, "monitor_tol": float, "monitor_energy": float,
}


def _coerce(key, raw, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "intlist":
            return tuple(int(t) for t in raw.replace(",", " ").split())
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}")


def load_config(source):
    """Parse a key = value config (a path or the literal text)."""
    if isinstance(source, SimConfig):
        return source
    text = source
    if "\n" not in source and "=" not in source:
        if not os.path.isfile(source):
            raise ConfigError(f"config file not found: {source}")
        with open(source) as fh:
            text = fh.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (U vs u)
    try:
        cp.read_string("[sim]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}")
    fluid_kw, sim_kw = {}, {}
    for key, raw in cp["sim"].items():
        if key in _FLUID_KEYS:
            fluid_kw[key] = _coerce(key, raw, _FLUID_KEYS[key])
        elif key in _SIM_KEYS:
            sim_kw[key] = _coerce(key, raw, _SIM_KEYS[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return SimConfig(fluid=FluidParams(**fluid_kw), **sim_kw)


def config_text(cfg):
    """Canonical sorted key = value dump (hash input and provenance copy)."""
    items = {}
    for f in dc_fields(cfg.fluid):
        items[f.name] = getattr(cfg.fluid, f.name)
    for f in dc_fields(cfg):
        if f.name == "fluid":
            continue
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        items[f.name] = val
    return "".join(f"{k} = {items[k]}\n" for k in sorted(items))


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


# ----------------------------------------------------------------------
# state containers and arithmetic

@dataclass
class SideFields:
    omega: np.ndarray
    G: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    u: np.ndarray = None
    F: np.ndarray = None


@dataclass
class SimState:
    time: float
    f: np.ndarray
    theta: np.ndarray
    minus: SideFields
    plus: SideFields = None
    stability: object = None


def _side_axpy(a, b, h):
    return SideFields(
        omega=a.omega + h * b.omega,
        G=a.G + h * b.G,
        beta=a.beta + h * b.beta,
        gamma=a.gamma + h * b.gamma,
    )


def _axpy(state, rate, h):
    """state + h * rate (recovered-field caches dropped)."""
    return SimState(
        time=state.time + h,
        f=state.f + h * rate.f,
        theta=state.theta + h * rate.theta,
        minus=_side_axpy(state.minus, rate.minus, h),
        plus=None if state.plus is None else _side_axpy(state.plus, rate.plus, h),
    )


def _copy_state(state):
    def cp(side):
        if side is None:
            return None
        return SideFields(omega=side.omega.copy(), G=side.G.copy(),
                          beta=side.beta.copy(), gamma=side.gamma.copy())
    return SimState(time=state.time, f=state.f.copy(), theta=state.theta.copy(),
                    minus=cp(state.minus), plus=cp(state.plus))


def make_grid(cfg):
    return HorizontalGrid(cfg.fluid.d, cfg.n)


def _fmap(ifc, m, side):
    return flatten_map(ifc, StripGrid(ifc.grid, ifc.depth(side), m, side))


def _volume(d):
    return (2.0 * np.pi) ** d


def _run_pair(cfg, tasks):
    """Run the per-side closures, threaded across sides unless serial."""
    if cfg.serial or len(tasks) < 2:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=len(tasks)) as ex:
        futs = [ex.submit(t) for t in tasks]
        return [f.result() for f in futs]


# ----------------------------------------------------------------------
# initialization

def _builtin_data(cfg, grid):
    x1 = grid.x1
    fam = cfg.family
    U, a, b = cfg.U, cfg.a, cfg.b
    f0_amp, th_amp = cfg.f0_amp, cfg.theta0_amp
    if fam == "quiescent":
        U, a, b, f0_amp, th_amp = 0.0, 1.0, 1.0, 0.0, 0.0
    if fam == "kh":
        a = b = 0.0
    f = f0_amp * np.cos(cfg.f0_mode * x1) * np.ones(grid.shape)
    theta = th_amp * np.cos(cfg.theta0_mode * x1) * np.ones(grid.shape)
    gamma = np.array([[a, 0.0, 0.0], [0.0, b, 0.0]])

    def side(sign):
        return SideFields(
            omega=np.zeros((3,) + grid.shape + (cfg.m,)),
            G=np.zeros((3, 3) + grid.shape + (cfg.m,)),
            beta=np.array([sign * U, 0.0]),
            gamma=gamma.copy(),
        )

    plus = side(+1.0) if cfg.fluid.two_sided else None
    return SimState(time=0.0, f=f, theta=theta, minus=side(-1.0), plus=plus)


def _file_data(cfg, grid):
    try:
        data = np.load(cfg.init_file)
    except OSError as exc:
        raise ConfigError(f"cannot read init_file {cfg.init_file!r}: {exc}")
    need = ["f", "theta", "minus_omega", "minus_G", "minus_beta", "minus_gamma"]
    if cfg.fluid.two_sided:
        need += ["plus_omega", "plus_G", "plus_beta", "plus_gamma"]
    for key in need:
        if key not in data:
            raise ConfigError(f"init_file is missing array {key!r}")

    def side(prefix):
        return SideFields(
            omega=np.asarray(data[prefix + "_omega"], dtype=float),
            G=np.asarray(data[prefix + "_G"], dtype=float),
            beta=np.asarray(data[prefix + "_beta"], dtype=float).reshape(2),
            gamma=np.asarray(data[prefix + "_gamma"], dtype=float).reshape(2, 3),
        )

    plus = side("plus") if cfg.fluid.two_sided else None
    return SimState(time=0.0, f=np.asarray(data["f"], dtype=float),
                    theta=np.asarray(data["theta"], dtype=float),
                    minus=side("minus"), plus=plus)


def _recover_all(cfg, state, fmaps, project=False):
    """Fill the u/F caches of every side from the curl data (in place)."""
    theta = state.theta

    def one(side_name):
        side = getattr(state, side_name)
        u, F = recover_side(fmaps[side_name], side.omega, side.G, side.beta,
                            side.gamma, theta, tol=cfg.ell_tol, project=project)
        return side_name, u, F

    names = ["minus"] + (["plus"] if state.plus is not None else [])
    for side_name, u, F in _run_pair(cfg, [lambda nm=nm: one(nm) for nm in names]):
        side = getattr(state, side_name)
        side.u, side.F = u, F


def _traces(state):
    """Interface traces as a TraceBundle (component-first deformation)."""
    def tr(side):
        return (trace(side.u), np.swapaxes(trace(side.F), 0, 1))
    um, Fm = tr(state.minus)
    if state.plus is None:
        return TraceBundle(u_minus=um, F_minus=Fm)
    up, Fp = tr(state.plus)
    return TraceBundle(u_minus=um, F_minus=Fm, u_plus=up, F_plus=Fp)


def _maps(cfg, grid, f):
    ifc = Interface(grid, f, c0=cfg.fluid.c0)
    fmaps = {"minus": _fmap(ifc, cfg.m, "minus")}
    if cfg.fluid.two_sided:
        fmaps["plus"] = _fmap(ifc, cfg.m, "plus")
    return ifc, fmaps


def init_state(cfg, grid=None):
    """Build and validate an initial SimState for the configured family.

    Bulk fields come out of the div-curl recovery, so the divergence, flux,
    tangency, and lid conditions hold by construction; they are still
    verified, and the stability margin Lambda >= 2 c0 is enforced unless
    instability_study is set."""
    if grid is None:
        grid = make_grid(cfg)
    fluid = cfg.fluid
    if cfg.family == "file":
        state = _file_data(cfg, grid)
        if state.f.shape != grid.shape:
            raise ConfigError(
                f"init_file f has shape {state.f.shape}, grid needs {grid.shape}"
            )
    else:
        state = _builtin_data(cfg, grid)
    state.theta = project_mean_zero(grid, state.theta)
    ifc, fmaps = _maps(cfg, grid, state.f)
    for name, fm in fmaps.items():
        side = getattr(state, name)
        check_compatibility(fm, side.omega, None, state.theta, tol=1e-6)
    _recover_all(cfg, state, fmaps, project=True)
    traces = _traces(state)
    check_trace_constraints(ifc, state.theta, traces, tol=1e-6, mode=fluid.mode)
    report = stability_lambda(traces, fluid.rho, fluid.c0, fluid.lambda_mode)
    if report.lambda_min < 2.0 * fluid.c0:
        msg = (f"initial stability margin violated: Lambda = "
               f"{report.lambda_min:.6g} < 2 c0 = {2.0 * fluid.c0:.6g}")
        if cfg.instability_study:
            warnings.warn(msg)
        else:
            raise ConfigError(msg + " (set instability_study to force)")
    state.stability = report
    return state


# ----------------------------------------------------------------------
# right-hand side and stepping

def rhs_full(cfg, grid, state, monitor=False, dn_x0=None):
    """One nonlinear right-hand-side evaluation.

    Returns (rates, aux) where rates mirrors the state layout and aux keeps
    the expensive intermediates (maps, traces, pressure parts, recovered
    fields) for reuse by monitors and warm starts."""
    fluid = cfg.fluid
    ifc, fmaps = _maps(cfg, grid, state.f)
    work = _copy_state(state)
    _recover_all(cfg, work, fmaps, project=False)
    traces = _traces(work)
    if monitor:
        check_trace_constraints(ifc, work.theta, traces, cfg.monitor_tol,
                                fluid.mode)

    def press_side(name):
        side = getattr(work, name)
        return name, bulk_pressure_traces(fmaps[name], side.u, side.F,
                                          tol=cfg.ell_tol)

    names = ["minus"] + (["plus"] if work.plus is not None else [])
    q = dict(_run_pair(cfg, [lambda nm=nm: press_side(nm) for nm in names]))
    press = PressurePieces(q_plus=q.get("plus"), q_minus=q["minus"])
    dtheta, parts = theta_rhs(
        fmaps.get("plus"), fmaps["minus"], work.theta, traces, press,
        fluid.rho, mode=fluid.mode, dn_tol=cfg.dn_tol, return_parts=True,
        dn_x0=dn_x0)
    dtf = project_mean_zero(grid, work.theta)
    vol = _volume(fluid.d)

    def bulk_side(name):
        side = getattr(work, name)
        fm = fmaps[name]
        dom, dG = vorticity_rhs(fm, side.u, side.F, side.omega, side.G)
        dom += map_motion_term(fm, dtf, side.omega)
        dG += map_motion_term(fm, dtf, side.G)
        dbeta, dgamma = beta_gamma_rhs(grid, lid(side.u), lid(side.F))
        return name, SideFields(omega=dom, G=dG, beta=dbeta / vol,
                                gamma=dgamma / vol)

    dsides = dict(_run_pair(cfg, [lambda nm=nm: bulk_side(nm) for nm in names]))
    rates = SimState(time=0.0, f=dtf, theta=dtheta, minus=dsides["minus"],
                     plus=dsides.get("plus"))
    aux = {"ifc": ifc, "fmaps": fmaps, "traces": traces, "press": press,
           "parts": parts, "work": work}
    return rates, aux


def max_wave_speed(traces, rho, d):
    """Pointwise principal-symbol speed |w . xi| + sqrt|xi (M - vv^T) xi|
    maximized over grid points and the axis directions (the nonlocal
    pressure coupling is lower order and ignored here)."""
    w, v = weighted_velocities(traces, rho)
    M = stability_matrix(traces, rho)
    best = 0.0
    for i in range(d):
        quad = M[i, i] - v[i] ** 2
        c = np.abs(w[i]) + np.sqrt(np.abs(quad))
        best = max(best, float(np.max(c)))
    return best


def step(cfg, grid, state, dt=None, dn_cache=None):
    """One RK4 step with end-of-step divergence projection and exact mean-f
    re-pin.  Interface-band violations during any stage surface as
    MonitorBreach('interface-range')."""
    if dt is None:
        dt = cfg.dt
    mean0 = float(state.f.mean())
    x0 = None if dn_cache is None else dn_cache.get("p_bar")
    try:
        k1, aux1 = rhs_full(cfg, grid, state, monitor=True, dn_x0=x0)
        speed = max_wave_speed(aux1["traces"], cfg.fluid.rho, cfg.fluid.d)
        dx = 2.0 * np.pi / cfg.n
        if speed > 0.0 and dt > cfg.cfl * dx / speed:
            warnings.warn(
                f"dt = {dt:.3g} exceeds the CFL bound "
                f"{cfg.cfl * dx / speed:.3g} (wave speed {speed:.3g})"
            )
        x0 = aux1["parts"].get("p_bar", x0)
        k2, aux2 = rhs_full(cfg, grid, _axpy(state, k1, 0.5 * dt), dn_x0=x0)
        x0 = aux2["parts"].get("p_bar", x0)
        k3, aux3 = rhs_full(cfg, grid, _axpy(state, k2, 0.5 * dt), dn_x0=x0)
        x0 = aux3["parts"].get("p_bar", x0)
        k4, aux4 = rhs_full(cfg, grid, _axpy(state, k3, dt), dn_x0=x0)
    except ConfigError as exc:
        raise MonitorBreach("interface-range", str(exc))
    new = _axpy(state, k1, dt / 6.0)
    new = _axpy(new, k2, dt / 3.0)
    new = _axpy(new, k3, dt / 3.0)
    new = _axpy(new, k4, dt / 6.0)
    new.time = state.time + dt
    new.f = new.f + (mean0 - float(new.f.mean()))
    try:
        _, fmaps = _maps(cfg, grid, new.f)
    except ConfigError as exc:
        raise MonitorBreach("interface-range", str(exc))
    for name, fm in fmaps.items():
        side = getattr(new, name)
        stack = np.concatenate([side.omega[None], side.G])
        proj = divfree_project(fm, stack, tol=cfg.ell_tol)
        side.omega = proj[0]
        side.G = proj[1:]
    if dn_cache is not None:
        pb = aux4["parts"].get("p_bar")
        if pb is not None:
            dn_cache["p_bar"] = pb
    return new


# ----------------------------------------------------------------------
# diagnostics and monitors

def diagnostics(cfg, grid, state, check_monitors=False):
    """One full diagnostic sample; optionally enforces the run monitors."""
    fluid = cfg.fluid
    ifc, fmaps = _maps(cfg, grid, state.f)
    work = _copy_state(state)
    _recover_all(cfg, work, fmaps, project=False)
    traces = _traces(work)
    report = stability_lambda(traces, fluid.rho, fluid.c0, fluid.lambda_mode)
    energy = energy_es(grid, work.f, work.theta, traces, fluid.rho, s=fluid.s)
    out = {
        "t": state.time,
        "lambda_min": report.lambda_min,
        "energy_s": energy.total,
        "coercivity": energy.coercivity,
        "mean_f": float(state.f.mean()),
    }
    div_u = div_F = flux_err = tang = sup_u = sup_F = 0.0
    names = ["minus"] + (["plus"] if work.plus is not None else [])
    for name in names:
        side = getattr(work, name)
        fm = fmaps[name]
        div_u = max(div_u, fm.norm(fm.div(side.u)))
        for j in range(3):
            div_F = max(div_F, fm.norm(fm.div(side.F[j])))
        uT = trace(side.u)
        uN = -ifc.f1 * uT[0] - ifc.f2 * uT[1] + uT[2]
        flux_err = max(flux_err, float(np.max(np.abs(uN - work.theta))))
        FT = trace(side.F)  # [j][i]
        tN = (-ifc.f1[None] * FT[:, 0] - ifc.f2[None] * FT[:, 1] + FT[:, 2])
        tang = max(tang, float(np.max(np.abs(tN))))
        sup_u = max(sup_u, float(np.max(np.abs(uT))))
        sup_F = max(sup_F, float(np.max(np.abs(FT))))
        om3, g3 = lid_invariants(grid, side.omega, side.G)
        out[f"lid_om3_{name}"] = om3
        out[f"lid_G3_{name}"] = float(np.max(np.abs(g3)))
    if work.plus is not None:
        upN = (-ifc.f1 * traces.u_plus[0] - ifc.f2 * traces.u_plus[1]
               + traces.u_plus[2])
        umN = (-ifc.f1 * traces.u_minus[0] - ifc.f2 * traces.u_minus[1]
               + traces.u_minus[2])
        out["jump_flux"] = float(np.max(np.abs(upN - umN)))
    else:
        out["jump_flux"] = 0.0
    out.update({"div_u": div_u, "div_F": div_F, "flux_err": flux_err,
                "F_tangency": tang, "sup_u": sup_u, "sup_F": sup_F})
    for k in cfg.watch_modes:
        out[f"amp_{k}"] = grid.mode_amplitude(state.f, k)
    if check_monitors:
        if max(sup_u, sup_F) > cfg.monitor_sup:
            raise MonitorBreach(
                "sup-norm", f"max trace amplitude {max(sup_u, sup_F):.3g} "
                f"> {cfg.monitor_sup:.3g}")
        if not np.isfinite(energy.total) or energy.total > cfg.monitor_energy:
            raise MonitorBreach(
                "energy-proxy", f"E_s = {energy.total:.3g} "
                f"> {cfg.monitor_energy:.3g}")
        if not cfg.instability_study and report.lambda_min < fluid.c0:
            raise MonitorBreach(
                "stability-margin",
                f"Lambda = {report.lambda_min:.6g} < c0 = {fluid.c0:.6g}")
    return out


# ----------------------------------------------------------------------
# picard iteration (frozen-coefficient implicit stepper)

def _sobolev_norm(grid, g, sigma):
    return grid.norm(fourier_multiplier(grid, g, sigma))


def _picard_norm(cfg, grid, fmaps, diff):
    """Difference norm of the iteration: H^{s-1/2} x H^{s-3/2} on the
    interface pair plus horizontal-H^{s-2} strip proxies for the curls."""
    sreg = cfg.fluid.s
    total = _sobolev_norm(grid, diff.f, sreg - 0.5)
    total += _sobolev_norm(grid, diff.theta, sreg - 1.5)
    for name in ("minus", "plus"):
        side = getattr(diff, name)
        if side is None:
            continue
        fm = fmaps[name]
        for c in range(3):
            total += fm.norm(fourier_multiplier(grid, side.omega[c], sreg - 2))
        for j in range(3):
            for c in range(3):
                total += fm.norm(
                    fourier_multiplier(grid, side.G[j, c], sreg - 2))
        total += float(np.sum(np.abs(side.beta)) + np.sum(np.abs(side.gamma)))
    return total


def _state_diff(a, b):
    def ds(x, y):
        if x is None:
            return None
        return SideFields(omega=x.omega - y.omega, G=x.G - y.G,
                          beta=x.beta - y.beta, gamma=x.gamma - y.gamma)
    return SimState(time=0.0, f=a.f - b.f, theta=a.theta - b.theta,
                    minus=ds(a.minus, b.minus), plus=ds(a.plus, b.plus))


def _midpoint(a, b):
    def mid(x, y):
        return SideFields(omega=0.5 * (x.omega + y.omega),
                          G=0.5 * (x.G + y.G),
                          beta=0.5 * (x.beta + y.beta),
                          gamma=0.5 * (x.gamma + y.gamma))
    plus = None if a.plus is None else mid(a.plus, b.plus)
    return SimState(time=0.5 * (a.time + b.time), f=0.5 * (a.f + b.f),
                    theta=0.5 * (a.theta + b.theta),
                    minus=mid(a.minus, b.minus), plus=plus)


def picard_solve(cfg, grid, state, dt=None, tol=1e-8, max_iter=12,
                 substeps=2):
    """Implicit step by Picard iteration: freeze every coefficient (maps,
    traces, pressures, transport fields, lid rates) at the midpoint of the
    previous iterate, integrate the resulting affine system over [t, t+dt]
    with RK4 substeps, and repeat until the iterate difference norm drops
    below tol (relative to the first increment).

    Returns (state_new, info) with info holding the difference and ratio
    history; raises ConvergenceError when the iteration fails to contract
    within max_iter."""
    if dt is None:
        dt = cfg.dt
    fluid = cfg.fluid
    prev = _copy_state(state)
    prev.time = state.time + dt
    diffs, scale = [], None
    for it in range(1, max_iter + 1):
        C = _midpoint(state, prev)
        ifc_C, fmaps_C = _maps(cfg, grid, C.f)
        _recover_all(cfg, C, fmaps_C, project=False)
        traces_C = _traces(C)
        names = ["minus"] + (["plus"] if C.plus is not None else [])
        qC = {nm: bulk_pressure_traces(fmaps_C[nm], getattr(C, nm).u,
                                       getattr(C, nm).F, tol=cfg.ell_tol)
              for nm in names}
        press_C = PressurePieces(q_plus=qC.get("plus"), q_minus=qC["minus"])
        force_C = forcing_term(fmaps_C.get("plus"), fmaps_C["minus"], C.theta,
                               traces_C, press_C, fluid.rho, mode=fluid.mode,
                               dn_tol=cfg.dn_tol)
        dtf_C = project_mean_zero(grid, C.theta)
        vol = _volume(fluid.d)
        rates_C = {}
        for nm in names:
            side = getattr(C, nm)
            db, dg = beta_gamma_rhs(grid, lid(side.u), lid(side.F))
            rates_C[nm] = (db / vol, dg / vol)

        def lin_rhs(st):
            ifc_bar = Interface(grid, st.f, c0=fluid.c0)
            dtheta = principal_rhs(grid, ifc_bar, st.theta, traces_C,
                                   fluid.rho, mode=fluid.mode) + force_C
            dsides = {}
            for nm in names:
                cside = getattr(C, nm)
                sside = getattr(st, nm)
                fm = fmaps_C[nm]
                dom, dG = vorticity_rhs(fm, cside.u, cside.F, sside.omega,
                                        sside.G)
                dom += map_motion_term(fm, dtf_C, sside.omega)
                dG += map_motion_term(fm, dtf_C, sside.G)
                db, dg = rates_C[nm]
                dsides[nm] = SideFields(omega=dom, G=dG, beta=db, gamma=dg)
            return SimState(time=0.0, f=project_mean_zero(grid, st.theta),
                            theta=dtheta, minus=dsides["minus"],
                            plus=dsides.get("plus"))

        cur = _copy_state(state)
        h = dt / substeps
        for _ in range(substeps):
            r1 = lin_rhs(cur)
            r2 = lin_rhs(_axpy(cur, r1, 0.5 * h))
            r3 = lin_rhs(_axpy(cur, r2, 0.5 * h))
            r4 = lin_rhs(_axpy(cur, r3, h))
            cur = _axpy(cur, r1, h / 6.0)
            cur = _axpy(cur, r2, h / 3.0)
            cur = _axpy(cur, r3, h / 3.0)
            cur = _axpy(cur, r4, h / 6.0)
        cur.time = state.time + dt
        cur.f = cur.f + (float(state.f.mean()) - float(cur.f.mean()))
        diff = _picard_norm(cfg, grid, fmaps_C, _state_diff(cur, prev))
        if scale is None:
            scale = max(_picard_norm(cfg, grid, fmaps_C,
                                     _state_diff(cur, state)), 1e-30)
        diffs.append(diff)
        prev = cur
        if diff <= tol * scale:
            ratios = [diffs[i + 1] / max(diffs[i], 1e-300)
                      for i in range(len(diffs) - 1)]
            return prev, {"iterations": it, "diffs": diffs, "ratios": ratios,
                          "converged": True}
    ratios = [diffs[i + 1] / max(diffs[i], 1e-300)
              for i in range(len(diffs) - 1)]
    raise ConvergenceError(
        f"picard iteration did not converge in {max_iter} iterations; "
        f"difference ratios: {['%.3g' % r for r in ratios]}"
    )


# ----------------------------------------------------------------------
# momentum residual (equivalence with the velocity-pressure form)

def momentum_residual(cfg, grid, state, pressure_scale=1.0):
    """L2 norm per side of w = d_t u + (u.grad)u - sum_j (F_j.grad)F_j
    + (1/rho) grad p, all evaluated on the strip.

    d_t u is reconstructed by a div-curl solve: its curl is the transport
    right-hand side of omega, its interface flux comes from differentiating
    u.N = d_t f in time, and its lid averages are the beta rates.  The
    pressure combines the bilinear volume parts with the harmonic extension
    of the interface pressure from the theta assembly; pressure_scale != 1
    perturbs it for sensitivity checks."""
    fluid = cfg.fluid
    ifc, fmaps = _maps(cfg, grid, state.f)
    work = _copy_state(state)
    _recover_all(cfg, work, fmaps, project=True)
    traces = _traces(work)
    names = ["minus"] + (["plus"] if work.plus is not None else [])
    q = {nm: bulk_pressure_traces(fmaps[nm], getattr(work, nm).u,
                                  getattr(work, nm).F, tol=cfg.ell_tol)
         for nm in names}
    press = PressurePieces(q_plus=q.get("plus"), q_minus=q["minus"])
    dtheta, parts = theta_rhs(fmaps.get("plus"), fmaps["minus"], work.theta,
                              traces, press, fluid.rho, mode=fluid.mode,
                              dn_tol=cfg.dn_tol, return_parts=True)
    dtf = project_mean_zero(grid, work.theta)
    ddtf = project_mean_zero(grid, dtheta)
    vol = _volume(fluid.d)
    rho_of = {"minus": fluid.rho_minus, "plus": fluid.rho_plus}
    out = {}
    for nm in names:
        side = getattr(work, nm)
        fm = fmaps[nm]
        dom, _ = vorticity_rhs(fm, side.u, side.F, side.omega, side.G)
        # flux of d_t u: differentiate u.N = d_t f along the moving graph
        dz_u = np.stack([fm.strip.ds(side.u[c]) for c in range(3)]) \
            / fm.J[..., None]
        dzuN = (-ifc.f1 * trace(dz_u[0]) - ifc.f2 * trace(dz_u[1])
                + trace(dz_u[2]))
        uT = trace(side.u)
        flux = ddtf - dtf * dzuN + uT[0] * grid.d1(dtf)
        if fluid.d == 2:
            flux = flux + uT[1] * grid.d2(dtf)
        flux = project_mean_zero(grid, flux)
        dbeta, _ = beta_gamma_rhs(grid, lid(side.u), lid(side.F))
        dtu = solve_div_curl(fm, dom, None, flux, dbeta / vol,
                             tol=cfg.ell_tol, check=False)
        # the interface pressure is continuous, so both sides extend the
        # same trace; one-fluid states carry none (parts has p_bar = None)
        p_bar = parts.get("p_bar")
        p = assemble_pressure(fm, p_bar, side.u, side.F, rho_of[nm],
                              tol=cfg.ell_tol) * pressure_scale
        gu = np.stack([fm.grad(side.u[c]) for c in range(3)])
        w = dtu + np.stack([
            sum(side.u[k] * gu[c][k] for k in range(3)) for c in range(3)
        ])
        for j in range(3):
            gF = np.stack([fm.grad(side.F[j, c]) for c in range(3)])
            w -= np.stack([
                sum(side.F[j, k] * gF[c][k] for k in range(3))
                for c in range(3)
            ])
        w += fm.grad(p) / rho_of[nm]
        out[nm] = fm.norm_vec(w)
    return out


# ----------------------------------------------------------------------
# snapshots and the run driver

_SIDE_FIELDS = ["omega", "G", "beta", "gamma"]


def write_snapshot(cfg, state, tag):
    """Raw little-endian float64 dumps plus a JSON sidecar."""
    os.makedirs(cfg.outdir, exist_ok=True)
    arrays = {"f": state.f, "theta": state.theta}
    for nm in ("minus", "plus"):
        side = getattr(state, nm)
        if side is None:
            continue
        for key in _SIDE_FIELDS:
            arrays[f"{nm}_{key}"] = getattr(side, key)
    meta = {"time": state.time, "config_sha256": config_hash(cfg),
            "dtype": "<f8",
            "grid": {"d": cfg.fluid.d, "n": cfg.n, "m": cfg.m},
            "arrays": {}}
    for name, arr in arrays.items():
        path = os.path.join(cfg.outdir, f"{tag}.{name}.f64")
        np.asarray(arr, dtype="<f8").tofile(path)
        meta["arrays"][name] = list(np.asarray(arr).shape)
    with open(os.path.join(cfg.outdir, f"{tag}.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_snapshot(cfg, tag, outdir=None):
    """Rebuild a SimState from a snapshot written by write_snapshot."""
    outdir = cfg.outdir if outdir is None else outdir
    with open(os.path.join(outdir, f"{tag}.json")) as fh:
        meta = json.load(fh)

    def rd(name):
        path = os.path.join(outdir, f"{tag}.{name}.f64")
        arr = np.fromfile(path, dtype="<f8")
        return arr.reshape(meta["arrays"][name])

    def side(nm):
        if f"{nm}_omega" not in meta["arrays"]:
            return None
        return SideFields(omega=rd(f"{nm}_omega"), G=rd(f"{nm}_G"),
                          beta=rd(f"{nm}_beta"), gamma=rd(f"{nm}_gamma"))

    return SimState(time=float(meta["time"]), f=rd("f"), theta=rd("theta"),
                    minus=side("minus"), plus=side("plus"))


def _csv_columns(cfg):
    cols = ["t", "lambda_min", "energy_s", "coercivity", "mean_f", "div_u",
            "div_F", "flux_err", "F_tangency", "jump_flux", "sup_u", "sup_F",
            "lid_om3_minus", "lid_G3_minus"]
    if cfg.fluid.two_sided:
        cols += ["lid_om3_plus", "lid_G3_plus"]
    cols += [f"amp_{k}" for k in cfg.watch_modes]
    return cols


def run(cfg):
    """Advance to t_end with sampling, checkpoints, and monitors.

    Returns 0 when t_end is reached, 2 on a monitor breach (after a final
    state dump and a breach record); configuration and data errors raise."""
    grid = make_grid(cfg)
    state = init_state(cfg, grid)
    os.makedirs(cfg.outdir, exist_ok=True)
    with open(os.path.join(cfg.outdir, "config.txt"), "w") as fh:
        fh.write(config_text(cfg))
    cols = _csv_columns(cfg)
    csv_path = os.path.join(cfg.outdir, "diagnostics.csv")
    dn_cache = {}
    nstep = 0
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        try:
            writer.writerow(diagnostics(cfg, grid, state, check_monitors=True))
            write_snapshot(cfg, state, "snap_000000")
            sampled_at = state.time
            while state.time < cfg.t_end - 0.5 * cfg.dt:
                dt = min(cfg.dt, cfg.t_end - state.time)
                state = step(cfg, grid, state, dt=dt, dn_cache=dn_cache)
                nstep += 1
                if cfg.sample_every > 0 and nstep % cfg.sample_every == 0:
                    writer.writerow(
                        diagnostics(cfg, grid, state, check_monitors=True))
                    sampled_at = state.time
                if cfg.checkpoint_every > 0 and nstep % cfg.checkpoint_every == 0:
                    write_snapshot(cfg, state, f"snap_{nstep:06d}")
            if sampled_at != state.time:
                writer.writerow(
                    diagnostics(cfg, grid, state, check_monitors=True))
        except MonitorBreach as breach:
            write_snapshot(cfg, state, "snap_breach")
            with open(os.path.join(cfg.outdir, "breach.txt"), "w") as bf:
                bf.write(f"condition: {breach.condition}\n"
                         f"time: {state.time}\ndetail: {breach.detail}\n")
            return 2
    write_snapshot(cfg, state, "snap_final")
    return 0
