"""Interface evolution and its linear analysis.

The interface state is the pair (f, theta): graph height and scaled normal
velocity theta = trace(u) . N with N = (-d1 f, -d2 f, 1).  Writing, per side,

    g = 2 u_i d_i(theta)
        + N . grad(p_uu - sum_j p_FjFj)|_0
        + sum_{s,r} (u_s u_r - sum_j F_sj F_rj) d_s d_r f

with all coefficients interface traces, the two-fluid evolution reads

    d_t theta = -(rho+ g+ + rho- g-) / (rho+ + rho-)
                + (DN+ - DN-) pbar / (rho+ + rho-),
    (DN+/rho+ + DN-/rho-) pbar = P(g+ - g-),       d_t f = P theta,

and the one-fluid evolution is d_t theta = -g-.  The frozen-coefficient
principal part of the same right-hand side is

    -2 w_i d_i(theta) - sum_{s,r} (w_s w_r + v_s v_r - M_sr) d_s d_r f

with w, v the density-weighted mean and (scaled) jump of the horizontal
velocity traces and M the density-weighted deformation Gram matrix; the
remainder (pressure traces plus the nonlocal correction) is the forcing
term of the linearized system.  Pointwise hyperbolicity is measured by

    Lambda = min over x of lambda_min(M - v v^T),

computed from the closed-form 2x2 eigenvalue.  All trace products in the
evolution use the dealiased product, so the principal/forcing split is an
identity to rounding.
"""

from dataclasses import dataclass

import numpy as np

from .dn_ops import TOL_DN, interface_pressure
from .elliptic import TOL_ELL, pressure_combo
from .errors import ConfigError, MonitorBreach
from .geometry import normal_flux_trace
from .spectral_core import fourier_multiplier, project_mean_zero


@dataclass
class TraceBundle:
    """Interface traces of the bulk fields: velocities (3, n1, n2) and
    deformation columns (3, 3, n1, n2), first index the component, second
    the column.  One-fluid states carry only the minus side."""

    u_minus: np.ndarray
    F_minus: np.ndarray
    u_plus: np.ndarray = None
    F_plus: np.ndarray = None


@dataclass
class PressurePieces:
    """Interface flux traces N . grad(p_uu - sum_j p_FjFj)|_0 per side;
    None stands for zero (exact for constant or zero bulk fields)."""

    q_plus: np.ndarray = None
    q_minus: np.ndarray = None


@dataclass
class StabilityReport:
    lambda_min: float
    argmin_index: tuple
    argmin_x: tuple
    argmin_phi: np.ndarray
    hyperbolic: bool
    c0: float
    pointwise: np.ndarray


@dataclass
class EnergyReport:
    total: float
    advected_sq: float
    shear_sq: float
    elastic_plus_sq: float
    elastic_minus_sq: float
    coercivity: float
    s: float


@dataclass
class FlatState:
    """Constant-trace equilibrium over a flat interface: horizontal velocity
    traces (2,) and horizontal deformation rows (2, 3) per side."""

    u_minus: np.ndarray
    F_minus: np.ndarray
    u_plus: np.ndarray = None
    F_plus: np.ndarray = None
    mean_f: float = 0.0


def _check_rho(rho):
    rp, rm = float(rho[0]), float(rho[1])
    if not (np.isfinite(rp) and np.isfinite(rm)) or rp < 0.0 or rm <= 0.0:
        raise ConfigError(
            f"densities must satisfy rho_plus >= 0, rho_minus > 0, got {rho}"
        )
    return rp, rm


def weighted_velocities(traces, rho):
    """Density-weighted mean w and scaled jump v of the horizontal velocity
    traces: w = (rho+ u+ + rho- u-)/(rho+ + rho-),
    v = sqrt(rho+ rho-) (u+ - u-)/(rho+ + rho-).  Each (2, n1, n2)."""
    rp, rm = _check_rho(rho)
    um = np.asarray(traces.u_minus, dtype=float)[:2]
    if rp == 0.0:
        return um.copy(), np.zeros_like(um)
    if traces.u_plus is None:
        raise ConfigError("rho_plus > 0 needs plus-side velocity traces")
    up = np.asarray(traces.u_plus, dtype=float)[:2]
    tot = rp + rm
    w = (rp * up + rm * um) / tot
    v = np.sqrt(rp * rm) * (up - um) / tot
    return w, v


def stability_matrix(traces, rho):
    """Density-weighted Gram matrix of the horizontal deformation rows,
    M_sr = sum_j [rho+ F+_sj F+_rj + rho- F-_sj F-_rj]/(rho+ + rho-),
    shape (2, 2, n1, n2).  Pointwise products (no dealiasing): this is a
    pointwise quadratic form, not a pseudodifferential coefficient."""
    rp, rm = _check_rho(rho)
    Fm = np.asarray(traces.F_minus, dtype=float)[:2]
    M = rm * np.einsum("sj...,rj...->sr...", Fm, Fm)
    if rp > 0.0:
        if traces.F_plus is None:
            raise ConfigError("rho_plus > 0 needs plus-side deformation traces")
        Fp = np.asarray(traces.F_plus, dtype=float)[:2]
        M += rp * np.einsum("sj...,rj...->sr...", Fp, Fp)
    return M / (rp + rm)


def _eigmin_2x2(a, b, c):
    half_sum = 0.5 * (a + c)
    radius = np.sqrt((0.5 * (a - c)) ** 2 + b * b)
    return half_sum - radius


def stability_lambda(traces, rho, c0, mode="two_fluid"):
    """Hyperbolicity functional: the grid minimum of the smallest eigenvalue
    of M - v v^T (mode two_fluid), of the deformation Gram matrix alone with
    the plus side dropped (mode one_fluid), or of the single tangential
    entry M_11 - v_1^2 (mode d1)."""
    if mode not in ("two_fluid", "one_fluid", "d1"):
        raise ConfigError(f"unknown stability mode {mode!r}")
    if mode == "one_fluid":
        rho = (0.0, rho[1] if hasattr(rho, "__len__") else float(rho))
    w, v = weighted_velocities(traces, rho)
    M = stability_matrix(traces, rho)
    a = M[0, 0] - v[0] * v[0]
    b = M[0, 1] - v[0] * v[1]
    c = M[1, 1] - v[1] * v[1]
    if mode == "d1":
        pointwise = a
    else:
        pointwise = _eigmin_2x2(a, b, c)
    idx = np.unravel_index(int(np.argmin(pointwise)), pointwise.shape)
    lam = float(pointwise[idx])
    if mode == "d1":
        phi = np.array([1.0, 0.0])
    else:
        a0, b0, c0_ = float(a[idx]), float(b[idx]), float(c[idx])
        if abs(b0) <= 1e-14 * max(1.0, abs(a0), abs(c0_)):
            phi = np.array([1.0, 0.0]) if a0 <= c0_ else np.array([0.0, 1.0])
        else:
            phi = np.array([b0, lam - a0])
            phi /= np.sqrt(phi @ phi)
    x = (idx[0] * 2.0 * np.pi / pointwise.shape[0],
         idx[1] * 2.0 * np.pi / pointwise.shape[1])
    return StabilityReport(
        lambda_min=lam,
        argmin_index=idx,
        argmin_x=x,
        argmin_phi=phi,
        hyperbolic=bool(lam >= c0),
        c0=float(c0),
        pointwise=pointwise,
    )


def principal_symbol(xi, traces, rho):
    """(v . xi)^2 - xi^T M xi at every grid point; negative for all tangent
    directions exactly where the evolution is strictly hyperbolic."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size == 1:
        xi = np.array([float(xi[0]), 0.0])
    if not np.any(xi != 0.0):
        raise ConfigError("principal symbol needs a nonzero wavevector")
    w, v = weighted_velocities(traces, rho)
    M = stability_matrix(traces, rho)
    vdot = v[0] * xi[0] + v[1] * xi[1]
    quad = (
        M[0, 0] * xi[0] * xi[0]
        + 2.0 * M[0, 1] * xi[0] * xi[1]
        + M[1, 1] * xi[1] * xi[1]
    )
    return vdot * vdot - quad


def _quadratic_coeffs(grid, u, F):
    """Dealiased curvature coefficients c_sr = u_s u_r - sum_j F_sj F_rj."""
    c11 = grid.mul23(u[0], u[0])
    c12 = grid.mul23(u[0], u[1])
    c22 = grid.mul23(u[1], u[1])
    for j in range(3):
        c11 = c11 - grid.mul23(F[0, j], F[0, j])
        c12 = c12 - grid.mul23(F[0, j], F[1, j])
        c22 = c22 - grid.mul23(F[1, j], F[1, j])
    return c11, c12, c22


def _g_side(grid, ifc, theta, u, F, q):
    d1t = grid.d1(theta)
    g = 2.0 * grid.mul23(u[0], d1t)
    if grid.d == 2:
        g = g + 2.0 * grid.mul23(u[1], grid.d2(theta))
    if q is not None:
        g = g + q
    c11, c12, c22 = _quadratic_coeffs(grid, u, F)
    g = g + grid.mul23(c11, ifc.f11)
    if grid.d == 2:
        g = g + 2.0 * grid.mul23(c12, ifc.f12) + grid.mul23(c22, ifc.f22)
    return g


def check_trace_constraints(ifc, theta, traces, tol, mode="two_fluid"):
    """Hard runtime monitors: every supplied velocity trace must carry the
    normal flux theta, and every deformation column must be tangential."""
    sides = [("minus", traces.u_minus, traces.F_minus)]
    if mode != "one_fluid" and traces.u_plus is not None:
        sides.append(("plus", traces.u_plus, traces.F_plus))
    for name, u, F in sides:
        flux = -ifc.f1 * u[0] - ifc.f2 * u[1] + u[2]
        res = float(np.max(np.abs(flux - theta)))
        scale = max(1.0, float(np.max(np.abs(theta))))
        if res > tol * scale:
            raise MonitorBreach(
                f"flux-consistency-{name}",
                f"sup |u.N - theta| = {res:.3e} > {tol:.1e} * {scale:.3g}",
            )
        if F is not None:
            tang = -ifc.f1[None] * F[0] - ifc.f2[None] * F[1] + F[2]
            resF = float(np.max(np.abs(tang)))
            scaleF = max(1.0, float(np.max(np.abs(F))))
            if resF > tol * scaleF:
                raise MonitorBreach(
                    f"deformation-tangency-{name}",
                    f"sup |F_j . N| = {resF:.3e} > {tol:.1e} * {scaleF:.3g}",
                )


def theta_rhs(fmap_plus, fmap_minus, theta, traces, press, rho,
              mode="two_fluid", dn_tol=TOL_DN, monitor_tol=None,
              return_parts=False, dn_x0=None):
    """Right-hand side of d_t theta.

    press carries the bulk pressure flux traces (PressurePieces; None means
    both zero).  monitor_tol, when set, enforces the trace constraints and
    aborts with the named condition on breach.  With return_parts=True the
    per-side assemblies and the interface pressure solve are also returned
    for reuse (g_plus, g_minus, p_bar, dn_plus, dn_minus); dn_x0 warm-starts
    the interface pressure solve (a previous p_bar)."""
    grid = fmap_minus.grid
    ifc = fmap_minus.interface
    theta = np.asarray(theta, dtype=float)
    if press is None:
        press = PressurePieces()
    if monitor_tol is not None:
        check_trace_constraints(ifc, theta, traces, monitor_tol, mode)
    g_minus = _g_side(grid, ifc, theta, traces.u_minus, traces.F_minus,
                      press.q_minus)
    if mode == "one_fluid":
        out = -g_minus
        if return_parts:
            return out, {"g_minus": g_minus, "g_plus": None, "p_bar": None,
                         "dn_plus": None, "dn_minus": None}
        return out
    if mode != "two_fluid":
        raise ConfigError(f"unknown evolution mode {mode!r}")
    rp, rm = _check_rho(rho)
    if rp == 0.0 or traces.u_plus is None:
        raise ConfigError("two-fluid evolution needs rho_plus > 0 and "
                          "plus-side traces")
    g_plus = _g_side(grid, ifc, theta, traces.u_plus, traces.F_plus,
                     press.q_plus)
    p_bar, dn_p, dn_m, _ = interface_pressure(
        fmap_plus, fmap_minus, rp, rm, g_plus, g_minus, tol=dn_tol, x0=dn_x0)
    tot = rp + rm
    out = -(rp * g_plus + rm * g_minus) / tot + (dn_p - dn_m) / tot
    if return_parts:
        return out, {"g_minus": g_minus, "g_plus": g_plus, "p_bar": p_bar,
                     "dn_plus": dn_p, "dn_minus": dn_m}
    return out


def principal_rhs(grid, ifc, theta, traces, rho, mode="two_fluid"):
    """Frozen-coefficient principal part of theta_rhs:
    -2 w_i d_i(theta) - sum (w_s w_r + v_s v_r - M_sr) d_s d_r f, with the
    same dealiased products as the full assembly, so that
    theta_rhs = principal_rhs + forcing_term holds to rounding."""
    if mode == "one_fluid":
        rho = (0.0, rho[1] if hasattr(rho, "__len__") else float(rho))
    w, v = weighted_velocities(traces, rho)
    rp, rm = _check_rho(rho)
    tot = rp + rm
    d1t = grid.d1(theta)
    out = -2.0 * grid.mul23(w[0], d1t)
    if grid.d == 2:
        out = out - 2.0 * grid.mul23(w[1], grid.d2(theta))
    # coefficient w_s w_r + v_s v_r - M_sr via the weighted-trace identity:
    # it equals (rho+ c+_sr + rho- c-_sr)/tot with c_sr from each side
    Fm = np.asarray(traces.F_minus, dtype=float)
    if rp > 0.0:
        Fp = np.asarray(traces.F_plus, dtype=float)
        cp = _quadratic_coeffs(grid, np.asarray(traces.u_plus, float), Fp)
        cm = _quadratic_coeffs(grid, np.asarray(traces.u_minus, float), Fm)
        c11 = (rp * cp[0] + rm * cm[0]) / tot
        c12 = (rp * cp[1] + rm * cm[1]) / tot
        c22 = (rp * cp[2] + rm * cm[2]) / tot
    else:
        c11, c12, c22 = _quadratic_coeffs(
            grid, np.asarray(traces.u_minus, float), Fm)
    out = out - grid.mul23(c11, ifc.f11)
    if grid.d == 2:
        out = out - 2.0 * grid.mul23(c12, ifc.f12) - grid.mul23(c22, ifc.f22)
    return out


def forcing_term(fmap_plus, fmap_minus, theta, traces, press, rho,
                 mode="two_fluid", dn_tol=TOL_DN):
    """Inhomogeneity of the linearized evolution: everything theta_rhs
    carries beyond its frozen-coefficient principal part, namely the bulk
    pressure flux traces and the nonlocal interface-pressure correction."""
    grid = fmap_minus.grid
    ifc = fmap_minus.interface
    theta = np.asarray(theta, dtype=float)
    if press is None:
        press = PressurePieces()
    if mode == "one_fluid":
        if press.q_minus is None:
            return np.zeros(grid.shape)
        return -np.asarray(press.q_minus, dtype=float)
    rp, rm = _check_rho(rho)
    g_minus = _g_side(grid, ifc, theta, traces.u_minus, traces.F_minus,
                      press.q_minus)
    g_plus = _g_side(grid, ifc, theta, traces.u_plus, traces.F_plus,
                     press.q_plus)
    _, dn_p, dn_m, _ = interface_pressure(
        fmap_plus, fmap_minus, rp, rm, g_plus, g_minus, tol=dn_tol)
    tot = rp + rm
    qp = 0.0 if press.q_plus is None else np.asarray(press.q_plus, float)
    qm = 0.0 if press.q_minus is None else np.asarray(press.q_minus, float)
    return -(rp * qp + rm * qm) / tot + (dn_p - dn_m) / tot


def bulk_pressure_traces(fmap, u, F, tol=TOL_ELL):
    """Interface flux trace N . grad(p_uu - sum_j p_FjFj)|_0 for one side."""
    p = pressure_combo(fmap, u, F, tol=tol)
    return normal_flux_trace(fmap, p)


def energy_es(grid, f, theta, traces, rho, s=3):
    """Weighted interface energy at Sobolev index s:

      || <D>^{s-1/2} theta + w_i d_i <D>^{s-1/2} f ||^2
      - || v_i d_i <D>^{s-1/2} f ||^2
      + sum_j sum_side (rho_side/tot) || F_side_ij d_i <D>^{s-1/2} f ||^2

    plus the measured coercivity ratio
    (E_s + ||theta||^2 + ||f||^2) / (||theta||_{s-1/2}^2 + ||f||_{s+1/2}^2)."""
    if s < 3 or int(s) != s:
        raise ConfigError(f"Sobolev index must be an integer >= 3, got {s}")
    rp, rm = _check_rho(rho)
    f = np.asarray(f, dtype=float)
    theta = np.asarray(theta, dtype=float)
    fs = fourier_multiplier(grid, f, s - 0.5, kind="bessel")
    ths = fourier_multiplier(grid, theta, s - 0.5, kind="bessel")
    g1 = grid.d1(fs)
    g2 = grid.d2(fs)
    w, v = weighted_velocities(traces, rho)
    adv = ths + grid.mul23(w[0], g1) + grid.mul23(w[1], g2)
    shear = grid.mul23(v[0], g1) + grid.mul23(v[1], g2)
    advected_sq = float(grid.norm(adv) ** 2)
    shear_sq = float(grid.norm(shear) ** 2)
    tot = rp + rm

    def elastic(F):
        val = 0.0
        for j in range(3):
            e = grid.mul23(F[0, j], g1) + grid.mul23(F[1, j], g2)
            val += float(grid.norm(e) ** 2)
        return val

    elastic_minus_sq = (rm / tot) * elastic(np.asarray(traces.F_minus, float))
    elastic_plus_sq = 0.0
    if rp > 0.0 and traces.F_plus is not None:
        elastic_plus_sq = (rp / tot) * elastic(np.asarray(traces.F_plus, float))
    total = advected_sq - shear_sq + elastic_plus_sq + elastic_minus_sq
    num = total + float(grid.norm(theta) ** 2) + float(grid.norm(f) ** 2)
    den = float(
        grid.norm(fourier_multiplier(grid, theta, s - 0.5, "bessel")) ** 2
        + grid.norm(fourier_multiplier(grid, f, s + 0.5, "bessel")) ** 2
    )
    coercivity = num / den if den > 0.0 else float("nan")
    return EnergyReport(
        total=total,
        advected_sq=advected_sq,
        shear_sq=shear_sq,
        elastic_plus_sq=elastic_plus_sq,
        elastic_minus_sq=elastic_minus_sq,
        coercivity=coercivity,
        s=float(s),
    )


def flat_mode_matrix(state, rho, k, mode="two_fluid"):
    """Exact 2x2 system matrix for the mode e^{i k x} of the linearization
    about a constant-trace flat equilibrium: d/dt (f_k, theta_k) = A (f_k,
    theta_k).  On a flat interface both DN maps are Fourier multipliers
    |k| tanh(|k| h), so the nonlocal terms close per mode."""
    k = np.asarray(k, dtype=float).reshape(-1)
    if k.size == 1:
        k = np.array([float(k[0]), 0.0])
    kn = float(np.sqrt(k @ k))
    if kn == 0.0:
        raise ConfigError("flat-state analysis needs a nonzero mode")
    um = np.asarray(state.u_minus, dtype=float).reshape(-1)[:2]
    Fm = np.asarray(state.F_minus, dtype=float).reshape(-1, 3)[:2]
    Um = float(k @ um)
    Pm = float(np.sum((k @ Fm) ** 2))
    if mode == "one_fluid":
        a21 = Um * Um - Pm
        a22 = -2.0j * Um
        return np.array([[0.0, 1.0], [a21, a22]], dtype=complex)
    if mode != "two_fluid":
        raise ConfigError(f"unknown evolution mode {mode!r}")
    rp, rm = _check_rho(rho)
    if rp == 0.0:
        raise ConfigError("two-fluid flat-state analysis needs rho_plus > 0")
    up = np.asarray(state.u_plus, dtype=float).reshape(-1)[:2]
    Fp = np.asarray(state.F_plus, dtype=float).reshape(-1, 3)[:2]
    Up = float(k @ up)
    Pp = float(np.sum((k @ Fp) ** 2))
    tot = rp + rm
    h_plus = 1.0 - state.mean_f
    h_minus = 1.0 + state.mean_f
    dn_p = kn * np.tanh(kn * h_plus)
    dn_m = kn * np.tanh(kn * h_minus)
    weighted = dn_p / rp + dn_m / rm
    skew = (dn_p - dn_m) / weighted
    kw = (rp * Up + rm * Um) / tot
    kv = np.sqrt(rp * rm) * (Up - Um) / tot
    a21 = (kw * kw + kv * kv - (rp * Pp + rm * Pm) / tot
           + (skew / tot) * (Pp - Up * Up - Pm + Um * Um))
    a22 = -2.0j * kw + (2.0 * skew / tot) * 1.0j * (Up - Um)
    return np.array([[0.0, 1.0], [a21, a22]], dtype=complex)


def flat_state_spectrum(state, rho, k_list, mode="two_fluid"):
    """Eigenvalue pair of the per-mode matrix for each wavevector in k_list;
    returns a complex array (len(k_list), 2) sorted by real part per mode."""
    out = np.zeros((len(k_list), 2), dtype=complex)
    for i, k in enumerate(k_list):
        lam = np.linalg.eigvals(flat_mode_matrix(state, rho, k, mode))
        out[i] = lam[np.argsort(lam.real + 1e-12 * lam.imag)]
    return out


def constant_traces(grid, u_minus, F_minus, u_plus=None, F_plus=None):
    """TraceBundle of constant traces (vertical components zero, tangential
    over a flat interface): velocities length-2, deformations (2, 3)."""

    def vec(u):
        out = np.zeros((3,) + grid.shape)
        out[0] = float(u[0])
        out[1] = float(u[1])
        return out

    def mat(F):
        F = np.asarray(F, dtype=float)
        out = np.zeros((3, 3) + grid.shape)
        for s in range(2):
            for j in range(3):
                out[s, j] = F[s, j]
        return out

    return TraceBundle(
        u_minus=vec(u_minus),
        F_minus=mat(F_minus),
        u_plus=None if u_plus is None else vec(u_plus),
        F_plus=None if F_plus is None else mat(F_plus),
    )
