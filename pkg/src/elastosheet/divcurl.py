"""Reconstruction of one side's bulk vector field from curl, divergence,
interface flux, and lid averages.

The pipeline for data (omega, g, theta, alpha):

  1. particular field  u_p = (J * int_0^s om_2 dt - d2 psi,
                              -J * int_0^s om_1 dt + d1 psi, 0)
     with Delta_h psi = P(omega . N restricted to the interface); its curl
     matches omega up to gradients and it carries no vertical component,
  2. divergence correction grad(phi1), Delta phi1 = g - div u_p with
     phi1 = 0 on the interface and zero lid slope,
  3. horizontal constants pin the lid averages to alpha; over a curved
     interface they carry flux -c . grad'f into the next stage,
  4. flux correction grad(phi2), phi2 harmonic with the oblique interface
     row N . grad phi2 = theta - (u . N) and zero lid slope.  Its
     horizontal lid means vanish identically, so step 3 is final.

Lid impermeability (u3 = 0 at s = 1) holds row-exactly by construction.
Solvability needs the three compatibility conditions checked by
check_compatibility: solenoidal curl data (C1), zero lid circulation of its
vertical component (C2), and the net-flux balance between theta and g (C3).
"""

import numpy as np
from dataclasses import dataclass

from .elliptic import TOL_ELL, divfree_project, solve_strip, solve_strip_oblique
from .errors import CompatibilityError, ConvergenceError
from .geometry import lid, trace
from .spectral_core import project_mean_zero

COMPAT_TOL = 1e-8
RESIDUAL_TOL = 1e-4


@dataclass
class CompatibilityReport:
    c1: float
    c2: float
    c3: float
    tol: float
    ok: bool


def check_compatibility(fmap, omega, g, theta, tol=COMPAT_TOL, raise_on_fail=True):
    """Residuals of the three solvability conditions (volume measures).

    c1 = ||div omega||_L2, c2 = |int_lid omega_3 dx'|,
    c3 = |int theta dx' + sign(side) int_side g dV|.
    Each is compared against tol * max(1, data scale).
    """
    grid = fmap.grid
    omega = np.asarray(omega, dtype=float)
    c1 = fmap.norm(fmap.div(omega))
    c2 = abs(grid.integral(lid(omega[2])))
    int_g = 0.0 if g is None else fmap.integral(np.asarray(g, dtype=float))
    c3 = abs(grid.integral(np.asarray(theta, dtype=float)) + fmap.strip.sign * int_g)
    s1 = max(1.0, fmap.norm_vec(omega))
    s2 = max(1.0, grid.norm(lid(omega[2])))
    s3 = max(1.0, grid.norm(np.asarray(theta, dtype=float)) + abs(int_g))
    ok = c1 <= tol * s1 and c2 <= tol * s2 and c3 <= tol * s3
    report = CompatibilityReport(c1=c1, c2=c2, c3=c3, tol=tol, ok=ok)
    if raise_on_fail and not ok:
        if c1 > tol * s1:
            raise CompatibilityError(
                f"curl data is not solenoidal (C1): ||div omega|| = {c1:.3e}"
            )
        if c2 > tol * s2:
            raise CompatibilityError(
                f"curl data has net lid circulation (C2): |int omega_3| = {c2:.3e}"
            )
        raise CompatibilityError(
            f"interface flux does not balance the divergence (C3): residual = {c3:.3e}"
        )
    return report


def reconstruct_batch(fmap, omegas, gs, thetas, alphas, tol=TOL_ELL):
    """Reconstruct B fields sharing one map: omegas (B, 3, n1, n2, m),
    gs (B, n1, n2, m) or None, thetas (B, n1, n2), alphas (B, 2).
    The two strip solves are batched across all B systems."""
    grid = fmap.grid
    st = fmap.strip
    ifc = fmap.interface
    B = omegas.shape[0]
    Jc = fmap.J[None, ..., None]

    I1 = st.antiderivative(omegas[:, 0])
    I2 = st.antiderivative(omegas[:, 1])
    R0 = (
        omegas[:, 2, :, :, 0]
        - ifc.f1[None] * omegas[:, 0, :, :, 0]
        - ifc.f2[None] * omegas[:, 1, :, :, 0]
    )
    R0 = R0 - R0.mean(axis=(1, 2), keepdims=True)
    inv_lap = np.zeros_like(grid.ksq)
    np.divide(-1.0, grid.ksq, out=inv_lap, where=grid.ksq > 0.0)

    up1 = Jc * I2
    up2 = -Jc * I1
    for i in range(B):
        psi = grid.apply_multiplier(R0[i], inv_lap)
        up1[i] -= grid.d2(psi)[..., None]
        up2[i] += grid.d1(psi)[..., None]

    rhs = np.empty((B,) + grid.shape + (st.m,))
    for i in range(B):
        div_up = (
            grid.d1(up1[i]) - fmap.a1 * st.ds(up1[i])
            + grid.d2(up2[i]) - fmap.a2 * st.ds(up2[i])
        )
        rhs[i] = -div_up if gs is None else gs[i] - div_up
    phi1 = solve_strip(fmap, rhs, np.zeros((B,) + grid.shape), "neumann0", tol)

    u = np.zeros((B, 3) + grid.shape + (st.m,))
    for i in range(B):
        gp = fmap.grad(phi1[i])
        u[i, 0] = up1[i] + gp[0]
        u[i, 1] = up2[i] + gp[1]
        u[i, 2] = gp[2]

    # Constants must enter before the flux stage: over a curved interface
    # they change u . N by -c . grad'f, and the oblique solve absorbs that.
    # grad(phi2) has exactly zero horizontal lid mean (pure ik multipliers
    # at s = 1, where the a_i vanish), so the averages pinned here hold.
    lid_mean = u[:, :2, :, :, -1].mean(axis=(2, 3))
    u[:, :2] += (alphas - lid_mean)[:, :, None, None, None]

    vN = (
        -ifc.f1[None] * u[:, 0, :, :, 0]
        - ifc.f2[None] * u[:, 1, :, :, 0]
        + u[:, 2, :, :, 0]
    )
    phi2 = solve_strip_oblique(fmap, thetas - vN, tol)
    for i in range(B):
        gp = fmap.grad(phi2[i])
        u[i] += gp
    return u


def solve_div_curl(fmap, omega, g, theta, alpha, tol=TOL_ELL, check=True,
                   compat_tol=COMPAT_TOL, residual_tol=RESIDUAL_TOL,
                   return_diagnostics=False):
    """Reconstruct one field.  check=True verifies compatibility first and
    the curl/div/flux residuals afterwards (relative to the data scale),
    raising CompatibilityError / ConvergenceError on failure."""
    omega = np.asarray(omega, dtype=float)
    theta = np.asarray(theta, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(2)
    if check:
        check_compatibility(fmap, omega, g, theta, compat_tol)
    gs = None if g is None else np.asarray(g, dtype=float)[None]
    u = reconstruct_batch(fmap, omega[None], gs, theta[None], alpha[None], tol)[0]
    if not (check or return_diagnostics):
        return u
    ifc = fmap.interface
    scale = 1.0 + fmap.norm_vec(omega) + fmap.grid.norm(theta)
    curl_res = fmap.norm_vec(fmap.curl(u) - omega)
    gres = fmap.div(u) if g is None else fmap.div(u) - g
    div_res = fmap.norm(gres)
    # u . N carries the mean that balances int g (C3), so compare raw traces
    uN = -ifc.f1 * trace(u[0]) - ifc.f2 * trace(u[1]) + trace(u[2])
    flux_res = fmap.grid.norm(uN - theta)
    diag = {"curl": curl_res, "div": div_res, "flux": flux_res, "scale": scale}
    if check:
        for name, val in (("curl", curl_res), ("div", div_res), ("flux", flux_res)):
            if val > residual_tol * scale:
                raise ConvergenceError(
                    f"reconstruction {name} residual {val:.3e} exceeds "
                    f"{residual_tol:.1e} * scale on side '{fmap.strip.side}'"
                )
    return (u, diag) if return_diagnostics else u


def recover_state(fmap_plus, fmap_minus, theta, minus, plus=None, tol=TOL_ELL,
                  project=True):
    """Velocity and deformation columns of both sides from their curl data.

    minus / plus = (omega, G, beta, gamma) for that side; plus=None skips
    the upper region (one-fluid mode).  Both sides impose the same interface
    flux theta on the velocity and zero flux on the deformation columns.
    Returns ((u_minus, F_minus), (u_plus, F_plus) or None).
    """
    om, G, beta, gamma = minus
    out_minus = recover_side(fmap_minus, om, G, beta, gamma, theta, tol, project)
    out_plus = None
    if plus is not None:
        om, G, beta, gamma = plus
        out_plus = recover_side(fmap_plus, om, G, beta, gamma, theta, tol, project)
    return out_minus, out_plus


def recover_side(fmap, omega, G, beta, gamma, theta, tol=TOL_ELL, project=True):
    """Velocity and deformation columns of one side from its curl data.

    omega (3, n1, n2, m): curl of the velocity;  G (3, 3, n1, n2, m): G[j] is
    the curl of deformation column j;  beta (2,): lid averages of the
    horizontal velocity;  gamma (2, 3): lid averages of the horizontal
    deformation entries, gamma[:, j] for column j;  theta (n1, n2): interface
    normal flux of the velocity (columns carry zero flux).

    project=True re-projects the four curl inputs onto solenoidal fields
    first (one batched solve); the reconstruction itself batches the four
    systems.  Returns (u, F) with F[j] the j-th deformation column.
    """
    grid = fmap.grid
    fields = np.stack([omega, G[0], G[1], G[2]])
    if project:
        fields = divfree_project(fmap, fields, tol)
    thetas = np.zeros((4,) + grid.shape)
    thetas[0] = project_mean_zero(grid, np.asarray(theta, dtype=float))
    alphas = np.stack([
        np.asarray(beta, dtype=float),
        np.asarray(gamma, dtype=float)[:, 0],
        np.asarray(gamma, dtype=float)[:, 1],
        np.asarray(gamma, dtype=float)[:, 2],
    ])
    out = reconstruct_batch(fmap, fields, None, thetas, alphas, tol)
    return out[0], out[1:]
