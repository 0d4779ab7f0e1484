"""Dirichlet-Neumann maps on the interface and their weighted algebra.

For interface data g, each side extends g harmonically into its strip (zero
lid flux) and takes the co-normal derivative back on the interface:

    DN^side g = -sign(side) * N . grad(extension) |_{s=0},  N = (-d1 f, -d2 f, 1)

With this sign both maps are nonnegative and self-adjoint on mean-zero data,
and on a flat interface of depth h they reduce to the Fourier multiplier
|k| tanh(|k| h).  The density-weighted sum

    T = (1/rho_plus) DN_plus + (1/rho_minus) DN_minus

is the operator the interface pressure solves against; it is inverted with
preconditioned CG (flat-symbol inverse as the preconditioner), falling back
to BiCGstab if the iteration stalls, and the result is verified against the
true residual.
"""

import numpy as np

from .elliptic import MAXITER_ELL, TOL_ELL, harmonic_extension
from .errors import ConfigError, ConvergenceError
from .geometry import normal_flux_trace
from .krylov import bicgstab, pcg
from .spectral_core import project_mean_zero

TOL_DN = 1e-10
MAXITER_DN = 200


def flat_dn_symbol(grid, h):
    """|k| tanh(|k| h): the flat-interface symbol at mean depth h."""
    return grid.kabs * np.tanh(grid.kabs * h)


def dn_apply(fmap, g, tol=TOL_ELL, maxiter=MAXITER_ELL, x0=None):
    """Apply one side's Dirichlet-Neumann map to interface data g.

    Returns a mean-zero interface field (the continuous map annihilates
    the mean, so the discrete mean is projected out).
    """
    ext = harmonic_extension(fmap, g, "neumann0", tol, maxiter, x0)
    flux = normal_flux_trace(fmap, ext)
    return project_mean_zero(fmap.grid, -fmap.strip.sign * flux)


def _check_rho(rho_plus, rho_minus):
    if not rho_plus > 0 or not rho_minus > 0:
        raise ConfigError(
            "density-weighted sum needs strictly positive densities on both "
            f"sides, got rho_plus={rho_plus}, rho_minus={rho_minus}"
        )


def dn_tilde(fmap_plus, fmap_minus, rho_plus, rho_minus, g,
             tol=TOL_ELL, maxiter=MAXITER_ELL):
    """(1/rho_plus) DN_plus g + (1/rho_minus) DN_minus g."""
    _check_rho(rho_plus, rho_minus)
    return (
        dn_apply(fmap_plus, g, tol, maxiter) / rho_plus
        + dn_apply(fmap_minus, g, tol, maxiter) / rho_minus
    )


def dn_invert(fmap_plus, fmap_minus, rho_plus, rho_minus, g,
              tol=TOL_DN, maxiter=MAXITER_DN, x0=None):
    """Solve T q = g for mean-zero g, T the density-weighted sum.

    T is symmetric positive definite on mean-zero interface data, so the
    iteration is CG preconditioned by the inverse flat symbol
    sum_side |k| tanh(|k| h_side) / rho_side; a stall switches to BiCGstab.
    Data with a mean beyond 1e-10 (relative) is rejected: the operator range
    is mean-free and such a system has no solution.
    """
    _check_rho(rho_plus, rho_minus)
    grid = fmap_plus.grid
    g = np.asarray(g, dtype=float)
    scale = float(np.max(np.abs(g)))
    if scale == 0.0:
        return np.zeros_like(g)
    if abs(float(g.mean())) > 1e-10 * max(1.0, scale):
        raise ConfigError(
            f"dn_invert needs mean-zero data: relative mean {float(g.mean()) / scale:.3e}"
        )
    b = project_mean_zero(grid, g)

    sym = (
        flat_dn_symbol(grid, fmap_plus.strip.h) / rho_plus
        + flat_dn_symbol(grid, fmap_minus.strip.h) / rho_minus
    )
    inv_sym = np.zeros_like(sym)
    np.divide(1.0, sym, out=inv_sym, where=sym > 0.0)

    # inner extensions one decade below the outer target, floored above the
    # BiCGstab roundoff plateau (~1.5e-11 on deep strips)
    inner_tol = max(3e-11, 0.1 * tol)

    def A(q):
        return dn_tilde(fmap_plus, fmap_minus, rho_plus, rho_minus, q,
                        tol=inner_tol)

    def M(r):
        return grid.apply_multiplier(r, inv_sym)

    x, _, rel = pcg(A, M, b, tol=0.2 * tol, maxiter=maxiter, x0=x0)
    if rel > tol:
        x, _, rel = bicgstab(A, M, b, tol=0.2 * tol, maxiter=maxiter, x0=x)
    resid = float(np.sqrt(np.sum((b - A(x)) ** 2) / np.sum(b * b)))
    if resid > tol:
        raise ConvergenceError(
            f"interface operator inversion stalled: relative residual {resid:.3e} "
            f"(tol {tol:.1e})"
        )
    return project_mean_zero(grid, x)


def interface_pressure(fmap_plus, fmap_minus, rho_plus, rho_minus,
                       g_plus, g_minus, tol=TOL_DN, maxiter=MAXITER_DN, x0=None):
    """Interface pressure p from the jump data: T p = P(g_plus - g_minus).

    Returns (p, DN_plus p, DN_minus p, relative_residual); the two one-sided
    maps of p come out of the verification pass and are exactly what the
    evolution needs next, so they are returned rather than recomputed.
    """
    grid = fmap_plus.grid
    rhs = project_mean_zero(grid, np.asarray(g_plus) - np.asarray(g_minus))
    p = dn_invert(fmap_plus, fmap_minus, rho_plus, rho_minus, rhs,
                  tol=tol, maxiter=maxiter, x0=x0)
    dn_p_plus = dn_apply(fmap_plus, p)
    dn_p_minus = dn_apply(fmap_minus, p)
    applied = dn_p_plus / rho_plus + dn_p_minus / rho_minus
    num = float(np.sqrt(np.sum((applied - rhs) ** 2)))
    den = float(np.sqrt(np.sum(rhs * rhs)))
    rel = num / den if den > 0.0 else 0.0
    if den > 0.0 and rel > 10.0 * tol:
        raise ConvergenceError(
            f"interface pressure residual {rel:.3e} exceeds tolerance {10.0 * tol:.1e}"
        )
    return p, dn_p_plus, dn_p_minus, rel
