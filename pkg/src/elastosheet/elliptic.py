"""Elliptic solves on the flattened strips.

Everything here solves the pulled-back Laplacian

    Delta = Delta_h - 2 a_i d_i d_s + c_ss d_ss + b d_s

from geometry.FlattenMap by Fourier collocation in the horizontal and
Chebyshev collocation in s, with the boundary rows replaced by the boundary
conditions: the interface row (s = 0) is either a Dirichlet row or the
oblique row N.grad u = data, and the lid row (s = 1) is homogeneous Neumann
(d_3 u = 0) or homogeneous Dirichlet.

The iteration is right-preconditioned BiCGstab in physical space.  The
preconditioner is the exact inverse of the same discretisation at f == <f>
(flat strip of the same depth), assembled once per (side, resolution, depth,
boundary kind) as dense m x m blocks per horizontal mode and cached.  When
the map is actually flat the preconditioner IS the operator inverse and the
solve reduces to one application.

Arrays are batched as (B, n1, n2, m); a batch shares one operator, so four
right-hand sides cost one combined Krylov solve.  Public entry points accept
unbatched (n1, n2, m) fields too.
"""

import numpy as np

from .errors import ConfigError, ConvergenceError
from .krylov import bicgstab
from .spectral_core import project_mean_zero

TOL_ELL = 1e-10
MAXITER_ELL = 500

_CACHE_BYTES_MAX = 3e8
_flat_inv_cache = {}

_BC_OUTER = ("neumann0", "dirichlet0")


# ----------------------------------------------------------------------
# batched horizontal transforms: fields (B, n1, n2, m), spectra (B, K1, n2, m)

def _rh(y):
    return np.fft.rfftn(y, axes=(2, 1))


def _irh(yh, n1, n2):
    return np.fft.irfftn(yh, s=(n2, n1), axes=(2, 1))


def _bk(mult):
    # (K1, n2) multiplier -> broadcastable over (B, K1, n2, m)
    return mult[None, :, :, None]


def _item_norms(a):
    return np.sqrt(np.sum(a * a, axis=tuple(range(1, a.ndim))))


# ----------------------------------------------------------------------
# operator application

def _apply_op(fmap, u, kind):
    """Collocation rows of the strip operator with BC rows substituted.

    u: (B, n1, n2, m).  kind = (interface_row, lid_row) with
    interface_row in {"dirichlet", "oblique"}, lid_row in _BC_OUTER.
    The oblique interface row is mean-pinned: its k = 0 content is replaced
    by the interface mean of u, so the singular pure-Neumann problem becomes
    uniquely solvable against a mean-projected right-hand side.
    """
    g = fmap.grid
    st = fmap.strip
    us = u @ st.DsT
    uss = us @ st.DsT
    uh = _rh(u)
    ush = _rh(us)
    lap_h = _irh(_bk(-g.ksq) * uh, g.n1, g.n2)
    d1us = _irh(_bk(g.ik1) * ush, g.n1, g.n2)
    L = lap_h - 2.0 * fmap.a1 * d1us + fmap.css * uss + fmap.b * us
    if g.n2 > 1:
        d2us = _irh(_bk(g.ik2) * ush, g.n1, g.n2)
        L -= 2.0 * fmap.a2 * d2us

    f = fmap.interface
    if kind[0] == "dirichlet":
        L[..., 0] = u[..., 0]
    else:
        u0 = u[..., 0]
        us0 = us[..., 0]
        uh0 = uh[..., 0]
        d1u0 = np.fft.irfftn(g.ik1[None] * uh0, s=(g.n2, g.n1), axes=(2, 1))
        row = -f.f1 * (d1u0 - fmap.a1[..., 0] * us0) + us0 / fmap.J
        if g.n2 > 1:
            d2u0 = np.fft.irfftn(g.ik2[None] * uh0, s=(g.n2, g.n1), axes=(2, 1))
            row -= f.f2 * (d2u0 - fmap.a2[..., 0] * us0)
        row += u0.mean(axis=(1, 2), keepdims=True) - row.mean(axis=(1, 2), keepdims=True)
        L[..., 0] = row

    if kind[1] == "neumann0":
        L[..., -1] = us[..., -1] / fmap.J
    else:
        L[..., -1] = u[..., -1]
    return L


# ----------------------------------------------------------------------
# flat-strip preconditioner

def _flat_blocks(fmap, kind):
    # Cache key rounds the depth: a preconditioner at a depth off by < 1e-9
    # is still an excellent preconditioner.  The flat-map direct path needs
    # blocks at the exact depth, so the entry remembers which h built it.
    st = fmap.strip
    g = fmap.grid
    h = st.h
    key = (st.side, kind, g.n1, g.n2, st.m, round(h, 9))
    hit = _flat_inv_cache.get(key)
    if hit is not None:
        h_built, inv = hit
        if not fmap.flat or h_built == h:
            return inv
    m = st.m
    Jf = st.sign * h
    K1, n2 = g.ksq.shape
    A = np.broadcast_to((st.Ds @ st.Ds) / h**2, (K1, n2, m, m)).copy()
    A -= g.ksq[:, :, None, None] * np.eye(m)
    if kind[0] == "dirichlet":
        A[..., 0, :] = 0.0
        A[..., 0, 0] = 1.0
    else:
        A[..., 0, :] = st.Ds[0] / Jf
        zero = g.ksq == 0.0
        A[zero, 0, :] = 0.0
        A[zero, 0, 0] = 1.0
    if kind[1] == "neumann0":
        A[..., -1, :] = st.Ds[-1] / Jf
    else:
        A[..., -1, :] = 0.0
        A[..., -1, -1] = 1.0
    inv = np.linalg.inv(A)
    if inv.nbytes <= _CACHE_BYTES_MAX:
        while len(_flat_inv_cache) >= 64:
            _flat_inv_cache.pop(next(iter(_flat_inv_cache)))
        _flat_inv_cache[key] = (h, inv)
    return inv


def _precond(fmap, blocks, y):
    g = fmap.grid
    yh = _rh(y)
    xh = np.einsum("kyij,bkyj->bkyi", blocks, yh)
    return _irh(xh, g.n1, g.n2)


# ----------------------------------------------------------------------
# combined solve with per-item verification

def _krylov_strip(fmap, kind, b, tol, maxiter, x0):
    blocks = _flat_blocks(fmap, kind)
    if fmap.flat:
        # preconditioner is the exact inverse of the operator
        return _precond(fmap, blocks, b)

    def A(u):
        return _apply_op(fmap, u, kind)

    def M(y):
        return _precond(fmap, blocks, y)

    x, _, _ = bicgstab(A, M, b, tol=0.3 * tol, maxiter=maxiter, x0=x0)
    res = _item_norms(b - A(x))
    scale = _item_norms(b)
    floor = tol * max(1e-30, float(scale.max()))
    bad = res > np.maximum(tol * scale, floor)
    if bad.any():
        for i in np.nonzero(bad)[0]:
            xi, _, _ = bicgstab(
                lambda u: _apply_op(fmap, u, kind),
                lambda y: _precond(fmap, blocks, y),
                b[i : i + 1],
                tol=0.3 * tol,
                maxiter=maxiter,
                x0=x[i : i + 1],
            )
            x[i] = xi[0]
        res = _item_norms(b - A(x))
        bad = res > np.maximum(tol * scale, floor)
        if bad.any():
            # deep strips hit a BiCGstab roundoff plateau that grows with m
            # (about 2e-10 relative at m=64); a stall within one order of the
            # request is the attainable answer, not a failure.  Callers that
            # certify accuracy re-verify their own composite residuals.
            hard = res > 10.0 * np.maximum(tol * scale, floor)
            if hard.any():
                worst = float((res / np.maximum(scale, 1e-30)).max())
                raise ConvergenceError(
                    f"strip solve stalled on side '{fmap.strip.side}': relative residual "
                    f"{worst:.3e} after {maxiter} iterations (tol {tol:.1e})"
                )
    return x


def _batched(arr, m):
    a = np.asarray(arr, dtype=float)
    if a.ndim == 3:
        return a[None], True
    if a.ndim == 4:
        return a, False
    raise ConfigError(f"strip field must have 3 or 4 axes, got shape {a.shape}")


# ----------------------------------------------------------------------
# public entry points

def solve_strip(fmap, rhs, dirichlet_interface, bc_outer="neumann0",
                tol=TOL_ELL, maxiter=MAXITER_ELL, x0=None):
    """Solve Delta u = rhs with u = dirichlet_interface at s = 0 and the
    homogeneous lid condition bc_outer ('neumann0' or 'dirichlet0').

    rhs may be (n1, n2, m) or batched (B, n1, n2, m) with matching
    (B, n1, n2) interface data; a batch is solved as one combined system.

    Residuals are driven to tol relative; a solve that plateaus within one
    order of tol (the iteration's roundoff floor on deep strips) returns the
    attained answer, and anything worse raises ConvergenceError.
    """
    if bc_outer not in _BC_OUTER:
        raise ConfigError(f"unknown lid condition '{bc_outer}'")
    b, squeeze = _batched(rhs, fmap.strip.m)
    b = b.copy()
    gdata = np.asarray(dirichlet_interface, dtype=float)
    if squeeze and gdata.ndim == 2:
        gdata = gdata[None]
    b[..., 0] = gdata
    b[..., -1] = 0.0
    if x0 is not None:
        x0, _ = _batched(x0, fmap.strip.m)
    x = _krylov_strip(fmap, ("dirichlet", bc_outer), b, tol, maxiter, x0)
    return x[0] if squeeze else x


def solve_strip_oblique(fmap, flux_interface, tol=TOL_ELL, maxiter=MAXITER_ELL, x0=None):
    """Harmonic u with N.grad u = flux at s = 0 and d_3 u = 0 at the lid.

    The flux is projected to zero horizontal mean (the compatible part);
    the solution's own interface mean is pinned to zero.
    """
    g = fmap.grid
    flux = np.asarray(flux_interface, dtype=float)
    squeeze = flux.ndim == 2
    if squeeze:
        flux = flux[None]
    flux = flux - flux.mean(axis=(1, 2), keepdims=True)
    b = np.zeros((flux.shape[0], g.n1, g.n2, fmap.strip.m))
    b[..., 0] = flux
    if x0 is not None:
        x0, _ = _batched(x0, fmap.strip.m)
    x = _krylov_strip(fmap, ("oblique", "neumann0"), b, tol, maxiter, x0)
    return x[0] if squeeze else x


def harmonic_extension(fmap, g, bc_outer="neumann0", tol=TOL_ELL, maxiter=MAXITER_ELL, x0=None):
    """Harmonic extension of interface data g into the strip."""
    gdata = np.asarray(g, dtype=float)
    if gdata.ndim == 2:
        shape = (fmap.grid.n1, fmap.grid.n2, fmap.strip.m)
    else:
        shape = (gdata.shape[0], fmap.grid.n1, fmap.grid.n2, fmap.strip.m)
    return solve_strip(fmap, np.zeros(shape), gdata, bc_outer, tol, maxiter, x0)


def bilinear_rhs(fmap, u1, u2):
    """-tr(grad u1 grad u2) = -sum_ab d_a u1_b d_b u2_a, dealiased."""
    g = fmap.grid
    D1 = np.stack([fmap.grad(u1[c]) for c in range(3)])  # [c, a] = d_a u1_c
    if u2 is u1:
        D2 = D1
    else:
        D2 = np.stack([fmap.grad(u2[c]) for c in range(3)])
    rhs = np.zeros_like(u1[0])
    for a in range(3):
        for c in range(3):
            rhs -= g.mul23(D1[c, a], D2[a, c])
    return rhs


def pressure_bilinear(fmap, u1, u2, tol=TOL_ELL, maxiter=MAXITER_ELL):
    """Bilinear pressure: Delta p = -tr(grad u1 grad u2), p = 0 at the
    interface, d_3 p = 0 at the lid."""
    rhs = bilinear_rhs(fmap, u1, u2)
    zero = np.zeros((fmap.grid.n1, fmap.grid.n2))
    return solve_strip(fmap, rhs, zero, "neumann0", tol, maxiter)


def pressure_combo(fmap, u, F, tol=TOL_ELL, maxiter=MAXITER_ELL):
    """q = p_{u,u} - sum_j p_{F_j,F_j} in a single solve (the right-hand
    sides combine linearly and the boundary data are identical)."""
    rhs = bilinear_rhs(fmap, u, u)
    for j in range(3):
        rhs -= bilinear_rhs(fmap, F[j], F[j])
    zero = np.zeros((fmap.grid.n1, fmap.grid.n2))
    return solve_strip(fmap, rhs, zero, "neumann0", tol, maxiter)


def assemble_pressure(fmap, p_bar, u, F, rho, tol=TOL_ELL, maxiter=MAXITER_ELL):
    """One-sided pressure: harmonic extension of the interface pressure plus
    rho * (p_{u,u} - sum_j p_{F_j,F_j}).  p_bar = None drops the harmonic
    part (one-fluid: the interface pressure vanishes)."""
    p = rho * pressure_combo(fmap, u, F, tol, maxiter)
    if p_bar is not None:
        p += harmonic_extension(fmap, p_bar, "neumann0", tol, maxiter)
    return p


def divfree_project(fmap, w, tol=TOL_ELL, maxiter=MAXITER_ELL):
    """Leray-type projection: subtract grad phi, Delta phi = div w, phi = 0
    at the interface, d_3 phi = 0 at the lid.  Accepts one field (3, n1, n2, m)
    or a stack (B, 3, n1, n2, m); a stack shares one combined solve."""
    w = np.asarray(w, dtype=float)
    squeeze = w.ndim == 4
    ws = w[None] if squeeze else w
    B = ws.shape[0]
    rhs = np.stack([fmap.div(ws[i]) for i in range(B)])
    zero = np.zeros((B, fmap.grid.n1, fmap.grid.n2))
    phi = solve_strip(fmap, rhs, zero, "neumann0", tol, maxiter)
    out = np.stack([ws[i] - fmap.grad(phi[i]) for i in range(B)])
    return out[0] if squeeze else out


def strip_residuals(fmap, u, rhs, dirichlet_interface, bc_outer="neumann0"):
    """Row-wise defects of a candidate solution: interior residual norm
    (volume L2 over collocation rows 1..m-2), interface and lid sup-defects.
    Diagnostic for tests."""
    st = fmap.strip
    L = _apply_op(fmap, u[None], ("dirichlet", bc_outer))[0]
    interior = L[..., 1:-1] - np.asarray(rhs)[..., 1:-1]
    w_int = np.zeros(st.m)
    w_int[1:-1] = st.ws[1:-1]
    vol = np.sqrt(np.sum(interior**2 * (fmap.absJ[..., None] * w_int[1:-1])) * fmap.grid.cell)
    iface = float(np.max(np.abs(u[..., 0] - dirichlet_interface)))
    if bc_outer == "neumann0":
        lid = float(np.max(np.abs(st.ds(u)[..., -1] / fmap.J)))
    else:
        lid = float(np.max(np.abs(u[..., -1])))
    return {"interior": float(vol), "interface": iface, "lid": lid}
