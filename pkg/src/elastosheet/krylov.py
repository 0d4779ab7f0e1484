"""Preconditioned Krylov iterations for the strip and interface solves.

Both routines work on real ndarrays of arbitrary shape; inner products run
over every axis, so a leading batch axis turns one call into a combined
solve of independent systems (the operators used here are block-diagonal
across the batch, and items with a zero right-hand side stay exactly zero).
Callers verify per-item residuals afterwards.
"""

import numpy as np

_TINY = 1e-300


def _norm(a):
    return float(np.sqrt(np.sum(a * a)))


def _dot(a, b):
    return float(np.sum(a * b))


def bicgstab(apply_A, apply_M, b, tol=1e-10, maxiter=500, x0=None):
    """Right-preconditioned BiCGstab.  Returns (x, iterations, rel_residual).

    The returned relative residual is the recursive one when convergence was
    declared and the true one (recomputed) otherwise; callers that need a
    guarantee should verify the true residual themselves.
    """
    bnorm = _norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float, copy=True)
        r = b - apply_A(x)
    rhat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    rnorm = _norm(r)
    if rnorm <= tol * bnorm:
        return x, 0, rnorm / bnorm
    it = 0
    for it in range(1, maxiter + 1):
        rho_new = _dot(rhat, r)
        if abs(rho_new) < _TINY:
            rhat = r.copy()
            rho_new = _dot(rhat, r)
            if abs(rho_new) < _TINY:
                break
        if it == 1:
            p = r.copy()
        else:
            beta = (rho_new / rho) * (alpha / omega)
            p = r + beta * (p - omega * v)
        phat = apply_M(p)
        v = apply_A(phat)
        denom = _dot(rhat, v)
        if abs(denom) < _TINY:
            break
        alpha = rho_new / denom
        s = r - alpha * v
        snorm = _norm(s)
        if snorm <= tol * bnorm:
            x = x + alpha * phat
            return x, it, snorm / bnorm
        shat = apply_M(s)
        t = apply_A(shat)
        tt = _dot(t, t)
        if tt < _TINY:
            x = x + alpha * phat
            break
        omega = _dot(t, s) / tt
        x = x + alpha * phat + omega * shat
        r = s - omega * t
        rho = rho_new
        rnorm = _norm(r)
        if rnorm <= tol * bnorm:
            return x, it, rnorm / bnorm
        if abs(omega) < _TINY:
            break
    return x, it, _norm(b - apply_A(x)) / bnorm


def pcg(apply_A, apply_M, b, tol=1e-10, maxiter=200, x0=None):
    """Preconditioned conjugate gradients for a symmetric positive operator.

    Stalls (20 iterations without residual reduction) end the iteration so
    the caller can fall back to a nonsymmetric method.
    """
    bnorm = _norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float, copy=True)
        r = b - apply_A(x)
    z = apply_M(r)
    p = z.copy()
    rz = _dot(r, z)
    best = _norm(r)
    since_best = 0
    it = 0
    for it in range(1, maxiter + 1):
        Ap = apply_A(p)
        denom = _dot(p, Ap)
        if abs(denom) < _TINY:
            break
        alpha = rz / denom
        x = x + alpha * p
        r = r - alpha * Ap
        rnorm = _norm(r)
        if rnorm <= tol * bnorm:
            return x, it, rnorm / bnorm
        if rnorm < 0.9 * best:
            best = rnorm
            since_best = 0
        else:
            since_best += 1
            if since_best >= 20:
                break
        z = apply_M(r)
        rz_new = _dot(r, z)
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
    return x, it, _norm(b - apply_A(x)) / bnorm
