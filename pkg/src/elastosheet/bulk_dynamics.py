"""Transport right-hand sides for the bulk curl variables and the lid data.

The curl of the velocity (omega) and the curls of the deformation columns
(G_j) obey coupled advection systems on each strip:

    d_t omega = -(u . grad) omega + sum_j (F_j . grad) G_j
                + (omega . grad) u - sum_j (G_j . grad) F_j
    d_t G_j   = -(u . grad) G_j + (F_j . grad) omega
                + (G_j . grad) u - (omega . grad) F_j
                - 2 sum_i grad(u_i) x grad(F_ij)

with all derivatives taken in the flattened strip coordinates through the
metric of the interface map.  Fields are stored as compositions with the
time-dependent flattening map, so a moving interface adds the map-motion
term (1 - s) dtf (1/J) d_s(field) to every stored scalar; map_motion_term
supplies it and the stepper adds it on top of the physics right-hand side.

The lid averages of the horizontal velocity (beta) and deformation entries
(gamma) evolve by closed integrals of the lid traces, and the lid integrals
of omega_3 and G_3j are conserved exactly; both are computed with the exact
trapezoidal quadrature of the horizontal grid.
"""

import numpy as np

from .geometry import lid


def _dealias_fields(grid, fields):
    return [grid.dealias(f) for f in fields]


def _grad_all(fmap, vec):
    """Gradients of the three components of a vector field: (3, 3, ...)
    indexed [component][derivative direction]."""
    return np.stack([fmap.grad(vec[i]) for i in range(3)])


def _advect(a, grads):
    """(a . grad) b per component, grads = _grad_all(b)."""
    return np.stack([
        a[0] * grads[i][0] + a[1] * grads[i][1] + a[2] * grads[i][2]
        for i in range(3)
    ])


def _cross(a, b):
    return np.stack([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def vorticity_rhs(fmap, u, F, omega, G, dealias=True):
    """Pointwise right-hand sides (d_omega, d_G) of the curl transport
    system; F and G are stacked columns (3, 3, n1, n2, m) indexed [j][i].
    The quadratic products are 2/3-rule dealiased on the way in and out
    unless dealias=False (useful for manufactured-field comparisons)."""
    grid = fmap.grid
    u = np.asarray(u, dtype=float)
    F = np.asarray(F, dtype=float)
    omega = np.asarray(omega, dtype=float)
    G = np.asarray(G, dtype=float)
    if dealias:
        u = np.stack(_dealias_fields(grid, u))
        omega = np.stack(_dealias_fields(grid, omega))
        F = np.stack([np.stack(_dealias_fields(grid, Fj)) for Fj in F])
        G = np.stack([np.stack(_dealias_fields(grid, Gj)) for Gj in G])
    gu = _grad_all(fmap, u)
    gom = _grad_all(fmap, omega)
    gF = [_grad_all(fmap, F[j]) for j in range(3)]
    gG = [_grad_all(fmap, G[j]) for j in range(3)]

    d_omega = -_advect(u, gom) + _advect(omega, gu)
    for j in range(3):
        d_omega += _advect(F[j], gG[j]) - _advect(G[j], gF[j])

    d_G = np.zeros_like(G)
    for j in range(3):
        dGj = (-_advect(u, gG[j]) + _advect(F[j], gom)
               + _advect(G[j], gu) - _advect(omega, gF[j]))
        for i in range(3):
            dGj -= 2.0 * _cross(gu[i], gF[j][i])
        d_G[j] = dGj

    if dealias:
        d_omega = np.stack(_dealias_fields(grid, d_omega))
        d_G = np.stack([np.stack(_dealias_fields(grid, dGj)) for dGj in d_G])
    return d_omega, d_G


def map_motion_term(fmap, dtf, field):
    """Extra rate from storing lab fields on a moving flattening map:
    (1 - s) dtf (1/J) d_s(field), added to the physics right-hand side of
    every advected scalar (dtf = projected normal velocity of the graph)."""
    st = fmap.strip
    one_minus_s = (1.0 - st.s)
    dtf = np.asarray(dtf, dtype=float)[..., None]
    return one_minus_s * dtf * st.ds(np.asarray(field, dtype=float)) / \
        fmap.J[..., None]


def beta_gamma_rhs(grid, u_lid, F_lid):
    """Rates of the lid integrals of the horizontal velocity and deformation
    entries, computed from the lid traces (vertical components vanish there):

      d_t beta_i  = -int u_s d_s(u_i) - sum_j F_sj d_s(F_ij) dx'
      d_t gamma_ij = -int u_s d_s(F_ij) - F_sj d_s(u_i) dx'

    (s sums over the two horizontal directions).  Returns (d_beta (2,),
    d_gamma (2, 3)) in the integral convention; divide by (2 pi)^d for the
    lid-mean convention the reconstruction uses."""
    u_lid = np.asarray(u_lid, dtype=float)
    F_lid = np.asarray(F_lid, dtype=float)
    du = [(grid.d1(u_lid[i]), grid.d2(u_lid[i])) for i in range(2)]
    dF = [[(grid.d1(F_lid[j, i]), grid.d2(F_lid[j, i])) for i in range(2)]
          for j in range(3)]
    d_beta = np.zeros(2)
    d_gamma = np.zeros((2, 3))
    for i in range(2):
        integrand = u_lid[0] * du[i][0] + u_lid[1] * du[i][1]
        for j in range(3):
            integrand -= (F_lid[j, 0] * dF[j][i][0]
                          + F_lid[j, 1] * dF[j][i][1])
        d_beta[i] = -grid.integral(integrand)
        for j in range(3):
            integrand_g = (u_lid[0] * dF[j][i][0] + u_lid[1] * dF[j][i][1]
                           - F_lid[j, 0] * du[i][0] - F_lid[j, 1] * du[i][1])
            d_gamma[i, j] = -grid.integral(integrand_g)
    return d_beta, d_gamma


def lid_invariants(grid, omega, G):
    """Conserved lid integrals of one side: (int omega_3 dx',
    array of int G_3j dx' for j = 0, 1, 2); their drift over a run is a
    discretization-quality monitor."""
    om3 = float(grid.integral(lid(np.asarray(omega)[2])))
    g3 = np.array([float(grid.integral(lid(np.asarray(G)[j][2])))
                   for j in range(3)])
    return om3, g3
