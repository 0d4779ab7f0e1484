"""Interface geometry and the flattened vertical strips.

The domain is the slab T^d x [-1, 1] split by the graph x3 = f(x').  Each
side is pulled back to a fixed strip (x', s) with s in [0, 1], s = 0 on the
interface and s = 1 on the lid, by the vertical stretch

    upper:  x3 = f + s * (1 - f),      J = dx3/ds = 1 - f  > 0
    lower:  x3 = f - s * (1 + f),      J = dx3/ds = -(1 + f) < 0

J is independent of s, which keeps the transformed Laplacian short.  With
a_i = (1 - s) * d_i f / J the lab-frame derivatives of a strip sample are

    d_i^lab = d_i - a_i * d_s   (i = 1, 2),      d_3^lab = (1/J) * d_s

and the Laplacian becomes

    lap = lap_horizontal - 2 * sum_i a_i d_i d_s + c_ss d_s^2 + b d_s,
    c_ss = a1^2 + a2^2 + 1/J^2,
    b    = -(1 - s) * sum_i (2 f_i^2 / J^2 + f_ii / J).

Vertical discretization is Chebyshev-Lobatto collocation in s.
"""

import numpy as np
from dataclasses import dataclass, field

from .errors import ConfigError
from .spectral_core import HorizontalGrid

SIDES = ("plus", "minus")


def cheb_nodes_and_diff(m):
    """Chebyshev-Lobatto nodes on [0, 1] (s[0] = 0) and the d/ds matrix."""
    N = m - 1
    x = np.cos(np.pi * np.arange(N + 1) / N)
    c = np.hstack([2.0, np.ones(N - 1), 2.0]) * (-1.0) ** np.arange(N + 1)
    X = np.tile(x[:, None], (1, N + 1))
    dX = X - X.T
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    D = D - np.diag(D.sum(axis=1))
    s = (1.0 - x) / 2.0  # ascending, s = (1 - x)/2 so d/ds = -2 d/dx
    Ds = -2.0 * D
    return s, Ds


def clenshaw_curtis(m):
    """Quadrature weights on [0, 1] for the Chebyshev-Lobatto nodes."""
    N = m - 1
    theta = np.pi * np.arange(N + 1) / N
    w = np.zeros(N + 1)
    ii = np.arange(1, N)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N ** 2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2.0 * k * theta[ii]) / (4.0 * k ** 2 - 1)
        v -= np.cos(N * theta[ii]) / (N ** 2 - 1)
    else:
        w[0] = w[N] = 1.0 / N ** 2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2.0 * k * theta[ii]) / (4.0 * k ** 2 - 1)
    w[ii] = 2.0 * v / N
    return w / 2.0  # [-1, 1] -> [0, 1]


def integration_matrix(m, Ds):
    """S with (S v)(s_j) = integral of the interpolant of v from 0 to s_j."""
    A = Ds.copy()
    A[0, :] = 0.0
    A[0, 0] = 1.0
    B = np.eye(m)
    B[0, :] = 0.0
    return np.linalg.solve(A, B)


class StripGrid:
    """Fixed (x', s) product grid for one side of the interface."""

    def __init__(self, grid: HorizontalGrid, h: float, m: int, side: str):
        if side not in SIDES:
            raise ConfigError(f"side must be one of {SIDES}, got {side!r}")
        if m < 8:
            raise ConfigError(f"vertical resolution must be >= 8, got {m}")
        if not h > 0:
            raise ConfigError(f"mean depth must be positive, got {h}")
        self.grid = grid
        self.h = float(h)
        self.m = m
        self.side = side
        self.sign = 1.0 if side == "plus" else -1.0
        self.s, self.Ds = cheb_nodes_and_diff(m)
        self.DsT = np.ascontiguousarray(self.Ds.T)
        self.S0 = integration_matrix(m, self.Ds)
        self.S0T = np.ascontiguousarray(self.S0.T)
        self.ws = clenshaw_curtis(m)

    def ds(self, u):
        """Vertical derivative of a strip field (..., m)."""
        return u @ self.DsT

    def ds_at(self, u, row):
        """Vertical derivative evaluated at a single s node (one mat-vec)."""
        return u @ self.Ds[row]

    def antiderivative(self, u):
        """Running integral from s = 0 along the vertical axis."""
        return u @ self.S0T

    def zeros(self):
        return np.zeros(self.grid.shape + (self.m,))


@dataclass
class Interface:
    """Graph interface x3 = f(x') with range guard |f| <= 1 - c0.

    Horizontal derivatives of f through second order are precomputed since
    every operator assembled on top of the interface needs them.
    """

    grid: HorizontalGrid
    f: np.ndarray
    c0: float = 0.05

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if self.f.shape != self.grid.shape:
            raise ConfigError(
                f"interface shape {self.f.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.f)):
            raise ConfigError("interface contains non-finite values")
        if not self.c0 > 0:
            raise ConfigError(f"separation margin c0 must be positive, got {self.c0}")
        bound = 1.0 - self.c0
        fmax = float(np.max(np.abs(self.f)))
        if fmax > bound:
            raise ConfigError(
                f"interface leaves the admissible band: max|f| = {fmax:.6g} > 1 - c0 = {bound:.6g}"
            )
        g = self.grid
        self.f1 = g.d1(self.f)
        self.f2 = g.d2(self.f)
        self.f11 = g.d1(self.f1)
        self.f12 = g.d2(self.f1)
        self.f22 = g.d2(self.f2)
        self.mean = float(self.f.mean())

    @property
    def metric(self):
        return np.sqrt(1.0 + self.f1 ** 2 + self.f2 ** 2)

    def depth(self, side):
        """Mean distance from the interface to the lid of the given side."""
        return 1.0 - self.mean if side == "plus" else 1.0 + self.mean


def normal(interface: Interface):
    """Unnormalized upward normal N = (-f1, -f2, 1), unit normal, metric."""
    N = np.stack([-interface.f1, -interface.f2, np.ones_like(interface.f)])
    metric = interface.metric
    return N, N / metric, metric


class FlattenMap:
    """Strip pullback of one side: coefficients for derivatives and measure."""

    def __init__(self, interface: Interface, strip: StripGrid):
        if abs(strip.h - interface.depth(strip.side)) > 1e-12:
            raise ConfigError(
                f"strip depth {strip.h} does not match interface mean depth "
                f"{interface.depth(strip.side)} on side {strip.side}"
            )
        self.interface = interface
        self.strip = strip
        self.grid = interface.grid
        f = interface.f
        if strip.side == "plus":
            self.J = 1.0 - f
        else:
            self.J = -(1.0 + f)
        self.absJ = np.abs(self.J)
        s = strip.s
        one_minus_s = (1.0 - s)[None, None, :]
        Jc = self.J[..., None]
        self.sigma = f[..., None] + s[None, None, :] * Jc
        self.a1 = one_minus_s * interface.f1[..., None] / Jc
        self.a2 = one_minus_s * interface.f2[..., None] / Jc
        gradsq = interface.f1 ** 2 + interface.f2 ** 2
        lap_f = interface.f11 + interface.f22
        self.css = one_minus_s ** 2 * gradsq[..., None] / Jc ** 2 + 1.0 / Jc ** 2
        self.b = -one_minus_s * (2.0 * gradsq / self.J ** 2 + lap_f / self.J)[..., None]
        self.flat = bool(np.max(np.abs(f - interface.mean)) < 1e-14)

    # -- lab-frame differential operators on strip samples -----------------

    def grad(self, u):
        """Lab-frame gradient (3, ...) of a scalar strip field."""
        g = self.grid
        us = self.strip.ds(u)
        g1 = g.d1(u) - self.a1 * us
        g2 = g.d2(u) - self.a2 * us
        g3 = us / self.J[..., None]
        return np.stack([g1, g2, g3])

    def div(self, w):
        """Lab-frame divergence of a vector strip field w with shape (3, ...)."""
        g = self.grid
        return (
            g.d1(w[0]) - self.a1 * self.strip.ds(w[0])
            + g.d2(w[1]) - self.a2 * self.strip.ds(w[1])
            + self.strip.ds(w[2]) / self.J[..., None]
        )

    def curl(self, w):
        """Lab-frame curl of a vector strip field w with shape (3, ...)."""
        g = self.grid
        ws = [self.strip.ds(w[i]) for i in range(3)]
        Jc = self.J[..., None]
        d2w3 = g.d2(w[2]) - self.a2 * ws[2]
        d3w2 = ws[1] / Jc
        d3w1 = ws[0] / Jc
        d1w3 = g.d1(w[2]) - self.a1 * ws[2]
        d1w2 = g.d1(w[1]) - self.a1 * ws[1]
        d2w1 = g.d2(w[0]) - self.a2 * ws[0]
        return np.stack([d2w3 - d3w2, d3w1 - d1w3, d1w2 - d2w1])

    def laplacian(self, u):
        """Lab-frame Laplacian of a scalar strip field."""
        g = self.grid
        us = self.strip.ds(u)
        uss = self.strip.ds(us)
        lap_h = g.laplacian_h(u)
        cross = self.a1 * g.d1(us) + self.a2 * g.d2(us)
        return lap_h - 2.0 * cross + self.css * uss + self.b * us

    # -- measure -----------------------------------------------------------

    def integral(self, u):
        """Volume integral over the side with the |J| ds dx' measure."""
        wsum = (u * self.absJ[..., None]) @ self.strip.ws
        return float(np.sum(wsum) * self.grid.cell)

    def norm(self, u):
        return float(np.sqrt(max(self.integral(u * u), 0.0)))

    def norm_vec(self, w):
        return float(np.sqrt(max(sum(self.integral(w[i] * w[i]) for i in range(3)), 0.0)))

    # -- map helpers ---------------------------------------------------------

    def to_lab(self, s_index):
        """x3 values of the given s node line."""
        return self.sigma[..., s_index]

    def inverse_s(self, x3):
        """Strip coordinate of lab height x3 (broadcasts over the grid)."""
        return (x3 - self.interface.f) / self.J


def flatten_map(interface: Interface, strip: StripGrid) -> FlattenMap:
    """Build the strip pullback; rejects interfaces outside the band."""
    return FlattenMap(interface, strip)


def trace(u):
    """Interface-line restriction of a strip field (the s = 0 node row)."""
    return u[..., 0]


def lid(u):
    """Lid-line restriction of a strip field (the s = 1 node row)."""
    return u[..., -1]


def normal_flux_trace(fmap: FlattenMap, u):
    """N . grad u on the interface line, N = (-d1 f, -d2 f, 1).

    Uses only the s = 0 row of the vertical derivative, so it is much
    cheaper than forming the full gradient.
    """
    g = fmap.grid
    ifc = fmap.interface
    u0 = u[..., 0]
    us0 = fmap.strip.ds_at(u, 0)
    lab1 = g.d1(u0) - fmap.a1[..., 0] * us0
    out = -ifc.f1 * lab1 + us0 / fmap.J
    if g.n2 > 1:
        lab2 = g.d2(u0) - fmap.a2[..., 0] * us0
        out -= ifc.f2 * lab2
    return out


@dataclass
class HarmonicCoordinates:
    """Identity-plus-correction map from the reference strip to the current domain."""

    phi3: np.ndarray
    min_jacobian: float


def harmonic_coordinates(interface: Interface, f_star: np.ndarray, strip: StripGrid):
    """Harmonic map taking the reference graph f_star to the current graph f.

    The horizontal components are the identity; the vertical component solves
    a Laplace problem on the reference side with boundary values f - f_star on
    the interface line and the lid height on the lid.  When f == f_star the
    map is the identity.  A non-positive vertical Jacobian raises, since the
    map must stay a diffeomorphism.
    """
    from .elliptic import solve_strip

    ref = Interface(interface.grid, f_star, c0=interface.c0)
    strip_ref = strip
    if abs(strip.h - ref.depth(strip.side)) > 1e-12:
        strip_ref = StripGrid(interface.grid, ref.depth(strip.side), strip.m, strip.side)
    fmap = flatten_map(ref, strip_ref)
    chi = solve_strip(
        fmap,
        rhs=np.zeros(interface.grid.shape + (strip_ref.m,)),
        dirichlet_interface=interface.f - f_star,
        bc_outer="dirichlet0",
    )
    phi3 = fmap.sigma + chi
    dphi3_dx3 = strip_ref.ds(phi3) / fmap.J[..., None]
    min_jac = float(np.min(dphi3_dx3))
    if min_jac <= 0.0:
        raise ConfigError(
            f"harmonic coordinate map is not orientation preserving: min vertical Jacobian {min_jac:.3e}"
        )
    return HarmonicCoordinates(phi3=phi3, min_jacobian=min_jac)


def interface_identity_residual(u, fmap: FlattenMap):
    """Sup-norm defect of the advection trace identity.

    For any smooth vector field u and graph normal N = (-d1 f, -d2 f, 1):

        ((u . grad) u) . N - (d3 u . N) (u . N)
            = ub_1 d_1(ub . N) + ub_2 d_2(ub . N) + sum_ij ub_i ub_j d_i d_j f

    where ub is the interface trace of u.  Both sides are evaluated
    discretely (bulk strip derivatives on the left, horizontal derivatives
    of traces on the right), so the residual measures pure truncation and
    decays spectrally for smooth data.
    """
    ifc = fmap.interface
    g = fmap.grid
    grads = [fmap.grad(u[i]) for i in range(3)]
    Nvec = [-ifc.f1, -ifc.f2, np.ones_like(ifc.f)]
    ub = [trace(u[i]) for i in range(3)]
    adv_dot_N = np.zeros_like(ifc.f)
    for i in range(3):
        adv_i = sum(ub[b] * trace(grads[i][b]) for b in range(3))
        adv_dot_N += adv_i * Nvec[i]
    d3u_dot_N = sum(trace(grads[i][2]) * Nvec[i] for i in range(3))
    theta_like = sum(ub[i] * Nvec[i] for i in range(3))
    lhs = adv_dot_N - d3u_dot_N * theta_like
    fij = [[ifc.f11, ifc.f12], [ifc.f12, ifc.f22]]
    rhs = ub[0] * g.d1(theta_like) + ub[1] * g.d2(theta_like)
    for i in range(2):
        for j in range(2):
            rhs += ub[i] * ub[j] * fij[i][j]
    return float(np.max(np.abs(lhs - rhs)))
