import numpy as np
import pytest

from elastosheet.divcurl import (
    check_compatibility,
    recover_side,
    recover_state,
    solve_div_curl,
)
from elastosheet.errors import CompatibilityError
from elastosheet.geometry import Interface, lid, trace
from elastosheet.spectral_core import HorizontalGrid

from conftest import make_fmap, smooth_profile


def _manufactured(fmap):
    """Analytic field u = curl(0, a(x1) q(x3), 0) + grad(c(x1) r(x3)) with
    q(lid) = 0 and r'(lid) = 0, so u3 vanishes on the lid.  Returns sampled
    (u, omega, g) plus consistent interface flux and lid averages."""
    sgn = -fmap.strip.sign  # dw/dz for w = 1 -+ z
    x = fmap.grid.x1[..., None]
    z = fmap.sigma
    w = 1.0 - fmap.strip.sign * z

    a = 0.2 + 0.3 * np.cos(x) + 0.1 * np.sin(2.0 * x)
    a1 = -0.3 * np.sin(x) + 0.2 * np.cos(2.0 * x)
    a2 = -0.3 * np.cos(x) - 0.4 * np.sin(2.0 * x)
    c = 0.2 * np.cos(2.0 * x)
    c1 = -0.4 * np.sin(2.0 * x)
    c2 = -0.8 * np.cos(2.0 * x)

    q = w * (1.5 - 0.5 * w)
    qz = sgn * (1.5 - w)
    qzz = -1.0
    r = 0.3 * w**2 + 0.1 * w**3
    rz = sgn * (0.6 * w + 0.3 * w**2)
    rzz = 0.6 + 0.6 * w

    u = np.stack([-a * qz + c1 * r, np.zeros_like(z), a1 * q + c * rz])
    omega = np.stack([np.zeros_like(z), -(a2 * q + a * qzz), np.zeros_like(z)])
    g = c2 * r + c * rzz

    f1 = fmap.interface.f1
    theta = -f1 * trace(u[0]) + trace(u[2])
    alpha = np.array([lid(u[0]).mean(), lid(u[1]).mean()])
    return u, omega, g, theta, alpha


def test_roundtrip_manufactured():
    grid = HorizontalGrid(d=1, n=48)
    f = 0.1 * np.cos(2.0 * grid.x1)
    ifc = Interface(grid, f)
    for side in ("plus", "minus"):
        fmap = make_fmap(ifc, 24, side)
        u_true, omega, g, theta, alpha = _manufactured(fmap)
        u = solve_div_curl(fmap, omega, g, theta, alpha)
        rel = fmap.norm_vec(u - u_true) / fmap.norm_vec(u_true)
        assert rel < 1e-7, (side, rel)


def test_constant_field_uniqueness():
    # only a flat interface admits a constant solution with zero flux
    grid = HorizontalGrid(d=1, n=32)
    ifc = Interface(grid, np.zeros(grid.shape))
    fmap = make_fmap(ifc, 20, "plus")
    zero3 = np.zeros((3,) + grid.shape + (20,))
    u = solve_div_curl(fmap, zero3, None, np.zeros(grid.shape), np.array([0.7, -0.3]))
    assert np.max(np.abs(u[0] - 0.7)) < 1e-12
    assert np.max(np.abs(u[1] + 0.3)) < 1e-12
    assert np.max(np.abs(u[2])) < 1e-12


def test_constant_averages_curved():
    # curved interface: constants alone violate the flux condition, so the
    # solution picks up a compensating gradient; averages and flux both hold
    grid = HorizontalGrid(d=1, n=32)
    ifc = Interface(grid, 0.1 * np.cos(grid.x1))
    fmap = make_fmap(ifc, 20, "plus")
    zero3 = np.zeros((3,) + grid.shape + (20,))
    theta = np.zeros(grid.shape)
    u = solve_div_curl(fmap, zero3, None, theta, np.array([0.7, -0.3]))
    uN = (-ifc.f1 * u[0, :, :, 0] - ifc.f2 * u[1, :, :, 0] + u[2, :, :, 0])
    assert np.max(np.abs(uN)) < 1e-7
    assert abs(u[0, :, :, -1].mean() - 0.7) < 1e-12
    assert abs(u[1, :, :, -1].mean() + 0.3) < 1e-12
    assert np.max(np.abs(u[2, :, :, -1])) < 1e-12
    # genuinely not constant
    assert np.max(np.abs(u[0] - 0.7)) > 1e-3


def test_linearity(rng):
    grid = HorizontalGrid(d=1, n=48)
    ifc = Interface(grid, smooth_profile(grid, rng, amp=0.1))
    fmap = make_fmap(ifc, 24, "minus")
    u1, om1, g1, th1, al1 = _manufactured(fmap)
    # second compatible dataset: scaled copy
    s = -0.6
    ua = solve_div_curl(fmap, om1, g1, th1, al1)
    ub = solve_div_curl(fmap, s * om1, s * g1, s * th1, s * al1)
    uc = solve_div_curl(
        fmap, (1 + s) * om1, (1 + s) * g1, (1 + s) * th1, (1 + s) * al1
    )
    assert fmap.norm_vec(ua + ub - uc) < 1e-9 * max(1.0, fmap.norm_vec(uc))


def test_compatibility_rejections():
    grid = HorizontalGrid(d=1, n=32)
    ifc = Interface(grid, np.zeros(grid.shape))
    fmap = make_fmap(ifc, 16, "plus")
    zero3 = np.zeros((3,) + grid.shape + (16,))
    alpha = np.zeros(2)

    # C3: theta == 1 with g = 0 leaves residual (2 pi)^d
    with pytest.raises(CompatibilityError, match="C3"):
        solve_div_curl(fmap, zero3, None, np.ones(grid.shape), alpha)
    rep = check_compatibility(
        fmap, zero3, None, np.ones(grid.shape), raise_on_fail=False
    )
    assert abs(rep.c3 - 2.0 * np.pi) < 1e-12
    assert not rep.ok

    # C2: constant vertical curl component has net lid circulation
    om = zero3.copy()
    om[2] = 0.5
    with pytest.raises(CompatibilityError, match="C2"):
        solve_div_curl(fmap, om, None, np.zeros(grid.shape), alpha)

    # C1: non-solenoidal curl data
    om = zero3.copy()
    om[2] = fmap.sigma  # d3(omega_3) = 1
    with pytest.raises(CompatibilityError, match="C1"):
        solve_div_curl(fmap, om, None, np.zeros(grid.shape), alpha)


def test_reconstruction_enforces_lid_and_flux(rng):
    grid = HorizontalGrid(d=1, n=48)
    ifc = Interface(grid, smooth_profile(grid, rng, amp=0.15))
    fmap = make_fmap(ifc, 24, "plus")
    u_true, omega, g, theta, alpha = _manufactured(fmap)
    u, diag = solve_div_curl(fmap, omega, g, theta, alpha, return_diagnostics=True)
    # lid impermeability is row-exact
    assert np.max(np.abs(lid(u[2]))) < 1e-10
    # lid averages exact
    assert abs(lid(u[0]).mean() - alpha[0]) < 1e-13
    assert abs(lid(u[1]).mean() - alpha[1]) < 1e-13
    # diagnostics small
    assert diag["curl"] < 1e-6 * diag["scale"]
    assert diag["div"] < 1e-6 * diag["scale"]
    assert diag["flux"] < 1e-6 * diag["scale"]


def test_recover_side_roundtrip(rng):
    grid = HorizontalGrid(d=1, n=48)
    ifc = Interface(grid, 0.08 * np.cos(grid.x1) + 0.04 * np.sin(2.0 * grid.x1))
    fmap = make_fmap(ifc, 24, "minus")
    x = grid.x1[..., None]
    s = fmap.strip.s

    def stream(ax, qs):
        # curl(0, ax*qs, 0): solenoidal; its interface flux is the tangential
        # derivative of the trace, so qs(0) = 0 makes it exactly tangential
        chi = ax * qs
        zero = np.zeros_like(chi)
        return fmap.curl(np.stack([zero, chi, zero]))

    a_u = 0.2 * np.cos(x) + 0.15 * np.sin(2.0 * x)
    u_sol = stream(a_u, (1.0 - s) * (0.5 + s))
    # swirl component (0, b(x) r(s), 0): divergence-free and tangential in d=1
    u_sol[1] += (0.05 + 0.3 * np.sin(x) + 0.1 * np.cos(2.0 * x)) * (
        1.0 + 0.3 * s * s
    )
    om = fmap.curl(u_sol)

    theta_u = (
        -ifc.f1 * trace(u_sol[0]) - ifc.f2 * trace(u_sol[1]) + trace(u_sol[2])
    )
    dau = -0.2 * np.sin(grid.x1) + 0.3 * np.cos(2.0 * grid.x1)
    assert np.max(np.abs(theta_u - 0.5 * dau)) < 1e-10
    beta_u = np.array([lid(u_sol[0]).mean(), lid(u_sol[1]).mean()])

    qF = s * (1.0 - s)
    cols = [
        stream(0.3 * np.cos(x) + 0.1 * np.sin(2.0 * x), qF),
        stream(-0.2 * np.cos(x) + 0.25 * np.sin(2.0 * x), qF * (1.0 + 0.5 * s)),
        stream(0.05 * np.cos(2.0 * x) - 0.15 * np.sin(x), qF),
    ]
    cols[1][1] += (-0.1 + 0.25 * np.cos(x)) * (1.0 - 0.4 * s)
    F_true = np.stack(cols)
    G = np.stack([fmap.curl(Fj) for Fj in cols])
    gamma = np.stack(
        [np.array([lid(Fj[0]).mean(), lid(Fj[1]).mean()]) for Fj in cols], axis=1
    )

    u, F = recover_side(fmap, om, G, beta_u, gamma, theta_u)
    assert fmap.norm_vec(u - u_sol) < 1e-6 * max(1.0, fmap.norm_vec(u_sol))
    for j in range(3):
        assert fmap.norm_vec(F[j] - F_true[j]) < 1e-6 * max(
            1.0, fmap.norm_vec(F_true[j])
        )
    # interface flux constraints: columns are tangential, velocity matches theta
    for j in range(3):
        FN = (
            -ifc.f1 * trace(F[j][0])
            - ifc.f2 * trace(F[j][1])
            + trace(F[j][2])
        )
        assert np.max(np.abs(FN)) < 1e-6
    uN = -ifc.f1 * trace(u[0]) - ifc.f2 * trace(u[1]) + trace(u[2])
    assert np.max(np.abs(uN - theta_u)) < 1e-6

def test_recover_state_shares_flux_across_sides():
    grid = HorizontalGrid(d=1, n=32)
    ifc = Interface(grid, 0.1 * np.cos(grid.x1))
    fm_p = make_fmap(ifc, 16, "plus")
    fm_m = make_fmap(ifc, 16, "minus")
    zero = np.zeros((3,) + grid.shape + (16,))
    zeroG = np.zeros((3, 3) + grid.shape + (16,))
    theta = 0.05 * np.cos(2.0 * grid.x1) * np.ones(grid.shape)
    gamma = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    minus = (zero, zeroG, np.array([-0.2, 0.0]), gamma)
    plus = (zero, zeroG, np.array([0.2, 0.0]), gamma)

    (um, Fm), out_p = recover_state(fm_p, fm_m, theta, minus, plus)
    up, Fp = out_p
    # both one-sided fluxes equal the common theta
    for u in (um, up):
        uN = -ifc.f1 * trace(u[0]) - ifc.f2 * trace(u[1]) + trace(u[2])
        assert np.max(np.abs(uN - theta)) < 1e-7
    # deformation columns stay tangential on both sides
    for F in (Fm, Fp):
        for j in range(3):
            FN = (-ifc.f1 * trace(F[j][0]) - ifc.f2 * trace(F[j][1])
                  + trace(F[j][2]))
            assert np.max(np.abs(FN)) < 1e-7
    # lid averages land where prescribed, signs and all
    assert abs(lid(um[0]).mean() + 0.2) < 1e-10
    assert abs(lid(up[0]).mean() - 0.2) < 1e-10
    # one-fluid: the upper side is skipped entirely
    only, none = recover_state(None, fm_m, theta, minus)
    assert none is None
    assert np.allclose(only[0], um, atol=1e-12)
