import numpy as np
import pytest

from elastosheet.geometry import Interface, StripGrid, flatten_map
from elastosheet.spectral_core import HorizontalGrid


def smooth_profile(grid, rng, amp=0.1, kmax=3, nterms=4):
    """Random band-limited interface profile with sup norm exactly amp."""
    f = np.zeros(grid.shape)
    for _ in range(nterms):
        k1 = int(rng.integers(0, kmax + 1))
        k2 = int(rng.integers(-kmax, kmax + 1)) if grid.d == 2 else 0
        if k1 == 0 and k2 == 0:
            k1 = 1
        ph = rng.uniform(0.0, 2.0 * np.pi)
        f += rng.uniform(0.3, 1.0) * np.cos(k1 * grid.x1 + k2 * grid.x2 + ph)
    sup = float(np.max(np.abs(f)))
    return amp * f / sup


def smooth_scalar(grid, rng, kmax=4, nterms=6, amp=1.0):
    """Random band-limited scalar on the cross-section."""
    g = np.zeros(grid.shape)
    for _ in range(nterms):
        k1 = int(rng.integers(-kmax, kmax + 1))
        k2 = int(rng.integers(-kmax, kmax + 1)) if grid.d == 2 else 0
        ph = rng.uniform(0.0, 2.0 * np.pi)
        g += rng.normal() * np.cos(k1 * grid.x1 + k2 * grid.x2 + ph)
    return amp * g


def smooth_strip_field(fmap, rng, kmax=3, nterms=4):
    """Random smooth strip field: trig in x', low-degree polynomial in s."""
    grid = fmap.grid
    s = fmap.strip.s[None, None, :]
    out = np.zeros(grid.shape + (fmap.strip.m,))
    for _ in range(nterms):
        base = smooth_scalar(grid, rng, kmax=kmax, nterms=2)
        c = rng.normal(size=3)
        out += base[..., None] * (c[0] + c[1] * s + c[2] * s * s)
    return out


def make_interface(grid, f, c0=0.05):
    return Interface(grid, f, c0=c0)


def make_fmap(interface, m, side):
    strip = StripGrid(interface.grid, interface.depth(side), m, side)
    return flatten_map(interface, strip)


def make_both_fmaps(interface, m):
    return {side: make_fmap(interface, m, side) for side in ("plus", "minus")}


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def grid1():
    return HorizontalGrid(d=1, n=48)


@pytest.fixture
def grid2():
    return HorizontalGrid(d=2, n=24)
