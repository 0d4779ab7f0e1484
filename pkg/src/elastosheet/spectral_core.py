"""Horizontal Fourier collocation layer for the periodic slab cross-section.

Interface fields are real arrays of shape (n1, n2) sampled on the uniform
grid over [0, 2*pi)^d.  In the d = 1 case the second axis is kept with
n2 = 1 so that every routine is dimension-agnostic.  Bulk (strip) fields
carry a third axis for the vertical coordinate and are transformed over the
first two axes only.

Transforms are real-to-complex over the horizontal axes (rfft along axis 0,
full fft along axis 1), so a spectrum has shape (n1//2 + 1, n2, ...).
Odd-order derivative multipliers zero the Nyquist mode; even multipliers
keep it.  Quadratic products of state fields go through mul23 (2/3-rule
truncation of both factors and of the product).
"""

import numpy as np
from dataclasses import dataclass

from .errors import ConfigError

TWO_PI = 2.0 * np.pi


class HorizontalGrid:
    """Uniform periodic grid over [0, 2*pi)^d, d in {1, 2}, n even >= 8."""

    def __init__(self, d=1, n=64):
        if d not in (1, 2):
            raise ConfigError(f"horizontal dimension must be 1 or 2, got {d}")
        if n < 8 or n % 2 != 0:
            raise ConfigError(f"grid size must be even and >= 8, got {n}")
        self.d = d
        self.n = n
        self.n1 = n
        self.n2 = n if d == 2 else 1
        self.shape = (self.n1, self.n2)
        self.npts = self.n1 * self.n2
        # quadrature cell for the L2 pairing on the cross-section
        self.cell = TWO_PI ** d / self.npts

        self.x1 = (TWO_PI * np.arange(self.n1) / self.n1)[:, None] * np.ones((1, self.n2))
        self.x2 = np.ones((self.n1, 1)) * (TWO_PI * np.arange(self.n2) / self.n2)[None, :]

        # half-spectrum wavenumbers (integers, period 2*pi)
        k1 = np.arange(self.n1 // 2 + 1, dtype=float)[:, None]
        k2 = np.fft.fftfreq(self.n2, 1.0 / self.n2)[None, :]
        self.k1 = k1 * np.ones_like(k2)
        self.k2 = np.ones_like(k1) * k2
        self.ksq = self.k1 ** 2 + self.k2 ** 2
        self.kabs = np.sqrt(self.ksq)

        # first-derivative multipliers, Nyquist zeroed
        ik1 = 1j * self.k1.copy()
        ik1[self.k1 == self.n1 // 2] = 0.0
        ik2 = 1j * self.k2.copy()
        if self.n2 > 1:
            ik2[np.abs(self.k2) == self.n2 // 2] = 0.0
        self.ik1 = ik1
        self.ik2 = ik2

        # 2/3-rule mask, 3K < n strictly so the extreme product mode 2K
        # aliases outside the kept band instead of exactly onto -K
        keep1 = self.k1 <= (self.n1 - 1) // 3
        keep2 = np.abs(self.k2) <= ((self.n2 - 1) // 3 if self.n2 > 1 else 0)
        self.mask23 = keep1 & keep2

    # -- transforms -------------------------------------------------------

    def hat(self, g):
        """Half-spectrum of a real field; horizontal axes only."""
        if self.n2 == 1:
            # a length-1 transform is the identity; skip its per-call cost
            return np.fft.rfft(g, axis=0)
        return np.fft.rfftn(g, axes=(1, 0))

    def phys(self, gh):
        """Inverse of hat; returns a real field."""
        if self.n2 == 1:
            return np.fft.irfft(gh, n=self.n1, axis=0)
        return np.fft.irfftn(gh, s=(self.n2, self.n1), axes=(1, 0))

    def _mult(self, mult, gh):
        """Broadcast a (K1, n2) multiplier over a possibly 3-d spectrum."""
        if gh.ndim == 2:
            return mult * gh
        return mult[(...,) + (None,) * (gh.ndim - 2)] * gh

    def apply_multiplier(self, g, mult):
        return self.phys(self._mult(mult, self.hat(g)))

    # -- derivatives ------------------------------------------------------

    def d1(self, g):
        return self.apply_multiplier(g, self.ik1)

    def d2(self, g):
        if self.n2 == 1:
            return np.zeros_like(g)
        return self.apply_multiplier(g, self.ik2)

    def grad2(self, g):
        """Both horizontal derivatives (second one zero when d = 1)."""
        return self.d1(g), self.d2(g)

    def laplacian_h(self, g):
        return self.apply_multiplier(g, -self.ksq)

    # -- products and projections -----------------------------------------

    def dealias(self, g):
        return self.apply_multiplier(g, self.mask23.astype(float))

    def mul23(self, a, b):
        """Dealiased product of two state fields (2/3 rule)."""
        ta = self.dealias(a)
        tb = self.dealias(b)
        return self.dealias(ta * tb)

    def mean(self, g):
        """Horizontal mean (axis 0 and 1), kept per remaining axes."""
        return g.mean(axis=(0, 1))

    # -- pairings ----------------------------------------------------------

    def inner(self, a, b):
        """L2 pairing over the cross-section with the (2*pi)^d measure."""
        return float(np.sum(a * b) * self.cell)

    def norm(self, a):
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def integral(self, a):
        return float(np.sum(a) * self.cell)

    def mode_amplitude(self, g, k1, k2=0):
        """Physical amplitude of the cos/sin pair at integer mode (k1, k2)."""
        gh = self.hat(g)
        i2 = k2 % self.n2
        return 2.0 * abs(gh[k1, i2]) / self.npts


def project_mean_zero(grid, g):
    """Remove the horizontal mean; idempotent, exact to round-off."""
    return g - g.mean(axis=(0, 1), keepdims=True)


def fourier_multiplier(grid, g, sigma, kind="bessel"):
    """Apply (1+|k|^2)^(sigma/2) ("bessel") or |k|^sigma ("riesz").

    The riesz family annihilates the mean for every sigma (the zero mode is
    mapped to zero rather than dividing by |k| = 0).
    """
    if kind == "bessel":
        mult = (1.0 + grid.ksq) ** (sigma / 2.0)
    elif kind == "riesz":
        with np.errstate(divide="ignore", invalid="ignore"):
            mult = grid.kabs ** sigma
        mult[grid.kabs == 0.0] = 0.0
    else:
        raise ConfigError(f"unknown multiplier kind {kind!r}")
    return grid.apply_multiplier(g, mult)


def horizontal_gradient(grid, g):
    """Tuple of the d horizontal derivatives of an interface field."""
    if grid.d == 1:
        return (grid.d1(g),)
    return (grid.d1(g), grid.d2(g))


@dataclass
class InterfaceField:
    """A real scalar sampled on the horizontal grid."""

    grid: HorizontalGrid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != self.grid.shape:
            raise ConfigError(
                f"interface field shape {self.data.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("interface field contains non-finite values")
