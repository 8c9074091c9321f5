"""Classical soliton profiles, periodic grids and physical-unit conversions.

All quantities are in the dimensionless units of the scaled NLSE

    i d_t phi = -1/2 d_z^2 phi - |phi|^2 phi

unless a function name says otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative boundary amplitude accepted by `soliton_profile`; the default grid
# (L * nbar = 80) leaves sech(20) ~ 4e-9 at the edge.
BOUNDARY_TOL = 1e-8


class GridTooNarrowError(ValueError):
    """The soliton tail does not decay to the required level at the grid edge."""


class SingularConversionError(ValueError):
    """A unit conversion was requested with zero group-velocity dispersion."""


def soliton_period(nbar: float) -> float:
    """Fundamental soliton period ``2 pi / nbar**2``."""
    if not nbar > 0:
        raise ValueError(f"nbar must be positive, got {nbar}")
    return 2.0 * np.pi / nbar**2


@dataclass(frozen=True)
class SolitonParams:
    nbar: float
    T0: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "T0", soliton_period(self.nbar))


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid on ``[-L/2, L/2)``.

    Args:
        length (float): domain length ``L``
        num_points (int): number of samples, a power of two
    """

    length: float
    num_points: int

    def __post_init__(self):
        n = int(self.num_points)
        if n < 2 or n & (n - 1):
            raise ValueError(f"num_points must be a power of two, got {self.num_points}")
        if not self.length > 0:
            raise ValueError("length must be positive")

    @classmethod
    def default(cls, nbar: float, scaled_length: float = 80.0, num_points: int = 2048):
        """Grid with ``L * nbar = scaled_length``."""
        return cls(scaled_length / nbar, num_points)

    @property
    def dz(self) -> float:
        return self.length / self.num_points

    @property
    def z(self) -> np.ndarray:
        return -0.5 * self.length + self.dz * np.arange(self.num_points)

    @property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in FFT order, covering ``[-pi Nz / L, pi Nz / L)``."""
        return 2.0 * np.pi * np.fft.fftfreq(self.num_points, d=self.dz)

    def derivative(self, f: np.ndarray, order: int = 1, axis: int = -1) -> np.ndarray:
        """Spectral derivative ``d^order f / dz^order`` along ``axis``."""
        shape = [1] * np.ndim(f)
        shape[axis] = self.num_points
        ik = (1j * self.k).reshape(shape)
        return np.fft.ifft(ik**order * np.fft.fft(f, axis=axis), axis=axis)

    def inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        """Quadrature of ``conj(f) g`` over the grid."""
        return np.vdot(f, g) * self.dz


def soliton_profile(params: SolitonParams, grid: SpatialGrid, t: float = 0.0,
                    boundary_tol: float = BOUNDARY_TOL) -> np.ndarray:
    """Fundamental soliton ``(nbar/2) sech(nbar z / 2) exp(i nbar^2 t / 8)`` on the grid."""
    nbar = params.nbar
    edge = 1.0 / np.cosh(0.25 * nbar * grid.length)
    if edge > boundary_tol:
        raise GridTooNarrowError(
            f"boundary amplitude {edge:.3e} of peak exceeds {boundary_tol:.1e}; "
            f"use L * nbar >= {4 * np.arccosh(1 / boundary_tol):.1f}")
    # Summing the periodic images removes the derivative jump at the wrap
    # point; repeated spectral derivatives would otherwise amplify it.
    z = grid.z
    envelope = np.zeros_like(z)
    for j in (-2, -1, 1, 2):
        envelope += 1.0 / np.cosh(0.5 * nbar * (z + j * grid.length))
    envelope += 1.0 / np.cosh(0.5 * nbar * z)
    return 0.5 * nbar * envelope * np.exp(1j * nbar**2 * t / 8.0)


def soliton_mode(nbar: float, grid: SpatialGrid, boundary_tol: float = BOUNDARY_TOL) -> np.ndarray:
    """Normalized supermode ``u0 = f(z, 0) / sqrt(nbar)`` (real valued)."""
    f = soliton_profile(SolitonParams(nbar), grid, 0.0, boundary_tol)
    return f.real / np.sqrt(nbar)


def nlse_residual(field: np.ndarray, grid: SpatialGrid, dfdt: np.ndarray) -> np.ndarray:
    """Pointwise residual ``i f_t + f_zz / 2 + |f|^2 f`` of the scaled NLSE."""
    return 1j * dfdt + 0.5 * grid.derivative(field, 2) + np.abs(field) ** 2 * field


@dataclass(frozen=True)
class PhysicalUnits:
    """Pulse and waveguide parameters in SI units.

    Args:
        t_fwhm (float): intensity FWHM in seconds
        v_g (float): group velocity in m/s
        k2 (float): GVD in s^2/m (signed)
        k3 (float): TOD in s^3/m
    """

    t_fwhm: float
    v_g: float
    k2: float
    k3: float = 0.0

    def _check(self):
        if not self.t_fwhm > 0 or not self.v_g > 0:
            raise ValueError("t_fwhm and v_g must be positive")
        if self.k2 == 0:
            raise SingularConversionError("k2 must be nonzero for unit conversion")

    @classmethod
    def from_engineering(cls, t_fwhm_fs: float, v_g: float, k2_ps2_per_km: float,
                         k3_ps3_per_km: float = 0.0) -> "PhysicalUnits":
        """Build from fs, ps^2/km and ps^3/km."""
        return cls(t_fwhm_fs * 1e-15, v_g, k2_ps2_per_km * 1e-27, k3_ps3_per_km * 1e-39)


def physical_beta3(u: PhysicalUnits) -> float:
    """Scaled third-order dispersion parameter for a physical pulse."""
    u._check()
    return -1.1 * u.v_g * abs(u.k2) / u.t_fwhm * (1.0 - u.k3 / (3.0 * u.v_g * u.k2**2))


def physical_period(u: PhysicalUnits) -> float:
    """Soliton period in seconds."""
    u._check()
    return 0.51 * u.t_fwhm**2 / (u.v_g * abs(u.k2))
