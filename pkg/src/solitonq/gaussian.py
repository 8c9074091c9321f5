"""Nonlinear Gaussian-state propagation in the LSM basis and on the spatial grid.

A state is a mean ``mu_m = <a_m>`` plus the fluctuation moments
``N[m, n] = <da_m^+ da_n>`` and ``M[m, n] = <da_m da_n>``. Quadratures are
``x = (a + a^+)/sqrt(2)`` and ``p = (a - a^+)/(i sqrt(2))``, so the vacuum
variance is 1/2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from math import comb
from typing import Dict, List, Optional, Sequence

import numba
import numpy as np
import scipy.fft as sp_fft
import scipy.linalg as la

from . import lsm
from .core import SpatialGrid, soliton_mode, soliton_period
from .me import cubic_dispersion_coefficient


class PhysicalityError(RuntimeError):
    def __init__(self, msg, time=None, margin=None):
        super().__init__(msg)
        self.time = time
        self.margin = margin


@dataclass
class GaussianState:
    mu: np.ndarray
    N: np.ndarray
    M: np.ndarray
    basis: str = "lsm"
    dz: Optional[float] = None

    @property
    def num_modes(self) -> int:
        return len(self.mu)

    def photon_number(self) -> float:
        return float(np.sum(np.abs(self.mu) ** 2) + np.trace(self.N).real)

    def copy(self) -> "GaussianState":
        return replace(self, mu=self.mu.copy(), N=self.N.copy(), M=self.M.copy())

    def quadrature_covariance(self) -> np.ndarray:
        """Symmetrized covariance of ``(x_1..x_M, p_1..p_M)``."""
        eye = 0.5 * np.eye(self.num_modes)
        vxx = self.M.real + self.N.real + eye
        vpp = -self.M.real + self.N.real + eye
        vxp = self.M.imag + self.N.imag
        return np.block([[vxx, vxp], [vxp.T, vpp]])

    def transform(self, U: np.ndarray) -> "GaussianState":
        """New state in the mode basis ``b = U a`` (U unitary)."""
        return replace(self, mu=U @ self.mu, N=U.conj() @ self.N @ U.T, M=U @ self.M @ U.T)


def _omega(m: int) -> np.ndarray:
    eye = np.eye(m)
    z = np.zeros((m, m))
    return np.block([[z, eye], [-eye, z]])


def symplectic_eigenvalues(V: np.ndarray) -> np.ndarray:
    m = V.shape[0] // 2
    ev = np.linalg.eigvals(1j * _omega(m) @ V)
    return np.sort(np.abs(ev.real))[::2]


def purity_residual(state: GaussianState) -> float:
    """``max |(2 V Omega)^2 + 1|``; zero exactly for pure Gaussian states."""
    V = state.quadrature_covariance()
    X = 2.0 * V @ _omega(state.num_modes)
    return float(np.abs(X @ X + np.eye(len(X))).max())


def physicality_margin(state: GaussianState) -> float:
    """Smallest symplectic eigenvalue minus the vacuum value 1/2."""
    return float(symplectic_eigenvalues(state.quadrature_covariance()).min() - 0.5)


def init_gaussian(nbar: float, num_modes: int) -> GaussianState:
    """Coherent soliton in LSM mode 0, vacuum fluctuations everywhere."""
    mu = np.zeros(num_modes, dtype=complex)
    mu[0] = np.sqrt(nbar)
    z = np.zeros((num_modes, num_modes), dtype=complex)
    return GaussianState(mu, z, z.copy(), "lsm")


def init_gaussian_grid(nbar: float, grid: SpatialGrid) -> GaussianState:
    """Coherent soliton field on the grid with ``a_i = sqrt(dz) phi(z_i)``."""
    mu = np.sqrt(nbar * grid.dz) * soliton_mode(nbar, grid).astype(complex)
    n = grid.num_points
    return GaussianState(mu, np.zeros((n, n), complex), np.zeros((n, n), complex), "grid", grid.dz)


@dataclass
class SqueezingSpectrum:
    db: np.ndarray
    modes: np.ndarray  # rows are orthonormal complex mode vectors


def squeezing_spectrum(state: GaussianState) -> SqueezingSpectrum:
    """Squeezing per supermode from the eigen-decomposition of the covariance.

    The ``num_modes`` smallest quadrature variances ``lam`` give
    ``-10 log10(2 lam)`` dB below vacuum. For a pure state these are the
    Bloch-Messiah squeezing values.
    """
    m = state.num_modes
    V = state.quadrature_covariance()
    evals, evecs = la.eigh(V)
    lam = evals[:m]
    vecs = evecs[:, :m]
    w = (vecs[:m] - 1j * vecs[m:]).T
    q, _ = np.linalg.qr(w.T)
    modes = q.T * np.exp(-1j * np.angle(np.sum(q.T * w.conj(), axis=1)))[:, None]
    db = -10.0 * np.log10(2.0 * lam)
    order = np.argsort(-db, kind="stable")
    return SqueezingSpectrum(db[order], modes[order])


# LSM moment closure


def _closure_rhs(D, C, mu, N, M):
    eye = np.eye(len(mu))
    wick = (np.einsum("m,k,l->mkl", mu.conj(), mu, mu) + np.einsum("m,kl->mkl", mu.conj(), M)
            + np.einsum("k,ml->mkl", mu, N) + np.einsum("l,mk->mkl", mu, N))
    dmu = -1j * (D @ mu - 2.0 * np.einsum("pmkl,mkl->p", C, wick))
    A = D - 4.0 * np.einsum("pmkl,m,l->pk", C, mu.conj(), mu)
    B = -2.0 * np.einsum("pmkl,k,l->pm", C, mu, mu)
    dM = -1j * (A @ M + M @ A.T + B @ N + (N.T + eye) @ B)
    dN = 1j * (A.conj() @ N + B.conj() @ M - N @ A.T - M.conj() @ B)
    return dmu, dN, dM


def _rk4(rhs, y, h):
    k1 = rhs(*y)
    k2 = rhs(*(a + 0.5 * h * b for a, b in zip(y, k1)))
    k3 = rhs(*(a + 0.5 * h * b for a, b in zip(y, k2)))
    k4 = rhs(*(a + h * b for a, b in zip(y, k3)))
    return tuple(a + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


@dataclass
class GaussianTrajectory:
    times: np.ndarray
    states: List[GaussianState]
    nbar: float
    diagnostics: Dict[str, float] = field(default_factory=dict)


def _step_counts(t0, t1, dt):
    n = max(1, int(np.ceil((t1 - t0) / dt - 1e-9)))
    return n, (t1 - t0) / n


def evolve_gaussian_lsm(terms: lsm.HamiltonianTerms, state: GaussianState, times: Sequence[float],
                        dt: Optional[float] = None, physicality_tol: float = 1e-6,
                        check_physicality: bool = True) -> GaussianTrajectory:
    """Fixed-step RK4 integration of the Gaussian closure for the toggled terms.

    The mean uses Wick-factorized cubic moments; the fluctuations follow the
    Bogoliubov generator linearized about the instantaneous mean.
    """
    if terms.num_modes != state.num_modes:
        raise ValueError("terms and state must share a basis")
    D, C = lsm.quadratic_quartic_tensors(terms.monomials(), terms.num_modes)
    return _evolve_closure(D, C, state, times, terms.nbar, dt, physicality_tol, check_physicality)


def _evolve_closure(D, C, state, times, nbar, dt=None, physicality_tol=1e-6, check_physicality=True):
    times = np.asarray(times, dtype=float)
    dt = soliton_period(nbar) / 2000.0 if dt is None else dt
    y = (state.mu.astype(complex), state.N.astype(complex), state.M.astype(complex))
    rhs = lambda mu, N, M: _closure_rhs(D, C, mu, N, M)
    out, t = [], 0.0
    n_start = state.photon_number()
    worst_margin = 0.0
    for target in times:
        if target < t - 1e-15:
            raise ValueError("times must be nondecreasing and start at >= 0")
        if target > t:
            steps, h = _step_counts(t, target, dt)
            for _ in range(steps):
                y = _rk4(rhs, y, h)
            t = target
        s = GaussianState(y[0].copy(), y[1].copy(), y[2].copy(), "lsm")
        if check_physicality:
            margin = physicality_margin(s)
            worst_margin = min(worst_margin, margin)
            if margin < -physicality_tol:
                raise PhysicalityError(f"uncertainty bound violated by {-margin:.2e} at t = {t}", t, margin)
        out.append(s)
    drift = max(abs(s.photon_number() - n_start) for s in out) if out else 0.0
    return GaussianTrajectory(times, out, nbar, {"number_drift": drift, "physicality_margin": worst_margin})


def lsm_observables(traj: GaussianTrajectory, squeezing: bool = True) -> Dict[str, np.ndarray]:
    """Mode-0 series in the frame rotating at ``-nbar^2 / 8``."""
    nbar = traj.nbar
    a0 = np.array([s.mu[0] for s in traj.states]) * np.exp(-1j * nbar**2 * traj.times / 8.0)
    n0 = np.array([abs(s.mu[0]) ** 2 + s.N[0, 0].real for s in traj.states])
    out = {"t": traj.times, "a0": a0, "n0": n0}
    if squeezing:
        sq = [squeezing_spectrum(s).db for s in traj.states]
        out["sq1_db"] = np.array([d[0] for d in sq])
        out["sq2_db"] = np.array([d[1] if len(d) > 1 else 0.0 for d in sq])
    return out


# Single-mode Gaussian dynamics for a Fock-diagonal Hamiltonian


def normal_order_coefficients(eps: np.ndarray, order: Optional[int] = None) -> np.ndarray:
    """``h_k`` with ``eps_n = sum_k h_k n! / (n - k)!``, i.e. ``H = sum_k h_k a^+^k a^k``.

    Obtained from Newton forward differences, ``h_k = Delta^k eps_0 / k!``.
    """
    eps = np.asarray(eps, dtype=float)
    order = len(eps) - 1 if order is None else order
    h = np.zeros(order + 1)
    diff = eps.copy()
    fact = 1.0
    for k in range(order + 1):
        if k:
            fact *= k
        h[k] = diff[0] / fact
        diff = np.diff(diff)
    return h


def _double_factorial_odd(n: int) -> float:
    # (n - 1)!! for even n, zero for odd n (vanishing odd Gaussian moments)
    if n % 2:
        return 0.0
    out = 1.0
    for j in range(n - 1, 0, -2):
        out *= j
    return out


def gaussian_moment(i: int, j: int, N: complex, M: complex) -> complex:
    """``<d^+^i d^j>`` for a zero-mean single-mode Gaussian."""
    tot = 0.0 + 0.0j
    fact = 1.0
    for p in range(min(i, j) + 1):
        if p:
            fact *= p
        a, b = i - p, j - p
        if a % 2 or b % 2:
            continue
        tot += comb(i, p) * comb(j, p) * fact * N**p \
            * _double_factorial_odd(a) * np.conj(M) ** (a // 2) * _double_factorial_odd(b) * M ** (b // 2)
    return tot


def normal_moment(i: int, j: int, mu: complex, N: complex, M: complex) -> complex:
    """``<a^+^i a^j>`` for a single-mode Gaussian with mean ``mu``."""
    tot = 0.0 + 0.0j
    for r in range(i + 1):
        for s in range(j + 1):
            tot += comb(i, r) * comb(j, s) * np.conj(mu) ** (i - r) * mu ** (j - s) * gaussian_moment(r, s, N, M)
    return tot


def evolve_gaussian_single_mode(h: np.ndarray, mu0: complex, times: Sequence[float], dt: float,
                                N0: complex = 0.0, M0: complex = 0.0) -> Dict[str, np.ndarray]:
    """Gaussian closure for ``H = sum_k h_k a^+^k a^k``.

    The mean uses exact Gaussian moments of ``[a, H]``; the covariance is
    driven by the quadratic expansion of ``H`` about the mean.
    """
    h = np.asarray(h, dtype=float)
    ks = np.nonzero(h)[0]

    def rhs(mu, N, M):
        dmu = -1j * sum(h[k] * k * normal_moment(k - 1, k, mu, N, M) for k in ks if k >= 1)
        r2 = abs(mu) ** 2
        A = sum(h[k] * k * k * r2 ** (k - 1) for k in ks if k >= 1)
        B = sum(h[k] * k * (k - 1) * np.conj(mu) ** (k - 2) * mu**k for k in ks if k >= 2)
        dM = -1j * (2 * A * M + 2 * B * N + B)
        dN = 1j * (np.conj(B) * M - B * np.conj(M))
        return np.array([dmu, dN, dM])

    times = np.asarray(times, dtype=float)
    y = np.array([mu0, N0, M0], dtype=complex)
    t, out = 0.0, []
    for target in times:
        if target > t:
            steps, hstep = _step_counts(t, target, dt)
            for _ in range(steps):
                k1 = rhs(*y)
                k2 = rhs(*(y + 0.5 * hstep * k1))
                k3 = rhs(*(y + 0.5 * hstep * k2))
                k4 = rhs(*(y + hstep * k3))
                y = y + hstep / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = target
        out.append(y.copy())
    out = np.array(out)
    return {"t": times, "a": out[:, 0], "N": out[:, 1].real, "M": out[:, 2],
            "n": np.abs(out[:, 0]) ** 2 + out[:, 1].real}


# Gaussian split-step Fourier on the grid


def _rows(X: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """``X U^T``: the diagonal-in-k propagator applied to every row of X."""
    return sp_fft.ifft(phase * sp_fft.fft(X, axis=1), axis=1)


def _apply_linear(state: GaussianState, phase: np.ndarray) -> None:
    """In-place ``mu -> U mu``, ``N -> conj(U) N U^T``, ``M -> U M U^T``.

    Only row transforms are used; the symmetry of M and Hermiticity of N
    turn the column transform into a row transform of the transpose.
    """
    state.mu = sp_fft.ifft(phase * sp_fft.fft(state.mu))
    state.M = _rows(np.ascontiguousarray(_rows(state.M, phase).T), phase)
    state.N = _rows(np.ascontiguousarray(_rows(state.N, phase).conj().T), phase)


def _local_kerr(mu, n, m, g, h):
    """RK4 step of the on-site closure plus the local Bogoliubov coefficients (u, v)."""

    def rhs(mu, n, m, u, v):
        A = -2.0 * g * np.abs(mu) ** 2
        B = -g * mu**2
        dmu = 1j * g * ((np.abs(mu) ** 2 + 2.0 * n) * mu + m * np.conj(mu))
        dn = 1j * (np.conj(B) * m - B * np.conj(m))
        dm = -1j * (2.0 * A * m + 2.0 * B * n + B)
        du = -1j * (A * u + B * np.conj(v))
        dv = -1j * (A * v + B * np.conj(u))
        return dmu, dn, dm, du, dv

    y = (mu, n.astype(complex), m, np.ones_like(mu), np.zeros_like(mu))
    y = _rk4(rhs, y, h)
    return y[0], y[3], y[4]


@numba.njit(cache=True)
def _bogoliubov_kernel(N, M, u, v):
    n = len(u)
    for i in range(n):
        for j in range(i, n):
            nij, mij = N[i, j], M[i, j]
            nji, mji = N[j, i], M[j, i]
            p1 = nij * u[j] + np.conj(mij) * v[j]
            p2 = mij * u[j] + np.conj(nij) * v[j]
            q1 = nji * u[i] + np.conj(mji) * v[i]
            q2 = mji * u[i] + np.conj(nji) * v[i]
            N[i, j] = np.conj(u[i]) * p1 + np.conj(v[i]) * p2
            M[i, j] = u[i] * p2 + v[i] * p1
            N[j, i] = np.conj(u[j]) * q1 + np.conj(v[j]) * q2
            M[j, i] = u[j] * q2 + v[j] * q1
        N[i, i] += abs(v[i]) ** 2
        M[i, i] += u[i] * v[i]


def _apply_local_bogoliubov(state: GaussianState, u: np.ndarray, v: np.ndarray) -> None:
    """``da_i -> u_i da_i + v_i da_i^+`` applied in place to the covariance pair.

    ``N' = conj(u_i) P1 + conj(v_i) P2`` and ``M' = u_i P2 + v_i P1`` with the
    column-scaled ``P1 = N u + conj(M) v``, ``P2 = M u + conj(N) v``, plus the
    vacuum terms on the diagonal.
    """
    state.N = np.ascontiguousarray(state.N)
    state.M = np.ascontiguousarray(state.M)
    _bogoliubov_kernel(state.N, state.M, np.ascontiguousarray(u), np.ascontiguousarray(v))


@dataclass
class GridTrajectory:
    times: np.ndarray
    states: List[GaussianState]
    nbar: float
    grid: SpatialGrid
    diagnostics: Dict[str, float] = field(default_factory=dict)


def grid_dispersion(grid: SpatialGrid, c3: float = 0.0) -> np.ndarray:
    k = grid.k
    return 0.5 * k**2 + c3 * k**3


def evolve_gssf(grid: SpatialGrid, state: GaussianState, times: Sequence[float], nbar: float,
                alpha3: float = 0.0, dt: Optional[float] = None, nonlinear: bool = True,
                purity_tol: Optional[float] = None) -> GridTrajectory:
    """Strang-split Gaussian propagation on the periodic grid.

    The linear part ``omega(k) = k^2/2 + alpha3 k^3`` is applied exactly in
    wavevector space; consecutive half steps are merged between outputs. The
    local Kerr part ``-(1/2dz) a_i^+^2 a_i^2`` advances the mean with its
    Wick-factorized drift and the fluctuations by the local Bogoliubov map
    of the linearized on-site generator. ``alpha3`` is the cubic
    coefficient of the dispersion (see ``me.cubic_dispersion_coefficient``).
    """
    if state.basis != "grid":
        raise ValueError("evolve_gssf needs a grid state")
    times = np.asarray(times, dtype=float)
    dt = soliton_period(nbar) / 2000.0 if dt is None else dt
    g = 1.0 / grid.dz
    w = grid_dispersion(grid, alpha3)
    s = state.copy()
    out, t = [], 0.0
    n_start = s.photon_number()
    for target in times:
        if target > t:
            steps, h = _step_counts(t, target, dt)
            half = np.exp(-0.5j * w * h)
            full = half * half
            _apply_linear(s, half)
            for j in range(steps):
                if nonlinear:
                    mu, u, v = _local_kerr(s.mu, np.diag(s.N).real, np.diag(s.M).copy(), g, h)
                    _apply_local_bogoliubov(s, u, v)
                    s.mu = mu
                _apply_linear(s, full if j < steps - 1 else half)
            t = target
        if purity_tol is not None:
            res = purity_residual(s)
            if res > purity_tol:
                raise PhysicalityError(f"purity residual {res:.2e} at t = {t}", t, res)
        out.append(s.copy())
    drift = max(abs(x.photon_number() - n_start) for x in out) if out else 0.0
    return GridTrajectory(times, out, nbar, grid, {"number_drift": drift})


def supermode_weights(u0: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    return np.asarray(u0) * np.sqrt(grid.dz)


def project_supermode(state: GaussianState, u0: np.ndarray, grid: SpatialGrid):
    """``(<a0>, <a0^+ a0>)`` for ``a0 = sum_i conj(w_i) a_i`` with ``w = u0 sqrt(dz)``."""
    w = supermode_weights(u0, grid)
    a0 = np.vdot(w, state.mu)
    n0 = abs(a0) ** 2 + (w @ state.N @ w.conj()).real
    return a0, float(n0)


def grid_observables(traj: GridTrajectory, u0: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    u0 = soliton_mode(traj.nbar, traj.grid) if u0 is None else u0
    proj = [project_supermode(s, u0, traj.grid) for s in traj.states]
    a0 = np.array([p[0] for p in proj]) * np.exp(-1j * traj.nbar**2 * traj.times / 8.0)
    return {"t": traj.times, "a0": a0, "n0": np.array([p[1] for p in proj])}


def reservoir_spectrum(state: GaussianState, grid: SpatialGrid, u0: Optional[np.ndarray] = None,
                       nbar: Optional[float] = None):
    """``(k, <c_k^+ c_k>)`` of the field with the soliton supermode projected out.

    ``c_k = sqrt(dz / 2 pi) sum_i exp(-i k z_i) (P a)_i`` with
    ``P = 1 - w w^T``. Wavevectors are returned in ascending order.
    """
    if u0 is None:
        u0 = soliton_mode(nbar, grid)
    w = supermode_weights(u0, grid)
    w = w / np.linalg.norm(w)
    P = np.eye(len(w)) - np.outer(w, w.conj())
    z = grid.z
    k = np.fft.fftshift(grid.k)
    F = np.sqrt(grid.dz / (2 * np.pi)) * np.exp(-1j * np.outer(k, z)) @ P
    mean = F @ state.mu
    fluct = np.sum((F.conj() @ state.N) * F, axis=1).real
    return k, np.abs(mean) ** 2 + fluct


def lsm_reservoir_spectrum(state: GaussianState, basis: lsm.SupermodeBasis, k: np.ndarray) -> np.ndarray:
    """``sum_{n,m>=1} conj(u_n(k)) u_m(k) <a_n^+ a_m>`` over the given wavevectors."""
    U = basis.fourier(k)[1:]
    corr = np.outer(state.mu[1:].conj(), state.mu[1:]) + state.N[1:, 1:]
    return np.einsum("nk,nm,mk->k", U.conj(), corr, U).real


def dispersive_loss(k: np.ndarray, spectrum: np.ndarray, k0: float, delta_k: float) -> float:
    """Window integral of the reservoir spectrum over ``[k0 - dk, k0 + dk]``."""
    sel = np.abs(k - k0) <= delta_k
    if not np.any(sel):
        raise ValueError("window holds no grid wavevectors")
    if k0 + delta_k > k.max() or k0 - delta_k < k.min():
        raise ValueError("window extends beyond the grid band")
    dk = k[1] - k[0]
    return float(np.sum(spectrum[sel]) * dk)


def series_to_csv(path, obs: Dict[str, np.ndarray], T0: float, dn3: Optional[np.ndarray] = None) -> None:
    cols = ["t_over_T0", "re_a0", "im_a0", "n0", "sq1_db", "sq2_db", "dn3"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i, t in enumerate(obs["t"]):
            a = obs["a0"][i]
            row = [t / T0, a.real, a.imag, obs["n0"][i],
                   obs.get("sq1_db", [np.nan] * len(obs["t"]))[i],
                   obs.get("sq2_db", [np.nan] * len(obs["t"]))[i],
                   dn3[i] if dn3 is not None else np.nan]
            w.writerow([repr(float(x)) for x in row])


def spectrum_to_csv(path, k: np.ndarray, spectrum: np.ndarray, nbar: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pi_k_over_nbar", "ckdag_ck"])
        for kk, s in zip(k, spectrum):
            w.writerow([repr(float(np.pi * kk / nbar)), repr(float(s))])
