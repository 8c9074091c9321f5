"""Single-supermode master equation: Lambda dissipator, H_fluc and TOD channels.

Fock index conventions follow the soliton supermode: ``E_n`` is the H_0
eigenvalue of ``|n>`` and ``s_n = |n-1><n|`` is a one-photon transition.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply
from scipy.special import gammaln

from . import fock
from .core import soliton_period

OMEGA_NBAR = -0.017
LINDBLAD_KINDS = ("a", "adag_a2", "sol")


class InterpolationRangeError(ValueError):
    pass


class RootError(RuntimeError):
    pass


def h0_diag(nbar: float, cutoff: int) -> np.ndarray:
    """Eigenvalues ``E_n = nbar^2 n / 24 - nbar (n^2 - n) / 12`` of H_0."""
    n = np.arange(cutoff, dtype=float)
    return nbar**2 * n / 24.0 - nbar * (n**2 - n) / 12.0


def omega_tilde(n, nbar: float):
    """``pi T0 (E_n - E_{n-1})``, linear in n."""
    n = np.asarray(n)
    if np.any(n < 1):
        raise ValueError("omega_tilde needs n >= 1")
    return np.pi**2 / 12.0 - np.pi**2 * (n - 1) / (3.0 * nbar)


def fluctuation_strength(nbar: float) -> float:
    """Coefficient ``(nbar^2 / 2 pi^2)(3 - pi^2 / 3)`` of the first H_fluc term."""
    return nbar**2 / (2.0 * np.pi**2) * (3.0 - np.pi**2 / 3.0)


@dataclass(frozen=True)
class SpectralResponse:
    """Response function ``R(omega)`` entering the Lambda matrix.

    ``kind`` is ``"hamiltonian-limit"`` or ``"table"``.
    """

    func: Callable[[np.ndarray], np.ndarray]
    kind: str

    def __call__(self, omega):
        return self.func(np.asarray(omega, dtype=float))

    @classmethod
    def hamiltonian_limit(cls) -> "SpectralResponse":
        # Constant response for which the dissipator equals -i[K n b_n^2, rho]
        # with the H_fluc coefficient K; solving gives R = -K T0, independent of nbar.
        r0 = -(3.0 - np.pi**2 / 3.0) / np.pi
        return cls(lambda w: np.full(np.shape(w), r0, dtype=complex), "hamiltonian-limit")

    @classmethod
    def from_table(cls, omega: Sequence[float], values: Sequence[complex]) -> "SpectralResponse":
        omega = np.asarray(omega, dtype=float)
        values = np.asarray(values, dtype=complex)
        order = np.argsort(omega)
        omega, values = omega[order], values[order]

        def func(w):
            if np.any(w < omega[0]) or np.any(w > omega[-1]):
                raise InterpolationRangeError(
                    f"R requested outside tabulated range [{omega[0]}, {omega[-1]}]")
            return np.interp(w, omega, values.real) + 1j * np.interp(w, omega, values.imag)

        return cls(func, "table")

    @classmethod
    def from_csv(cls, path) -> "SpectralResponse":
        """Columns ``omega, re_R[, im_R]`` with one header line."""
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        vals = data[:, 1] + (1j * data[:, 2] if data.shape[1] > 2 else 0)
        return cls.from_table(data[:, 0], vals)


def lambda_matrix(nbar: float, R: SpectralResponse, cutoff: int) -> np.ndarray:
    """Transition matrix of the one-reservoir-photon dissipator.

    ``lam[n, m] = -i sqrt(nm) / T0 b_n b_m R(omega_tilde_n)`` with
    ``b_n = 1 - (n - 1)/nbar``; row and column 0 vanish.
    """
    if cutoff <= nbar + 1:
        raise ValueError(f"cutoff {cutoff} must exceed nbar + 1 = {nbar + 1}")
    T0 = soliton_period(nbar)
    n = np.arange(1, cutoff, dtype=float)
    c = np.sqrt(n) * (1.0 - (n - 1.0) / nbar)
    lam = np.zeros((cutoff, cutoff), dtype=complex)
    lam[1:, 1:] = -1j / T0 * np.outer(c * R(omega_tilde(n, nbar)), c)
    return lam


def h_fluc(nbar: float, cutoff: int, include_omega: bool = True, omega: float = OMEGA_NBAR) -> np.ndarray:
    """Diagonal of the large-nbar fluctuation Hamiltonian."""
    if nbar < 25:
        warnings.warn("H_fluc is a large-nbar reduction; nbar < 25 is outside its intended range",
                      RuntimeWarning, stacklevel=2)
    n = np.arange(cutoff, dtype=float)
    h = fluctuation_strength(nbar) * n * (1.0 - (n - 1.0) / nbar) ** 2
    if include_omega:
        h = h + omega * n * (n - 1.0)
    return h


def heff_diag(nbar: float, cutoff: int, include_omega: bool = True) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return h0_diag(nbar, cutoff) + h_fluc(nbar, cutoff, include_omega)


def _poisson_weights(mean: float, nmax: int) -> np.ndarray:
    n = np.arange(nmax + 1)
    if mean == 0:
        return (n == 0).astype(float)
    return np.exp(n * np.log(mean) - mean - gammaln(n + 1))


def poisson_distribution(nbar: float, cutoff: int) -> np.ndarray:
    """Photon-number distribution of a coherent state, renormalized to ``cutoff`` levels."""
    p = _poisson_weights(nbar, cutoff - 1)
    return p / p.sum()


def coherent_cutoff(nbar: float, tail: float = 1e-12) -> int:
    """Smallest level count whose Poisson tail mass is below ``tail``."""
    nmax = int(nbar + 12 * np.sqrt(nbar + 1) + 20)
    p = _poisson_weights(nbar, nmax)
    cum = np.cumsum(p)
    return int(np.searchsorted(cum, 1.0 - tail) + 2)


def exact_diagonal_evolution(h_diag: np.ndarray, alpha: complex, times: Sequence[float],
                             tail_tol: float = 1e-12, return_rho: bool = False) -> Dict[str, np.ndarray]:
    """Coherent-state evolution under a Fock-diagonal Hamiltonian.

    ``<a>(t) = sum_n P_n alpha exp(-i (eps_{n+1} - eps_n) t)`` with Poisson
    weights ``P_n``. The photon-number distribution is stationary. The
    density matrix is only assembled when ``return_rho`` is set.
    """
    h = np.asarray(h_diag, dtype=float)
    times = np.asarray(times, dtype=float)
    mean = abs(alpha) ** 2
    p = _poisson_weights(mean, len(h) - 1)
    if 1.0 - p[:-1].sum() > tail_tol:
        raise fock.CutoffError(f"Poisson tail {1 - p[:-1].sum():.2e} beyond diagonal length {len(h)}")
    gaps = np.diff(h)
    a = alpha * np.exp(-1j * np.outer(times, gaps)) @ p[:-1]
    n = np.arange(len(h))
    out = {"t": times, "a": a, "n": np.full(len(times), np.dot(n, p))}
    if return_rho:
        amp = np.sqrt(p) * np.exp(1j * np.angle(alpha) * n) if alpha != 0 else np.sqrt(p)
        out["rho"] = [np.outer(amp * np.exp(-1j * h * t), np.conj(amp * np.exp(-1j * h * t))) for t in times]
    return out


def tod_phase_matching(beta3: float, tol: float = 1e-12, maxiter: int = 100) -> float:
    """Real root of ``x^2 - beta3 x^3 + pi^2 / 4 = 0`` by safeguarded Newton.

    The cubic has a single real root, located beyond the local maximum at
    ``2 / (3 beta3)``; Newton steps leaving that bracket are replaced by
    bisection.
    """
    if beta3 == 0:
        raise ValueError("beta3 must be nonzero")
    b = abs(beta3)
    f = lambda x: x * x - b * x**3 + np.pi**2 / 4
    df = lambda x: 2 * x - 3 * b * x * x
    lo = 2.0 / (3.0 * b)
    hi = 1.0 / b
    while f(hi) > 0:
        hi *= 2.0
    x = 1.0 / b
    for _ in range(maxiter):
        fx = f(x)
        if fx > 0:
            lo = x
        else:
            hi = x
        d = df(x)
        step = fx / d if d != 0 else np.inf
        xn = x - step
        if not lo < xn < hi:
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 1e-15 * abs(x) or abs(f(xn)) < tol * 1e-3:
            return float(np.sign(beta3) * xn)
        x = xn
    if abs(f(x)) < tol:
        return float(np.sign(beta3) * x)
    raise RootError(f"phase matching did not converge for beta3 = {beta3}")


@dataclass(frozen=True)
class TODParams:
    beta3: float
    k0: float
    delta_k: float

    def __post_init__(self):
        if not self.delta_k > 0:
            raise ValueError("delta_k must be positive")

    @classmethod
    def default(cls, nbar: float, beta3: float, half_width_scaled: float = 1.0) -> "TODParams":
        """Window centred at ``nbar x0 / pi`` with ``pi delta_k / nbar = half_width_scaled``."""
        return cls(beta3, nbar * tod_phase_matching(beta3) / np.pi, half_width_scaled * nbar / np.pi)


def tod_rates(beta3: float, table: Optional[Dict[str, float]] = None) -> Dict[str, float]:
    """Approximate TOD rates; entries of ``table`` override the defaults."""
    b = abs(beta3)
    if not 0 < b < 1:
        raise ValueError("|beta3| must lie in (0, 1)")
    rates = {
        "gamma_NL": 2.0 / (np.pi * b**3) * np.exp(-2.0 / b),
        "omega_NL": (np.pi**4 / 384.0 - 17.0 * np.pi**2 / 480.0) * beta3**2,
        "gamma_L": 0.0,
        "gamma_sol": 0.0,
        "omega_L": 0.0,
        "omega_sol": 0.0,
    }
    if table:
        unknown = set(table) - set(rates)
        if unknown:
            raise KeyError(f"unknown rate names {sorted(unknown)}")
        rates.update(table)
    if min(rates[k] for k in ("gamma_NL", "gamma_L", "gamma_sol")) < 0:
        raise ValueError("rates must be nonnegative")
    return rates


def cubic_dispersion_coefficient(beta3: float, nbar: float) -> float:
    """Coefficient ``c3`` of the linear dispersion ``k^2/2 + c3 k^3`` on the grid.

    Chosen so a linear wave at ``k = nbar x / pi`` is phase matched to the
    soliton exactly when ``x`` solves the TOD phase-matching cubic.
    """
    return -np.pi * beta3 / (2.0 * nbar)


def lindblad_operator(kind: str, cutoff: int, nbar: float) -> np.ndarray:
    a = fock.annihilation(cutoff)
    if kind == "a":
        return a
    if kind == "adag_a2":
        return a.conj().T @ a @ a
    if kind == "sol":
        n = np.arange(cutoff, dtype=float)
        return np.diag(1.0 - n / nbar) @ a
    raise KeyError(kind)


def _jump_factor(kind: str, n: np.ndarray, nbar: float) -> np.ndarray:
    """``|<n-1| L |n>|^2`` for the Fock-to-Fock jump operators."""
    if kind == "a":
        return n
    if kind == "adag_a2":
        return n * (n - 1.0) ** 2
    return n * (1.0 - (n - 1.0) / nbar) ** 2


@dataclass
class MEGenerator:
    """Generator acting on a single-mode density matrix.

    ``lindblads`` holds ``(rate, kind)`` pairs with kinds ``"a"``,
    ``"adag_a2"`` and ``"sol"``.
    """

    nbar: float
    h_diag: np.ndarray
    lam: Optional[np.ndarray] = None
    lindblads: List[Tuple[float, str]] = field(default_factory=list)
    omega_terms: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for rate, kind in self.lindblads:
            if rate < 0:
                raise ValueError("Lindblad rates must be nonnegative")
            if kind not in LINDBLAD_KINDS:
                raise KeyError(kind)

    @property
    def cutoff(self) -> int:
        return len(self.h_diag)

    def jump_operators(self) -> List[np.ndarray]:
        return [np.sqrt(r) * lindblad_operator(k, self.cutoff, self.nbar) for r, k in self.lindblads if r > 0]

    def apply(self, rho: np.ndarray) -> np.ndarray:
        h = self.h_diag
        out = -1j * (h[:, None] - h[None, :]) * rho
        if self.lam is not None:
            out = out + fock.lambda_dissipator(self.lam, rho)
        return out + fock.lindblad_dissipator(self.jump_operators(), rho)

    def evolve(self, rho0: np.ndarray, times: Sequence[float], **kw) -> fock.DensityTrajectory:
        return fock.evolve_density_me(self.h_diag, rho0, times, lam=self.lam,
                                      lindblads=self.jump_operators(), **kw)

    def population_evolution(self, p0: np.ndarray, times: Sequence[float]) -> np.ndarray:
        """Photon-number distribution at each time.

        Valid when ``lam`` is absent: the Hamiltonian is diagonal and each
        jump maps ``|n>`` to ``|n-1>``, so populations obey a closed
        birth-death (pure death) rate equation.
        """
        if self.lam is not None:
            raise ValueError("population equation requires a Lindblad-only generator")
        d = len(p0)
        n = np.arange(d, dtype=float)
        r = np.zeros(d)
        for rate, kind in self.lindblads:
            r += rate * _jump_factor(kind, n, self.nbar)
        Q = sp.diags([-r, r[1:]], [0, 1], shape=(d, d), format="csr")
        times = np.asarray(times, dtype=float)
        if len(times) == 1:
            return expm_multiply(Q * times[0], p0)[None, :]
        return expm_multiply(Q, p0, start=times[0], stop=times[-1], num=len(times), endpoint=True)

    def _jump_amplitudes(self, n: np.ndarray) -> List[np.ndarray]:
        return [np.sqrt(rate * _jump_factor(kind, n, self.nbar)) for rate, kind in self.lindblads if rate > 0]

    def mean_amplitude_evolution(self, p0: np.ndarray, times: Sequence[float]) -> np.ndarray:
        """``<a>(t)`` for a coherent input with real amplitude and populations ``p0``.

        With a diagonal Hamiltonian and Fock-lowering jumps the first
        subdiagonal ``c_n = rho[n+1, n]`` evolves as a closed chain,
        ``dc_n/dt = -i(e_{n+1} - e_n) c_n - (|l_{n+1}|^2 + |l_n|^2) c_n / 2
        + l_{n+2} l_{n+1} c_{n+1}``.
        """
        if self.lam is not None:
            raise ValueError("coherence chain requires a Lindblad-only generator")
        d = len(p0)
        n = np.arange(d, dtype=float)
        amps = self._jump_amplitudes(n)
        h = self.h_diag[:d]
        diag = -1j * np.diff(h)
        off = np.zeros(d - 2)
        for l in amps:
            diag = diag - 0.5 * (l[1:] ** 2 + l[:-1] ** 2)
            off = off + l[2:] * l[1:-1]
        Q = sp.diags([diag, off], [0, 1], shape=(d - 1, d - 1), format="csr")
        sq = np.sqrt(p0)
        c0 = (sq[1:] * sq[:-1]).astype(complex)
        weights = np.sqrt(n[1:])
        times = np.asarray(times, dtype=float)
        if len(times) == 1:
            return np.array([weights @ expm_multiply(Q * times[0], c0)])
        C = expm_multiply(Q, c0, start=times[0], stop=times[-1], num=len(times), endpoint=True)
        return C @ weights

    def to_json(self) -> str:
        return json.dumps({
            "nbar": self.nbar,
            "h_diag": [float(x) for x in self.h_diag],
            "lindblads": [{"rate": float(r), "kind": k} for r, k in self.lindblads],
            "omega_terms": {k: float(v) for k, v in self.omega_terms.items()},
            "has_lambda": self.lam is not None,
        }, indent=1)


def full_me_generator(nbar: float, cutoff: int, R: Optional[SpectralResponse] = None,
                      include_omega: bool = True) -> MEGenerator:
    """H_0 with the Lambda dissipator; the two-photon dissipator enters via its Omega term."""
    R = SpectralResponse.hamiltonian_limit() if R is None else R
    h = h0_diag(nbar, cutoff)
    if include_omega:
        n = np.arange(cutoff, dtype=float)
        h = h + OMEGA_NBAR * n * (n - 1.0)
    return MEGenerator(nbar, h, lam=lambda_matrix(nbar, R, cutoff))


def heff_generator(nbar: float, cutoff: int, include_omega: bool = True) -> MEGenerator:
    return MEGenerator(nbar, heff_diag(nbar, cutoff, include_omega))


def tod_generator(nbar: float, beta3: float, cutoff: int, include_omega: bool = True,
                  rates: Optional[Dict[str, float]] = None) -> MEGenerator:
    """H_eff plus the TOD Hamiltonian shifts and the three TOD Lindblad channels."""
    n = np.arange(cutoff, dtype=float)
    h = heff_diag(nbar, cutoff, include_omega)
    if beta3 == 0:
        return MEGenerator(nbar, h, omega_terms={"omega_L": 0.0, "omega_NL": 0.0, "omega_sol": 0.0})
    r = tod_rates(beta3, rates)
    h = h + r["omega_L"] * n + r["omega_NL"] * n * (n - 1) * (n - 2) \
        + r["omega_sol"] * n * (1.0 - (n - 1.0) / nbar) ** 2
    lind = [(r["gamma_L"], "a"), (r["gamma_NL"], "adag_a2"), (r["gamma_sol"], "sol")]
    omegas = {k: r[k] for k in ("omega_L", "omega_NL", "omega_sol")}
    return MEGenerator(nbar, h, lindblads=lind, omega_terms=omegas)


def tod_me_loss(nbar: float, beta3: float, t: float, rates: Optional[Dict[str, float]] = None) -> float:
    """``nbar - <n>(t)`` for a coherent input under the TOD Lindblads."""
    cutoff = coherent_cutoff(nbar)
    gen = tod_generator(nbar, beta3, cutoff, rates=rates)
    p0 = _poisson_weights(nbar, cutoff - 1)
    p0 = p0 / p0.sum()
    p = gen.population_evolution(p0, [t])[-1]
    n = np.arange(cutoff)
    return float(np.dot(n, p0) - np.dot(n, p))


def lambda_to_csv(path, lam: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "m", "re", "im"])
        for (i, j), v in np.ndenumerate(lam):
            if v != 0:
                w.writerow([i, j, repr(float(v.real)), repr(float(v.imag))])
