"""Multimode truncated Fock space blocked by total photon number.

Every Hamiltonian built from the LSM expansion conserves the total photon
number, so states and operators are stored sector by sector. A sector ``N``
holds all occupation tuples summing to ``N`` with every entry below the
per-mode cutoff, enumerated in lexicographic order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.special import gammaln

from .lsm import HamiltonianTerms, Monomial

DENSE_SECTOR_MAX = 512


class CutoffError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class IntegratorError(RuntimeError):
    def __init__(self, msg, error_estimate=None):
        super().__init__(msg)
        self.error_estimate = error_estimate


class TraceDriftError(RuntimeError):
    pass


def _compositions(total: int, parts: int, cap: int):
    """Tuples of ``parts`` integers in ``[0, cap]`` summing to ``total``, lexicographic."""
    if parts == 1:
        if total <= cap:
            yield (total,)
        return
    for first in range(min(total, cap) + 1):
        for rest in _compositions(total - first, parts - 1, cap):
            yield (first,) + rest


class FockBasis:
    """Sector decomposition of the ``num_modes``-mode truncated Fock space.

    Args:
        num_modes (int): number of bosonic modes
        cutoff (int): levels per mode, occupations ``0 .. cutoff - 1``
        max_total (int): largest total photon number kept; defaults to the
            full product space ``num_modes * (cutoff - 1)``
    """

    def __init__(self, num_modes: int, cutoff: int, max_total: Optional[int] = None):
        if num_modes < 1 or cutoff < 1:
            raise ValueError("num_modes and cutoff must be positive")
        self.num_modes = num_modes
        self.cutoff = cutoff
        full = num_modes * (cutoff - 1)
        self.max_total = full if max_total is None else min(max_total, full)
        self.sectors: List[np.ndarray] = []
        self._keys: List[np.ndarray] = []
        self._order: List[np.ndarray] = []
        weights = cutoff ** np.arange(num_modes, dtype=np.int64)
        self._weights = weights
        for n in range(self.max_total + 1):
            occ = np.array(list(_compositions(n, num_modes, cutoff - 1)), dtype=np.int64)
            occ = occ.reshape(-1, num_modes)
            keys = occ @ weights
            order = np.argsort(keys)
            self.sectors.append(occ)
            self._keys.append(keys[order])
            self._order.append(order)

    @property
    def dims(self) -> List[int]:
        return [len(s) for s in self.sectors]

    @property
    def dim(self) -> int:
        return sum(self.dims)

    def index(self, sector: int, occ: np.ndarray) -> np.ndarray:
        """Positions of occupation rows ``occ`` inside ``sector`` (-1 when absent)."""
        keys = np.atleast_2d(occ) @ self._weights
        skeys = self._keys[sector]
        pos = np.searchsorted(skeys, keys)
        pos = np.clip(pos, 0, len(skeys) - 1)
        found = skeys[pos] == keys
        return np.where(found, self._order[sector][pos], -1)

    def locate(self, occ: Sequence[int]):
        occ = np.asarray(occ, dtype=np.int64)
        n = int(occ.sum())
        if n > self.max_total or np.any(occ >= self.cutoff):
            raise DimensionError(f"occupation {tuple(occ)} outside basis")
        return n, int(self.index(n, occ)[0])


@dataclass
class SectorFockState:
    basis: FockBasis
    blocks: List[np.ndarray]

    @classmethod
    def zeros(cls, basis: FockBasis) -> "SectorFockState":
        return cls(basis, [np.zeros(d, dtype=complex) for d in basis.dims])

    @classmethod
    def fock(cls, basis: FockBasis, occ: Sequence[int]) -> "SectorFockState":
        psi = cls.zeros(basis)
        n, i = basis.locate(occ)
        psi.blocks[n][i] = 1.0
        return psi

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(b, b).real for b in self.blocks)))

    def vdot(self, other: "SectorFockState") -> complex:
        return sum(np.vdot(a, b) for a, b in zip(self.blocks, other.blocks))

    def copy(self) -> "SectorFockState":
        return SectorFockState(self.basis, [b.copy() for b in self.blocks])

    def to_dense(self) -> np.ndarray:
        """Coefficients in the full product basis (mode 0 is the most significant digit)."""
        c, m = self.basis.cutoff, self.basis.num_modes
        out = np.zeros(c**m, dtype=complex)
        w = c ** np.arange(m - 1, -1, -1)
        for occ, block in zip(self.basis.sectors, self.blocks):
            out[occ @ w] = block
        return out

    @classmethod
    def from_dense(cls, basis: FockBasis, vec: np.ndarray) -> "SectorFockState":
        c, m = basis.cutoff, basis.num_modes
        w = c ** np.arange(m - 1, -1, -1)
        return cls(basis, [np.asarray(vec)[occ @ w].astype(complex) for occ in basis.sectors])


@dataclass
class SectorOperator:
    basis: FockBasis
    blocks: List[sp.csr_matrix]
    hermitian: bool = False

    def apply(self, psi: SectorFockState) -> SectorFockState:
        return SectorFockState(self.basis, [h @ b for h, b in zip(self.blocks, psi.blocks)])

    def expectation(self, psi: SectorFockState) -> complex:
        return sum(np.vdot(b, h @ b) for h, b in zip(self.blocks, psi.blocks))

    def to_dense(self) -> np.ndarray:
        c, m = self.basis.cutoff, self.basis.num_modes
        out = np.zeros((c**m, c**m), dtype=complex)
        w = c ** np.arange(m - 1, -1, -1)
        for occ, h in zip(self.basis.sectors, self.blocks):
            idx = occ @ w
            out[np.ix_(idx, idx)] = h.toarray()
        return out


def coherent_state(nbar: float, basis: FockBasis, mode: int = 0, tail_tol: float = 1e-6) -> SectorFockState:
    """Coherent state of real amplitude ``sqrt(nbar)`` in ``mode``, vacuum elsewhere.

    Truncated at the basis limit and renormalized; raises `CutoffError` when
    the discarded Poisson tail exceeds ``tail_tol``.
    """
    psi = SectorFockState.zeros(basis)
    nmax = min(basis.cutoff - 1, basis.max_total)
    n = np.arange(nmax + 1)
    if nbar == 0:
        amps = (n == 0).astype(float)
    else:
        amps = np.exp(0.5 * (n * np.log(nbar) - nbar - gammaln(n + 1)))
    tail = 1.0 - np.sum(amps**2)
    if tail > tail_tol:
        raise CutoffError(f"truncated coherent tail mass {tail:.2e} exceeds {tail_tol:.1e}")
    amps = amps / np.linalg.norm(amps)
    for k, a in enumerate(amps):
        occ = np.zeros(basis.num_modes, dtype=np.int64)
        occ[mode] = k
        sec, i = basis.locate(occ)
        psi.blocks[sec][i] = a
    return psi


def _monomial_action(basis: FockBasis, sector: int, key: Monomial):
    """Rows, columns and amplitudes of one normal-ordered monomial in a sector."""
    cre, ann = key
    occ = basis.sectors[sector].astype(float)
    amp = np.ones(len(occ))
    valid = np.ones(len(occ), dtype=bool)
    for a in ann:
        amp *= np.sqrt(np.clip(occ[:, a], 0, None))
        valid &= occ[:, a] > 0
        occ[:, a] -= 1
    for c in cre:
        occ[:, c] += 1
        amp *= np.sqrt(np.clip(occ[:, c], 0, None))
    valid &= np.all(occ < basis.cutoff, axis=1)
    target = sector + len(cre) - len(ann)
    if target < 0 or target > basis.max_total or not np.any(valid):
        return None
    cols = np.nonzero(valid)[0]
    rows = basis.index(target, occ[valid].astype(np.int64))
    keep = rows >= 0
    return rows[keep], cols[keep], amp[valid][keep]


def build_operator(monomials: Dict[Monomial, complex], basis: FockBasis, hermitian: bool = False) -> SectorOperator:
    """Assemble a number-conserving monomial sum as a sector-diagonal operator."""
    for key in monomials:
        if len(key[0]) != len(key[1]):
            raise ValueError(f"monomial {key} changes the photon number")
        if any(i >= basis.num_modes or i < 0 for i in key[0] + key[1]):
            raise DimensionError(f"monomial {key} touches modes outside a {basis.num_modes}-mode basis")
    blocks = []
    for n, dim in enumerate(basis.dims):
        rows, cols, data = [], [], []
        for key, c in monomials.items():
            hit = _monomial_action(basis, n, key)
            if hit is None:
                continue
            r, k, a = hit
            rows.append(r)
            cols.append(k)
            data.append(c * a)
        if rows:
            m = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(dim, dim)).tocsr()
        else:
            m = sp.csr_matrix((dim, dim), dtype=complex)
        m.sum_duplicates()
        blocks.append(m.astype(complex))
    return SectorOperator(basis, blocks, hermitian)


def build_hamiltonian(terms: HamiltonianTerms, basis: FockBasis) -> SectorOperator:
    """Sector-blocked matrix of the toggled Hamiltonian groups."""
    if terms.num_modes > basis.num_modes:
        raise DimensionError(f"terms use {terms.num_modes} modes, basis has {basis.num_modes}")
    return build_operator(terms.monomials(), basis, hermitian=True)


def number_operator(basis: FockBasis, mode: Optional[int] = None) -> SectorOperator:
    modes = range(basis.num_modes) if mode is None else [mode]
    return build_operator({((m,), (m,)): 1.0 for m in modes}, basis, hermitian=True)


def expm_krylov(H, v: np.ndarray, t: float, m: int = 30, tol: float = 1e-12) -> np.ndarray:
    """``exp(-i H t) v`` for Hermitian sparse ``H`` by restarted Lanczos steps.

    Sub-step lengths adapt to keep the a-posteriori Krylov error estimate
    below ``tol * |tau / t|`` per step.
    """
    w = np.asarray(v, dtype=complex).copy()
    if t == 0 or not np.any(w):
        return w
    n = len(w)
    m = min(m, n)
    done = 0.0
    tau = t
    total_err = 0.0
    while abs(done) < abs(t) * (1 - 1e-15):
        beta = np.linalg.norm(w)
        V = np.zeros((m + 1, n), dtype=complex)
        alpha = np.zeros(m)
        offdiag = np.zeros(m)
        V[0] = w / beta
        k_used = m
        h_next = 0.0
        for j in range(m):
            x = H @ V[j]
            alpha[j] = np.vdot(V[j], x).real
            x = x - alpha[j] * V[j] - (offdiag[j - 1] * V[j - 1] if j else 0)
            x = x - V[: j + 1].T @ (V[: j + 1].conj() @ x)
            b = np.linalg.norm(x)
            if b < 1e-14 * max(1.0, abs(alpha[j])):
                k_used = j + 1
                h_next = 0.0
                break
            if j + 1 < m:
                offdiag[j] = b
            else:
                h_next = b
            V[j + 1] = x / b
        T = np.diag(alpha[:k_used]) + np.diag(offdiag[: k_used - 1], 1) + np.diag(offdiag[: k_used - 1], -1)
        evals, evecs = np.linalg.eigh(T)
        tau = min(abs(tau), abs(t) - abs(done)) * np.sign(t)
        for _ in range(60):
            small = evecs @ (np.exp(-1j * evals * tau) * evecs[0].conj())
            err = beta * abs(h_next * small[-1])
            if err <= tol * abs(tau / t) or h_next == 0.0:
                break
            tau *= 0.5
        else:
            raise IntegratorError("Krylov step size underflow", err)
        total_err += err
        w = beta * (V[:k_used].T @ small)
        done += tau
        tau *= 1.5
    if total_err > 1e3 * tol:
        raise IntegratorError(f"Krylov error estimate {total_err:.2e} above tolerance", total_err)
    return w


def evolve_state(H: SectorOperator, psi0: SectorFockState, times: Sequence[float],
                 krylov_tol: float = 1e-12) -> List[SectorFockState]:
    """Schrodinger evolution ``exp(-i H t) psi0`` at each requested time.

    Small sectors are propagated through a dense eigendecomposition, larger
    ones by Krylov steps between consecutive times (``times`` must then be
    nondecreasing).
    """
    times = np.asarray(times, dtype=float)
    out = [SectorFockState.zeros(psi0.basis) for _ in times]
    for n, (h, b) in enumerate(zip(H.blocks, psi0.blocks)):
        if not np.any(b):
            continue
        if h.shape[0] <= DENSE_SECTOR_MAX:
            evals, evecs = la.eigh(h.toarray())
            coeff = evecs.conj().T @ b
            for i, t in enumerate(times):
                out[i].blocks[n] = evecs @ (np.exp(-1j * evals * t) * coeff)
        else:
            if np.any(np.diff(times) < 0):
                raise ValueError("times must be nondecreasing for Krylov propagation")
            w, t_prev = b.astype(complex), 0.0
            for i, t in enumerate(times):
                w = expm_krylov(h, w, t - t_prev, tol=krylov_tol)
                t_prev = t
                out[i].blocks[n] = w
    for i, psi in enumerate(out):
        drift = abs(psi.norm() - psi0.norm())
        if drift > 1e-8:
            raise IntegratorError(f"norm drift {drift:.2e} at t = {times[i]}", drift)
    return out


def reduced_density(psi: SectorFockState, mode: int = 0) -> np.ndarray:
    """Partial trace over every mode except ``mode``."""
    basis = psi.basis
    occ = np.concatenate(basis.sectors)
    coeff = np.concatenate(psi.blocks)
    rest = np.delete(occ, mode, axis=1)
    _, inv = np.unique(rest, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    X = np.zeros((inv.max() + 1, basis.cutoff), dtype=complex)
    X[inv, occ[:, mode]] = coeff
    rho = X.T @ X.conj()
    return rho


def annihilation(cutoff: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, cutoff)), 1).astype(complex)


def lambda_dissipator(lam: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``sum_nm lam[n, m] [s_n rho, s_m^+] + h.c.`` with ``s_n = |n-1><n|``."""
    x = np.zeros_like(rho)
    x[:-1, :-1] = (lam * rho)[1:, 1:]
    x -= np.diag(lam)[:, None] * rho
    return x + x.conj().T


def lindblad_dissipator(ops: Sequence[np.ndarray], rho: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rho)
    for L in ops:
        LdL = L.conj().T @ L
        out += L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL)
    return out


@dataclass
class DensityTrajectory:
    times: np.ndarray
    densities: List[np.ndarray]
    trace_drift: float
    min_eigenvalue: float


def evolve_density_me(h, rho0: np.ndarray, times: Sequence[float], lam: Optional[np.ndarray] = None,
                      lindblads: Sequence[np.ndarray] = (), rtol: float = 1e-10, atol: float = 1e-12,
                      trace_tol: float = 1e-7) -> DensityTrajectory:
    """Single-mode master equation with adaptive-step DOP853 integration.

    ``h`` is a diagonal (1-d array) or full Hamiltonian matrix, ``lam`` the
    one-photon transition matrix of the non-Lindblad dissipator and
    ``lindblads`` a list of jump operators with rates already absorbed.
    Negative eigenvalues of rho are reported, not clipped.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    d = rho0.shape[0]
    h = np.asarray(h)
    diagonal = h.ndim == 1
    ops = [np.asarray(L, dtype=complex) for L in lindblads]

    def rhs(_, y):
        rho = y.view(complex).reshape(d, d)
        if diagonal:
            out = -1j * (h[:, None] - h[None, :]) * rho
        else:
            out = -1j * (h @ rho - rho @ h)
        if lam is not None:
            out += lambda_dissipator(lam, rho)
        if ops:
            out += lindblad_dissipator(ops, rho)
        return out.ravel().view(float)

    times = np.asarray(times, dtype=float)
    sol = solve_ivp(rhs, (0.0, float(times[-1]) if len(times) else 0.0), rho0.ravel().view(float).copy(),
                    method="DOP853", t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise IntegratorError(f"master equation integration failed: {sol.message}")
    dens = [sol.y[:, i].copy().view(complex).reshape(d, d) for i in range(len(times))]
    tr0 = np.trace(rho0).real
    drift = max((abs(np.trace(r) - tr0) for r in dens), default=0.0)
    if drift > trace_tol:
        raise TraceDriftError(f"trace drift {drift:.2e} exceeds {trace_tol:.1e}")
    min_eig = min((np.linalg.eigvalsh(0.5 * (r + r.conj().T)).min() for r in dens), default=0.0)
    return DensityTrajectory(times, dens, float(drift), float(min_eig))


def wigner(rho: np.ndarray, xvec: np.ndarray, pvec: np.ndarray, mass_tol: float = 1e-3) -> np.ndarray:
    """Wigner function ``W[i, j] = W(x_i, p_j)`` of a single-mode density matrix.

    Evaluates ``(1/pi) Tr[rho D(alpha) P D(alpha)^+]`` with ``alpha = (x + ip)/sqrt(2)``
    through the closed-form Fock matrix elements of the displaced parity,
    generated by the associated-Laguerre recurrence. Vacuum quadrature
    variance is 1/2.
    """
    rho = np.asarray(rho, dtype=complex)
    d = rho.shape[0]
    if d > 1 and rho[-1, -1].real > mass_tol:
        raise CutoffError(f"population {rho[-1, -1].real:.2e} in the top Fock level; increase the cutoff")
    X, P = np.meshgrid(np.asarray(xvec, float), np.asarray(pvec, float), indexing="ij")
    A2 = np.sqrt(2.0) * (X + 1j * P)  # 2 * alpha
    B = np.abs(A2) ** 2
    # Wlist[n] holds the (m, n) element while sweeping m upward.
    wl = [np.exp(-0.5 * B) / np.pi]
    for n in range(1, d):
        wl.append(A2 * wl[n - 1] / np.sqrt(n))
    W = np.real(rho[0, 0] * wl[0])
    for n in range(1, d):
        W += 2 * np.real(rho[0, n] * wl[n])
    for m in range(1, d):
        temp = wl[m]
        wl[m] = (np.conj(A2) * temp - np.sqrt(m) * wl[m - 1]) / np.sqrt(m)
        W += np.real(rho[m, m] * wl[m])
        for n in range(m + 1, d):
            temp2 = (A2 * wl[n - 1] - np.sqrt(m) * temp) / np.sqrt(n)
            temp = wl[n]
            wl[n] = temp2
            W += 2 * np.real(rho[m, n] * wl[n])
    return W


def wigner_to_csv(path, xvec, pvec, W) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "p", "W"])
        for i, x in enumerate(xvec):
            for j, p in enumerate(pvec):
                w.writerow([repr(float(x)), repr(float(p)), repr(float(W[i, j]))])


def mode_density(state, mode: int = 0) -> np.ndarray:
    if isinstance(state, SectorFockState):
        return reduced_density(state, mode)
    return np.asarray(state)


def observables(trajectory: Sequence, times: Sequence[float], nbar: float, mode: int = 0) -> Dict[str, np.ndarray]:
    """Soliton-mode time series in the frame rotating with the classical phase.

    Returns ``a0`` (``<a0> exp(-i nbar^2 t / 8)``), ``n0``, ``purity0`` and
    ``dP`` with ``dP[i, n] = P_n(t_i) - P_n(0)``.
    """
    times = np.asarray(times, dtype=float)
    a0, n0, purity, pops = [], [], [], []
    for state in trajectory:
        rho = mode_density(state, mode)
        d = rho.shape[0]
        k = np.arange(d)
        a0.append(np.sum(np.sqrt(k[1:]) * np.diag(rho, -1)))
        p = np.real(np.diag(rho))
        n0.append(np.dot(k, p))
        purity.append(np.real(np.vdot(rho, rho)))
        pops.append(p)
    pops = np.array(pops)
    return {
        "t": times,
        "a0": np.array(a0) * np.exp(-1j * nbar**2 * times / 8.0),
        "n0": np.array(n0),
        "purity0": np.array(purity),
        "dP": pops - pops[0],
        "P": pops,
    }


def series_to_csv(path, obs: Dict[str, np.ndarray], T0: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "t_over_T0", "re_a0", "im_a0", "n0", "purity0"])
        for i, t in enumerate(obs["t"]):
            a = obs["a0"][i]
            w.writerow([repr(float(t)), repr(float(t / T0)), repr(float(a.real)), repr(float(a.imag)),
                        repr(float(obs["n0"][i])), repr(float(obs["purity0"][i]))])


def histogram_to_csv(path, obs: Dict[str, np.ndarray], index: int = -1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "P_t", "P_0"])
        for n, (pt, p0) in enumerate(zip(obs["P"][index], obs["P"][0])):
            w.writerow([n, repr(float(pt)), repr(float(p0))])


def warn_if_truncated(rho: np.ndarray, tol: float = 1e-6) -> float:
    tail = float(np.real(rho[-1, -1]))
    if tail > tol:
        warnings.warn(f"top Fock level population {tail:.2e}", RuntimeWarning)
    return tail
