"""Lanczos supermodes (LSMs) and the coupling tensors of the field Hamiltonian.

The field is expanded as ``phi(z) = sum_n u_n(z) a_n`` where ``u_0`` is the
classical soliton and the remaining modes are obtained by Lanczos iteration of
the momentum operator ``A = -i d/dz`` seeded with ``u_0``. In this basis

    H = sum_nm D[n, m] a_n^+ a_m - sum_nmkl C[n, m, k, l] a_n^+ a_m^+ a_k a_l

A monomial is stored as ``(creators, annihilators)``, two sorted index tuples
describing the normal-ordered product ``prod a_c^+ prod a_a``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .core import SpatialGrid, soliton_mode

Monomial = Tuple[Tuple[int, ...], Tuple[int, ...]]

GROUPS = ("H_S", "H_R", "V1", "V2", "V_others")


class BasisExhaustedError(RuntimeError):
    """Lanczos breakdown: the Krylov space has smaller dimension than requested."""

    def __init__(self, rank: int, requested: int, beta: float):
        super().__init__(f"Lanczos breakdown after {rank} of {requested} modes (beta = {beta:.3e})")
        self.rank = rank


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupermodeBasis:
    modes: np.ndarray  # (n_lsm, Nz), rows u_n(z_i)
    grid: SpatialGrid
    nbar: float
    lanczos_alphas: np.ndarray
    lanczos_betas: np.ndarray  # betas[n] couples u_n and u_{n+1}

    @property
    def n_lsm(self) -> int:
        return self.modes.shape[0]

    def gram(self) -> np.ndarray:
        return self.modes.conj() @ self.modes.T * self.grid.dz

    def fourier(self, k: np.ndarray) -> np.ndarray:
        """Mode spectra ``(2 pi)^-1/2 int dz exp(-ikz) u_n(z)``, shape (n_lsm, len(k))."""
        phase = np.exp(-1j * np.outer(self.grid.z, np.atleast_1d(k)))
        return self.modes @ phase * self.grid.dz / np.sqrt(2 * np.pi)

    def to_csv(self, path) -> None:
        """One row per grid point: z, then Re/Im of every mode."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["z"]
            for n in range(self.n_lsm):
                header += [f"re_u{n}", f"im_u{n}"]
            w.writerow(header)
            for i, z in enumerate(self.grid.z):
                row = [repr(float(z))]
                for n in range(self.n_lsm):
                    row += [repr(float(self.modes[n, i].real)), repr(float(self.modes[n, i].imag))]
                w.writerow(row)


def momentum_operator(grid: SpatialGrid, band_limit: Optional[float] = None):
    """Spectral ``-i d/dz``, optionally restricted to ``|k| <= band_limit``.

    The restriction keeps the operator Hermitian while stopping Krylov powers
    from amplifying round-off near the Nyquist wavenumber.
    """
    k = grid.k
    if band_limit is not None:
        k = np.where(np.abs(k) <= band_limit, k, 0.0)

    def apply(v):
        return np.fft.ifft(k * np.fft.fft(v))

    return apply


def soliton_band_limit(nbar: float, x_cut: float = 40.0) -> float:
    """Wavenumber where the soliton spectrum ``sech(pi k / nbar)`` has fallen to ~e^-x_cut."""
    return x_cut * nbar / np.pi


def build_supermodes(u0: np.ndarray, grid: SpatialGrid, n_lsm: int,
                     nbar: Optional[float] = None, band_limit: Optional[float] = None,
                     breakdown_tol: float = 1e-12) -> SupermodeBasis:
    """Orthonormal Krylov basis of ``A = -i d/dz`` seeded with ``u0``.

    Uses the three-term Lanczos recurrence with full reorthogonalization at
    every step. The recurrence fixes each ``beta_n`` real and positive, which
    makes even modes real and odd modes imaginary for an even real seed.
    """
    if n_lsm < 1 or n_lsm > grid.num_points:
        raise ValueError(f"n_lsm must be in [1, {grid.num_points}], got {n_lsm}")
    u0 = np.asarray(u0, dtype=complex)
    if band_limit is not None:
        mask = np.abs(grid.k) <= band_limit
        u0 = np.fft.ifft(np.fft.fft(u0) * mask)
    norm = np.sqrt(grid.inner(u0, u0).real)
    if abs(norm - 1.0) > 1e-8:
        raise ValueError(f"seed mode is not normalized (norm = {norm:.12f})")
    if nbar is None:
        nbar = float(np.max(np.abs(u0)) ** 2 * 4.0)

    dz = grid.dz
    modes = np.zeros((n_lsm, grid.num_points), dtype=complex)
    modes[0] = u0
    alphas = np.zeros(n_lsm)
    betas = np.zeros(n_lsm)  # betas[n] = <u_{n+1}, A u_n>; last entry is the residual norm

    apply_a = momentum_operator(grid, band_limit)

    for n in range(n_lsm):
        w = apply_a(modes[n])
        alphas[n] = grid.inner(modes[n], w).real
        w = w - alphas[n] * modes[n]
        if n > 0:
            w = w - betas[n - 1] * modes[n - 1]
        basis = modes[: n + 1]
        for _ in range(2):
            w = w - basis.T @ (basis.conj() @ w * dz)
        beta = np.sqrt(grid.inner(w, w).real)
        betas[n] = beta
        if n + 1 == n_lsm:
            break
        if beta < breakdown_tol:
            raise BasisExhaustedError(n + 1, n_lsm, beta)
        modes[n + 1] = w / beta
    return SupermodeBasis(modes, grid, float(nbar), alphas, betas)


def soliton_supermodes(nbar: float, n_lsm: int, grid: Optional[SpatialGrid] = None) -> SupermodeBasis:
    """Convenience wrapper: LSM basis for the fundamental soliton of ``nbar`` photons."""
    grid = grid or SpatialGrid.default(nbar)
    return build_supermodes(soliton_mode(nbar, grid), grid, n_lsm, nbar=nbar,
                            band_limit=soliton_band_limit(nbar))


def _parity_mask(shape) -> np.ndarray:
    idx = np.indices(shape).sum(axis=0)
    return (idx % 2) == 0


@dataclass(frozen=True)
class CouplingTensors:
    D: np.ndarray
    C: np.ndarray

    @property
    def n_lsm(self) -> int:
        return self.D.shape[0]

    def to_json(self, path=None, tol: float = 0.0):
        """Serialize with explicit index tuples; entries with ``|x| <= tol`` are skipped."""
        n = self.n_lsm
        data = {
            "n_lsm": n,
            "D": [[i, j, float(self.D[i, j].real), float(self.D[i, j].imag)]
                  for i in range(n) for j in range(n) if abs(self.D[i, j]) > tol],
            "C": [[i, j, k, l, float(self.C[i, j, k, l].real), float(self.C[i, j, k, l].imag)]
                  for i in range(n) for j in range(n) for k in range(n) for l in range(n)
                  if abs(self.C[i, j, k, l]) > tol],
        }
        if path is not None:
            with open(path, "w") as fh:
                json.dump(data, fh, indent=1)
        return data

    @classmethod
    def from_json(cls, data) -> "CouplingTensors":
        n = data["n_lsm"]
        D = np.zeros((n, n), dtype=complex)
        C = np.zeros((n,) * 4, dtype=complex)
        for i, j, re, im in data["D"]:
            D[i, j] = re + 1j * im
        for i, j, k, l, re, im in data["C"]:
            C[i, j, k, l] = re + 1j * im
        return cls(D, C)


def dispersion_matrix(basis: SupermodeBasis) -> np.ndarray:
    """``D[n, m] = -1/2 int u_n^* u_m''`` by spectral differentiation."""
    U = basis.modes
    d2 = basis.grid.derivative(U, 2, axis=1)
    D = -0.5 * (U.conj() @ d2.T) * basis.grid.dz
    D = 0.5 * (D + D.conj().T)
    D[~_parity_mask(D.shape)] = 0.0
    return D


def nonlinear_tensor(basis: SupermodeBasis) -> np.ndarray:
    """``C[n, m, k, l] = 1/2 int u_n^* u_m^* u_k u_l``."""
    U = basis.modes
    n = U.shape[0]
    pairs = (U[:, None, :] * U[None, :, :]).reshape(n * n, -1)
    P = 0.5 * basis.grid.dz * (pairs.conj() @ pairs.T)
    C = P.reshape(n, n, n, n)
    # Pair symmetrization first, then the Hermitian swap, keeps all three symmetries bit-exact.
    C = 0.5 * (C + C.transpose(1, 0, 2, 3))
    C = 0.5 * (C + C.transpose(0, 1, 3, 2))
    C = 0.5 * (C + C.transpose(2, 3, 0, 1).conj())
    C[~_parity_mask(C.shape)] = 0.0
    return C


def coupling_tensors(basis: SupermodeBasis) -> CouplingTensors:
    return CouplingTensors(dispersion_matrix(basis), nonlinear_tensor(basis))


def full_monomials(tensors: CouplingTensors) -> Dict[Monomial, complex]:
    """Normal-ordered monomial expansion of the LSM Hamiltonian."""
    out: Dict[Monomial, complex] = {}
    D, C = tensors.D, tensors.C
    n = tensors.n_lsm
    for i in range(n):
        for j in range(n):
            if D[i, j] != 0:
                key = ((i,), (j,))
                out[key] = out.get(key, 0) + D[i, j]
    for i, j, k, l in zip(*np.nonzero(C)):
        key = (tuple(sorted((int(i), int(j)))), tuple(sorted((int(k), int(l)))))
        out[key] = out.get(key, 0) - C[i, j, k, l]
    return out


def _add(target, key, value):
    target[key] = target.get(key, 0) + value


@dataclass(frozen=True)
class HamiltonianTerms:
    """Labeled partition of the Hamiltonian into monomial groups.

    ``groups[name]`` maps monomial -> coefficient; ``toggles[name]`` selects
    whether the group contributes to ``monomials()``.
    """

    num_modes: int
    nbar: float
    groups: Dict[str, Dict[Monomial, complex]]
    toggles: Dict[str, bool] = field(default_factory=lambda: {g: True for g in GROUPS})

    def with_toggles(self, **flags: bool) -> "HamiltonianTerms":
        unknown = set(flags) - set(self.groups)
        if unknown:
            raise KeyError(f"unknown groups {sorted(unknown)}")
        return replace(self, toggles={**self.toggles, **flags})

    def monomials(self) -> Dict[Monomial, complex]:
        out: Dict[Monomial, complex] = {}
        for name, terms in self.groups.items():
            if self.toggles.get(name, True):
                for key, c in terms.items():
                    _add(out, key, c)
        return out

    def items(self, name: str):
        return list(self.groups[name].items())


def assemble_terms(tensors: CouplingTensors, nbar: float, check_tol: float = 1e-9) -> HamiltonianTerms:
    """Split the LSM Hamiltonian into system, reservoir and coupling groups.

    ``V1`` uses the reduced closed form ``D02 (1 - n0/nbar) a2^+ a0 + h.c.``;
    whatever the closed form leaves out of the full expansion lands in
    ``V_others`` so the groups always sum to the full Hamiltonian.
    """
    if abs(tensors.D[0, 0] - nbar**2 / 24) > 1e-4 * nbar**2:
        raise ValueError("tensors do not belong to a soliton basis with this nbar")
    full = full_monomials(tensors)

    def indices(key):
        return key[0] + key[1]

    h_s = {k: v for k, v in full.items() if all(i == 0 for i in indices(k))}
    h_r = {k: v for k, v in full.items() if all(i >= 1 for i in indices(k))}
    v2 = {k: v for k, v in full.items()
          if len(k[0]) == 2 and ((k[1] == (0, 0) and min(k[0]) >= 1)
                                 or (k[0] == (0, 0) and min(k[1]) >= 1))}
    v1: Dict[Monomial, complex] = {}
    if tensors.n_lsm >= 3:
        d02 = tensors.D[0, 2]
        d20 = np.conj(d02)
        _add(v1, ((2,), (0,)), d20)
        _add(v1, ((0, 2), (0, 0)), -d20 / nbar)
        _add(v1, ((0,), (2,)), d02)
        _add(v1, ((0, 0), (0, 2)), -d02 / nbar)

    others = dict(full)
    for grp in (h_s, h_r, v1, v2):
        for k, v in grp.items():
            _add(others, k, -v)
    others = {k: v for k, v in others.items() if v != 0}

    groups = {"H_S": h_s, "H_R": h_r, "V1": v1, "V2": v2, "V_others": others}
    terms = HamiltonianTerms(tensors.n_lsm, float(nbar), groups)

    recombined = terms.monomials()
    scale = max(abs(v) for v in full.values())
    for key in set(full) | set(recombined):
        if abs(full.get(key, 0) - recombined.get(key, 0)) > check_tol * scale:
            raise AssemblyError(f"group partition does not reproduce monomial {key}")
    for key, c in terms.monomials().items():
        if len(key[0]) != len(key[1]):
            raise AssemblyError(f"monomial {key} does not conserve photon number")
    return terms


def kerr_terms(nbar: float) -> HamiltonianTerms:
    """Single-mode soliton Hamiltonian ``nbar^2/24 n - nbar/12 a^+2 a^2`` with exact coefficients."""
    h_s = {((0,), (0,)): nbar**2 / 24.0 + 0j, ((0, 0), (0, 0)): -nbar / 12.0 + 0j}
    groups = {"H_S": h_s, "H_R": {}, "V1": {}, "V2": {}, "V_others": {}}
    return HamiltonianTerms(1, float(nbar), groups)


def quadratic_quartic_tensors(monomials: Dict[Monomial, complex], num_modes: int):
    """Recover ``(D, C)`` in the symmetric convention from a monomial dict.

    Only photon-number-conserving monomials of degree 2 and 4 are accepted.
    """
    D = np.zeros((num_modes, num_modes), dtype=complex)
    C = np.zeros((num_modes,) * 4, dtype=complex)
    for (cre, ann), c in monomials.items():
        if len(cre) == 1 and len(ann) == 1:
            D[cre[0], ann[0]] += c
        elif len(cre) == 2 and len(ann) == 2:
            cre_orders = {cre, cre[::-1]}
            ann_orders = {ann, ann[::-1]}
            w = -c / (len(cre_orders) * len(ann_orders))
            for p in cre_orders:
                for q in ann_orders:
                    C[p + q] += w
        else:
            raise ValueError(f"unsupported monomial {(cre, ann)}")
    return D, C


def iter_groups(terms: HamiltonianTerms) -> Iterable[Tuple[str, Monomial, complex]]:
    for name in GROUPS:
        for key, c in terms.groups.get(name, {}).items():
            yield name, key, c
