"""Batch runner: ``solitonq {run,sweep,validate,describe-methods}``."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import poisson

from . import __version__, core, fock, gaussian, lsm, me

METHODS = ("fock-lsm", "me-full", "me-heff", "gaussian-lsm", "gssf")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TOLERANCE = 3

# Largest Poisson mass the truncated coherent input may discard.
COHERENT_TAIL_TOL = 1e-3

NUMERICAL_ERRORS = (fock.CutoffError, fock.IntegratorError, fock.TraceDriftError,
                    gaussian.PhysicalityError, lsm.BasisExhaustedError, lsm.AssemblyError,
                    me.RootError, me.InterpolationRangeError, core.GridTooNarrowError)


class ConfigError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


@dataclass
class GridConfig:
    L_scaled: float = 80.0
    Nz: int = 2048


@dataclass
class Toggles:
    v1: bool = True
    v2: bool = True
    v_others: bool = True
    omega_nbar: bool = True


@dataclass
class WindowConfig:
    k0_auto: bool = True
    k0_scaled: Optional[float] = None
    delta_k_scaled: float = 1.0


@dataclass
class Outputs:
    series: bool = True
    wigner: bool = False
    spectrum: bool = False
    histogram: bool = False


@dataclass
class ExperimentConfig:
    nbar: float
    method: str
    n_lsm: Optional[int] = None
    per_mode_cutoff: Optional[int] = None
    t_max_in_T0: float = 1.0
    dt_in_T0: float = 0.05
    step_in_T0: Optional[float] = None
    grid: Optional[GridConfig] = None
    beta3: float = 0.0
    toggles: Toggles = field(default_factory=Toggles)
    window: WindowConfig = field(default_factory=WindowConfig)
    outputs: Outputs = field(default_factory=Outputs)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_SUBCONFIGS = {"grid": GridConfig, "toggles": Toggles, "window": WindowConfig, "outputs": Outputs}
_REQUIRED = {
    "fock-lsm": ("n_lsm", "per_mode_cutoff"),
    "me-full": ("per_mode_cutoff",),
    "me-heff": (),
    "gaussian-lsm": ("n_lsm",),
    "gssf": ("grid",),
}


def _check_type(name, value, kind):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(name, f"expected {kind.__name__}, got {type(value).__name__}")


_TYPES = {
    "nbar": float, "method": str, "n_lsm": int, "per_mode_cutoff": int, "t_max_in_T0": float,
    "dt_in_T0": float, "step_in_T0": float, "beta3": float,
    "L_scaled": float, "Nz": int, "v1": bool, "v2": bool, "v_others": bool, "omega_nbar": bool,
    "k0_auto": bool, "k0_scaled": float, "delta_k_scaled": float,
    "series": bool, "wigner": bool, "spectrum": bool, "histogram": bool,
}


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")
    kwargs = {}
    for key, value in data.items():
        name = prefix + key
        if key in _SUBCONFIGS and cls is ExperimentConfig:
            kwargs[key] = _build(_SUBCONFIGS[key], value, name + ".")
            continue
        if value is not None:
            _check_type(name, value, _TYPES[key])
        kwargs[key] = float(value) if _TYPES[key] is float and value is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        missing = [f.name for f in fields(cls) if f.name not in kwargs]
        raise ConfigError(prefix + (missing[0] if missing else "config"), "missing required field") from exc


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Build and statically validate a config; raises `ConfigError`."""
    cfg = _build(ExperimentConfig, data)
    if cfg.method not in METHODS:
        raise ConfigError("method", f"must be one of {', '.join(METHODS)}")
    if not cfg.nbar > 0:
        raise ConfigError("nbar", "must be positive")
    for name in _REQUIRED[cfg.method]:
        if getattr(cfg, name) is None:
            raise ConfigError(name, f"required for method {cfg.method}")
    if cfg.n_lsm is not None and cfg.n_lsm < 1:
        raise ConfigError("n_lsm", "must be at least 1")
    if cfg.per_mode_cutoff is not None and cfg.per_mode_cutoff < 2:
        raise ConfigError("per_mode_cutoff", "must be at least 2")
    if not cfg.t_max_in_T0 >= 0:
        raise ConfigError("t_max_in_T0", "must be nonnegative")
    if not cfg.dt_in_T0 > 0:
        raise ConfigError("dt_in_T0", "must be positive")
    if cfg.step_in_T0 is not None and not cfg.step_in_T0 > 0:
        raise ConfigError("step_in_T0", "must be positive")
    if cfg.grid is not None:
        n = cfg.grid.Nz
        if n < 2 or n & (n - 1):
            raise ConfigError("grid.Nz", "must be a power of two")
        if not cfg.grid.L_scaled > 0:
            raise ConfigError("grid.L_scaled", "must be positive")
    if not cfg.window.delta_k_scaled > 0:
        raise ConfigError("window.delta_k_scaled", "must be positive")
    if not cfg.window.k0_auto and cfg.window.k0_scaled is None:
        raise ConfigError("window.k0_scaled", "required when k0_auto is false")
    if cfg.beta3 != 0 and not abs(cfg.beta3) < 1:
        raise ConfigError("beta3", "|beta3| must lie in (0, 1)")
    if cfg.method == "me-full" and cfg.per_mode_cutoff <= cfg.nbar + 1:
        raise ConfigError("per_mode_cutoff", "must exceed nbar + 1 for the Lambda dissipator")
    return cfg


def validate_config(data: Dict[str, Any]) -> List[Dict[str, str]]:
    """Static checks only. Returns issues with levels error, warning or note."""
    try:
        cfg = parse_config(data)
    except ConfigError as exc:
        return [{"level": "error", "field": exc.field, "message": exc.reason}]
    issues = []
    if cfg.per_mode_cutoff is not None and cfg.per_mode_cutoff < cfg.nbar:
        issues.append({"level": "warning", "field": "per_mode_cutoff",
                       "message": "truncation below mean photon number"})
    if cfg.method == "fock-lsm" and cfg.n_lsm == 1:
        issues.append({"level": "note", "field": "n_lsm",
                       "message": "evolution reduces to the single-mode H_0"})
    if cfg.method == "me-heff" and cfg.nbar < 25:
        issues.append({"level": "warning", "field": "nbar",
                       "message": "H_fluc is a large-nbar reduction"})
    if cfg.method in ("gssf", "me-heff", "me-full") and not (cfg.toggles.v1 and cfg.toggles.v2 and cfg.toggles.v_others):
        issues.append({"level": "note", "field": "toggles",
                       "message": f"LSM group toggles have no effect for {cfg.method}"})
    if cfg.outputs.wigner and cfg.method in ("gaussian-lsm", "gssf", "me-heff"):
        issues.append({"level": "note", "field": "outputs.wigner",
                       "message": f"no density matrix is produced by {cfg.method}"})
    return issues


METHOD_TABLE = [
    ("fock-lsm", "multimode truncated Fock, sector-blocked unitary", "n_lsm, per_mode_cutoff",
     "series, wigner, histogram"),
    ("me-full", "single-mode master equation with Lambda dissipator", "per_mode_cutoff",
     "series, wigner, histogram"),
    ("me-heff", "exact solution of the diagonal H_eff (+ TOD Lindblads)", "-", "series"),
    ("gaussian-lsm", "nonlinear Gaussian closure in the LSM basis", "n_lsm", "series, spectrum"),
    ("gssf", "Gaussian split-step Fourier on the grid", "grid", "series, spectrum"),
]


def describe_methods() -> str:
    lines = ["method        description                                              required         outputs"]
    for name, desc, req, outs in METHOD_TABLE:
        lines.append(f"{name:<13} {desc:<56} {req:<16} {outs}")
    return "\n".join(lines)


# Execution


def _fmt(x) -> str:
    return repr(float(x))


def _times(cfg: ExperimentConfig, T0: float) -> np.ndarray:
    n = int(round(cfg.t_max_in_T0 / cfg.dt_in_T0))
    return np.linspace(0.0, n * cfg.dt_in_T0, n + 1) * T0


def _lsm_grid(cfg: ExperimentConfig) -> core.SpatialGrid:
    g = cfg.grid or GridConfig()
    return core.SpatialGrid.default(cfg.nbar, g.L_scaled, g.Nz)


def _window(cfg: ExperimentConfig) -> Optional[Tuple[float, float]]:
    nbar = cfg.nbar
    dk = cfg.window.delta_k_scaled * nbar / np.pi
    if cfg.window.k0_auto:
        if cfg.beta3 == 0:
            return None
        return nbar * me.tod_phase_matching(cfg.beta3) / np.pi, dk
    return cfg.window.k0_scaled * nbar / np.pi, dk


def _write_density_outputs(cfg, out: Path, rho_final, obs):
    if cfg.outputs.histogram:
        fock.histogram_to_csv(out / "histogram.csv", obs)
    if cfg.outputs.wigner:
        extent = 4.0 * np.sqrt(obs["n0"][-1] + 1.0)
        x = np.linspace(-extent, extent, 101)
        fock.wigner_to_csv(out / "wigner.csv", x, x, fock.wigner(rho_final, x, x))


def _series_rows(obs, T0) -> List[List[str]]:
    return [[_fmt(t), _fmt(t / T0), _fmt(a.real), _fmt(a.imag), _fmt(n), _fmt(p)]
            for t, a, n, p in zip(obs["t"], obs["a0"], obs["n0"], obs["purity0"])]


def _write_series(path: Path, obs, T0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "t_over_T0", "re_a0", "im_a0", "n0", "purity0"])
        w.writerows(_series_rows(obs, T0))


def _run_fock(cfg, out, diag):
    nbar, T0 = cfg.nbar, core.soliton_period(cfg.nbar)
    times = _times(cfg, T0)
    if cfg.n_lsm == 1:
        terms = lsm.kerr_terms(nbar)
    else:
        basis = lsm.soliton_supermodes(nbar, cfg.n_lsm, _lsm_grid(cfg))
        terms = lsm.assemble_terms(lsm.coupling_tensors(basis), nbar)
        terms = terms.with_toggles(V1=cfg.toggles.v1, V2=cfg.toggles.v2, V_others=cfg.toggles.v_others)
    fb = fock.FockBasis(cfg.n_lsm, cfg.per_mode_cutoff, cfg.per_mode_cutoff - 1)
    psi0 = fock.coherent_state(nbar, fb, tail_tol=COHERENT_TAIL_TOL)
    diag["initial_tail_mass"] = float(poisson.sf(cfg.per_mode_cutoff - 1, nbar))
    H = fock.build_hamiltonian(terms, fb)
    traj = fock.evolve_state(H, psi0, times)
    rhos = [fock.reduced_density(s) for s in traj]
    obs = fock.observables(rhos, times, nbar)
    diag["cutoff_tail_mass"] = float(max(r[-1, -1].real for r in rhos))
    diag["norm_drift"] = float(max(abs(s.norm() - 1.0) for s in traj))
    if cfg.outputs.series:
        _write_series(out / "series.csv", obs, T0)
    _write_density_outputs(cfg, out, rhos[-1], obs)
    return obs["n0"][-1], np.nan


def _run_me_full(cfg, out, diag):
    nbar, T0 = cfg.nbar, core.soliton_period(cfg.nbar)
    times = _times(cfg, T0)
    cut = cfg.per_mode_cutoff
    gen = me.full_me_generator(nbar, cut, include_omega=cfg.toggles.omega_nbar)
    if cfg.beta3 != 0:
        tod = me.tod_generator(nbar, cfg.beta3, cut, include_omega=False)
        gen.h_diag = gen.h_diag + (tod.h_diag - me.heff_diag(nbar, cut, False))
        gen.lindblads = tod.lindblads
    fb = fock.FockBasis(1, cut)
    psi = fock.coherent_state(nbar, fb, tail_tol=COHERENT_TAIL_TOL)
    diag["initial_tail_mass"] = float(poisson.sf(cut - 1, nbar))
    amp = psi.to_dense()
    res = gen.evolve(np.outer(amp, amp.conj()), times)
    obs = fock.observables(res.densities, times, nbar)
    diag["trace_drift"] = res.trace_drift
    diag["min_eigenvalue"] = res.min_eigenvalue
    diag["cutoff_tail_mass"] = float(max(r[-1, -1].real for r in res.densities))
    if cfg.outputs.series:
        _write_series(out / "series.csv", obs, T0)
    _write_density_outputs(cfg, out, res.densities[-1], obs)
    return obs["n0"][-1], obs["n0"][0] - obs["n0"][-1] if cfg.beta3 != 0 else np.nan


def _run_me_heff(cfg, out, diag):
    nbar, T0 = cfg.nbar, core.soliton_period(cfg.nbar)
    times = _times(cfg, T0)
    cut = me.coherent_cutoff(nbar)
    if cfg.beta3 == 0:
        h = me.heff_diag(nbar, cut + 1, cfg.toggles.omega_nbar)
        res = me.exact_diagonal_evolution(h, np.sqrt(nbar), times)
        a, n = res["a"], res["n"]
        dn3 = np.nan
    else:
        gen = me.tod_generator(nbar, cfg.beta3, cut, include_omega=cfg.toggles.omega_nbar)
        p0 = me.poisson_distribution(nbar, cut)
        a = gen.mean_amplitude_evolution(p0, times)
        P = gen.population_evolution(p0, times)
        n = P @ np.arange(cut)
        dn3 = n[0] - n[-1]
    obs = {"t": times, "a0": a * np.exp(-1j * nbar**2 * times / 8.0), "n0": n,
           "purity0": np.full(len(times), np.nan)}
    diag["cutoff_tail_mass"] = 1e-12
    if cfg.outputs.series:
        _write_series(out / "series.csv", obs, T0)
    return n[-1], dn3


def _run_gaussian_lsm(cfg, out, diag):
    nbar, T0 = cfg.nbar, core.soliton_period(cfg.nbar)
    times = _times(cfg, T0)
    basis = lsm.soliton_supermodes(nbar, cfg.n_lsm, _lsm_grid(cfg))
    terms = lsm.assemble_terms(lsm.coupling_tensors(basis), nbar)
    terms = terms.with_toggles(V1=cfg.toggles.v1, V2=cfg.toggles.v2, V_others=cfg.toggles.v_others)
    dt = None if cfg.step_in_T0 is None else cfg.step_in_T0 * T0
    traj = gaussian.evolve_gaussian_lsm(terms, gaussian.init_gaussian(nbar, cfg.n_lsm), times, dt=dt)
    obs = gaussian.lsm_observables(traj)
    diag.update(traj.diagnostics)
    win = _window(cfg)
    k = np.fft.fftshift(_lsm_grid(cfg).k)
    dn3 = None
    if win is not None:
        dn3 = np.array([gaussian.dispersive_loss(k, gaussian.lsm_reservoir_spectrum(s, basis, k), *win)
                        for s in traj.states])
    if cfg.outputs.series:
        gaussian.series_to_csv(out / "series.csv", obs, T0, dn3)
    if cfg.outputs.spectrum:
        gaussian.spectrum_to_csv(out / "spectrum.csv", k, gaussian.lsm_reservoir_spectrum(traj.states[-1], basis, k), nbar)
    return obs["n0"][-1], dn3[-1] if dn3 is not None else np.nan


def _run_gssf(cfg, out, diag):
    nbar, T0 = cfg.nbar, core.soliton_period(cfg.nbar)
    times = _times(cfg, T0)
    grid = core.SpatialGrid.default(nbar, cfg.grid.L_scaled, cfg.grid.Nz)
    dt = None if cfg.step_in_T0 is None else cfg.step_in_T0 * T0
    alpha3 = me.cubic_dispersion_coefficient(cfg.beta3, nbar)
    traj = gaussian.evolve_gssf(grid, gaussian.init_gaussian_grid(nbar, grid), times, nbar, alpha3, dt=dt)
    obs = gaussian.grid_observables(traj)
    diag.update(traj.diagnostics)
    diag["purity_residual"] = gaussian.purity_residual(traj.states[-1])
    win = _window(cfg)
    u0 = core.soliton_mode(nbar, grid)
    dn3 = None
    if win is not None:
        dn3 = []
        for s in traj.states:
            k, S = gaussian.reservoir_spectrum(s, grid, u0)
            dn3.append(gaussian.dispersive_loss(k, S, *win))
        dn3 = np.array(dn3)
    if cfg.outputs.series:
        gaussian.series_to_csv(out / "series.csv", obs, T0, dn3)
    if cfg.outputs.spectrum:
        k, S = gaussian.reservoir_spectrum(traj.states[-1], grid, u0)
        gaussian.spectrum_to_csv(out / "spectrum.csv", k, S, nbar)
    return obs["n0"][-1], dn3[-1] if dn3 is not None else np.nan


RUNNERS = {"fock-lsm": _run_fock, "me-full": _run_me_full, "me-heff": _run_me_heff,
           "gaussian-lsm": _run_gaussian_lsm, "gssf": _run_gssf}


def run(data: Dict[str, Any], out_dir) -> Tuple[int, Dict[str, Any]]:
    """Execute one experiment; always writes ``manifest.json``. Returns (exit code, manifest)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, Any] = {"config": data, "code_version": __version__, "diagnostics": {}}
    start = time.perf_counter()
    code = EXIT_OK
    try:
        cfg = parse_config(data)
        manifest["config"] = cfg.to_dict()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            n_final, dn3 = RUNNERS[cfg.method](cfg, out, manifest["diagnostics"])
        manifest["result"] = {"final_n0": float(n_final), "delta_n": float(cfg.nbar - n_final),
                              "delta_n3": float(dn3)}
        manifest["status"] = "ok"
    except ConfigError as exc:
        code = EXIT_VALIDATION
        manifest.update(status="validation-error", error={"field": exc.field, "reason": exc.reason})
    except NUMERICAL_ERRORS as exc:
        code = EXIT_TOLERANCE
        manifest.update(status="tolerance-failure", error={"type": type(exc).__name__, "message": str(exc)})
    manifest["exit_code"] = code
    manifest["wall_time_s"] = time.perf_counter() - start
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, default=float)
    return code, manifest


def _set_axis(data: Dict[str, Any], axis: str, value):
    d = copy.deepcopy(data)
    target = d
    parts = axis.split(".")
    for p in parts[:-1]:
        target = target.setdefault(p, {})
    target[parts[-1]] = value
    return d


def _coerce(axis: str, text: str):
    kind = _TYPES.get(axis.split(".")[-1], float)
    return int(text) if kind is int else float(text)


def _sweep_point(args):
    data, out = args
    code, manifest = run(data, out)
    return code, manifest.get("result", {})


SUMMARY_HEADER = ["value", "final_n0", "delta_n", "delta_n3", "exit_code"]


def sweep(data: Dict[str, Any], axis: str, values: List, out_dir, jobs: int = 1) -> int:
    """Independent runs over ``values`` of ``axis``; summary rows follow the value order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs_in = [(_set_axis(data, axis, v), out / f"{axis}={v}") for v in values]
    if jobs > 1 and len(jobs_in) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, jobs_in))
    else:
        results = [_sweep_point(j) for j in jobs_in]
    rows = sorted(zip(range(len(values)), values, results), key=lambda r: r[0])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis] + SUMMARY_HEADER[1:])
        for _, v, (code, res) in rows:
            w.writerow([v] + [_fmt(res.get(k, np.nan)) for k in ("final_n0", "delta_n", "delta_n3")] + [code])
    codes = [c for c, _ in results]
    return max(codes) if codes else EXIT_OK


def _load(path) -> Dict[str, Any]:
    with open(path) as fh:
        return json.load(fh)


def _out_root(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get("SOLITONQ_OUT_DIR", "solitonq_out"))


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="solitonq", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out")
    p_sw = sub.add_parser("sweep", help="sweep one config field")
    p_sw.add_argument("--config", required=True)
    p_sw.add_argument("--out")
    p_sw.add_argument("--axis", required=True)
    p_sw.add_argument("--values", default="")
    p_sw.add_argument("--jobs", type=int, default=1)
    p_val = sub.add_parser("validate", help="static config checks")
    p_val.add_argument("--config", required=True)
    sub.add_parser("describe-methods", help="list simulation methods")
    args = parser.parse_args(argv)

    if args.verb == "describe-methods":
        print(describe_methods())
        return EXIT_OK
    try:
        data = _load(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.verb == "validate":
        issues = validate_config(data)
        print(json.dumps(issues, indent=1))
        return EXIT_VALIDATION if any(i["level"] == "error" for i in issues) else EXIT_OK
    if args.verb == "run":
        code, manifest = run(data, _out_root(args.out))
        if code:
            print(json.dumps(manifest.get("error"), indent=1), file=sys.stderr)
        return code
    values = [_coerce(args.axis, v) for v in args.values.split(",") if v.strip()]
    return sweep(data, args.axis, values, _out_root(args.out), args.jobs)


if __name__ == "__main__":
    sys.exit(main())
