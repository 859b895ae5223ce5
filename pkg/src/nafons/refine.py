"""Line-shape refinement and Monte-Carlo error bars.

After the frequency fit, the full sampled spectra are fitted by least squares
over the per-spin T2*, the scalar couplings and (inside a narrow window) the
shifts and dipolar couplings. Amplitude and baseline of every spectrum are
linear nuisance parameters and are eliminated in closed form.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fitting import FitError, FitProblem, Objective, SolverSettings, local_solve
from .spectral import (LineWidths, SampledSpectrum, SpectralError, detection_operator,
                       diagonalize_system, simulate_lineshape, stick_spectrum_thermal)
from .spin_model import (HamiltonianParams, ParamRef, SpinSystem, all_param_refs,
                         build_hamiltonian, restrict_to_species)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LineshapeTarget:
    """One measured thermal spectrum: observed species, decoupling, samples."""

    spectrum: SampledSpectrum
    observe: str
    decouple: bool = True


@dataclass(frozen=True)
class RefineSettings:
    param_window_frac: float = 0.01
    window_floor_hz: float = 10.0
    scalar_window_hz: float = 100.0
    max_iter: int = 200
    max_rejects: int = 20
    rtol: float = 1e-12
    fd_step: float = 1e-6


@dataclass
class RefineResult:
    params: HamiltonianParams
    widths: LineWidths
    rel_param_change: np.ndarray
    rss: float
    names: list[str]
    amplitudes: list[float]
    baselines: list[float]
    iterations: int
    aborted: bool
    rss_history: list[float] = field(default_factory=list)
    fitted: list[SampledSpectrum] = field(default_factory=list)

    @property
    def max_rel_change(self) -> float:
        return float(self.rel_param_change.max()) if self.rel_param_change.size else 0.0


def simulate_target(sys: SpinSystem, params: HamiltonianParams, widths: LineWidths,
                    target: LineshapeTarget) -> np.ndarray:
    """Unit-amplitude model intensity of ``target`` on its own axis."""
    if target.decouple:
        sub, sp = restrict_to_species(sys, params, {target.observe})
        sites = sys.sites_of(target.observe)
        w = LineWidths(widths.t2star_s[sites])
    else:
        sub, sp, w = sys, params, widths
    eig = diagonalize_system(sub, build_hamiltonian(sub, sp))
    sticks = stick_spectrum_thermal(eig, detection_operator(sub, target.observe))
    return simulate_lineshape(sub, eig, sticks, w, target.spectrum.freq_axis_hz,
                              observe=target.observe).intensity


def _visible(sys: SpinSystem, targets: Sequence[LineshapeTarget]):
    """Parameter references and spins that influence at least one target."""
    spins, refs = set(), set()
    n = sys.n
    for t in targets:
        sites = set(sys.sites_of(t.observe)) if t.decouple else set(range(n))
        # line widths mix only the T2* of observed spins
        spins |= set(sys.sites_of(t.observe))
        for r in all_param_refs(n):
            if r.j in sites and (r.k < 0 or r.k in sites):
                refs.add(r)
    order = {r: i for i, r in enumerate(all_param_refs(n))}
    return sorted(spins), sorted(refs, key=order.get)


def _linear_nuisance(model: np.ndarray, data: np.ndarray):
    """Best ``a * model + c`` for ``data``; returns (a, c, residual)."""
    X = np.column_stack([model, np.ones_like(model)])
    coef, *_ = np.linalg.lstsq(X, data, rcond=None)
    return float(coef[0]), float(coef[1]), data - X @ coef


def lineshape_refine(sys: SpinSystem, params: HamiltonianParams, widths: LineWidths,
                     targets: Sequence[LineshapeTarget],
                     cfg: RefineSettings = RefineSettings()) -> RefineResult:
    """Least-squares line-shape refinement around a frequency-fit result.

    Free: T2* of every spin observed in some target (fitted in log space),
    every visible scalar coupling (within ``scalar_window_hz``), and every
    visible shift and dipolar coupling, each confined to
    ``+-param_window_frac * max(|value|, window_floor_hz)`` around its start.
    Each target gets its own amplitude and constant baseline.

    A damped Gauss-Newton loop with forward-difference Jacobians accepts only
    steps that lower the residual sum of squares; ``max_rejects`` rejected
    steps in a row end the run with the best point found.
    """
    if not targets:
        raise FitError("at least one spectrum is required")
    if widths.t2star_s.size != sys.n:
        raise SpectralError(f"need {sys.n} T2* values, got {widths.t2star_s.size}")
    n = sys.n
    spins, refs = _visible(sys, targets)
    base = params.to_vector()
    flat = np.array([r.flat_index(n) for r in refs], dtype=int)
    v0 = base[flat]
    lo, hi = np.empty(flat.size), np.empty(flat.size)
    for i, r in enumerate(refs):
        if r.kind == "scalar":
            half = cfg.scalar_window_hz
        else:
            half = cfg.param_window_frac * max(abs(v0[i]), cfg.window_floor_hz)
        lo[i], hi[i] = v0[i] - half, v0[i] + half
    ns = len(spins)
    z0 = np.concatenate([np.log(widths.t2star_s[spins]), v0])
    zlo = np.concatenate([np.full(ns, -np.inf), lo])
    zhi = np.concatenate([np.full(ns, np.inf), hi])

    def unpack(z):
        t2 = widths.t2star_s.copy()
        t2[spins] = np.exp(z[:ns])
        vec = base.copy()
        vec[flat] = z[ns:]
        return HamiltonianParams.from_vector(vec, n), LineWidths(t2)

    def residuals(z):
        p, w = unpack(z)
        out, nuis = [], []
        for t in targets:
            a, c, r = _linear_nuisance(simulate_target(sys, p, w, t), t.spectrum.intensity)
            out.append(r)
            nuis.append((a, c))
        return np.concatenate(out), nuis

    z = z0.copy()
    r, nuis = residuals(z)
    rss = float(r @ r)
    history = [rss]
    lam = 1e-3
    rejects = 0
    aborted = False
    it = 0
    floor = 1e-24 * sum(float(t.spectrum.intensity @ t.spectrum.intensity) for t in targets)
    for it in range(1, cfg.max_iter + 1):
        if rss <= floor:
            it -= 1
            break
        J = np.empty((r.size, z.size))
        for c in range(z.size):
            h = cfg.fd_step * max(abs(z[c]), 1.0)
            zp = z.copy()
            zp[c] += h
            if zp[c] > zhi[c]:
                zp[c] = z[c] - h
                h = -h
            J[:, c] = (residuals(zp)[0] - r) / h
        g = J.T @ r
        A = J.T @ J
        d_a = np.diag(A).copy()
        d_a[d_a == 0] = 1.0
        accepted = False
        while not accepted and rejects < cfg.max_rejects:
            try:
                step = -np.linalg.solve(A + lam * np.diag(d_a), g)
            except np.linalg.LinAlgError:
                step = -g / d_a
            zn = np.clip(z + step, zlo, zhi)
            rn, nn = residuals(zn)
            rss_n = float(rn @ rn)
            if rss_n < rss:
                accepted = True
                rel = (rss - rss_n) / max(rss, 1e-300)
                z, r, nuis, rss = zn, rn, nn, rss_n
                history.append(rss)
                lam = max(lam / 5, 1e-12)
                rejects = 0
            else:
                rejects += 1
                lam = min(lam * 10, 1e12)
        if not accepted:
            aborted = True
            log.info("refinement stopped after %d rejected steps", rejects)
            break
        if rel < cfg.rtol:
            break
    p, w = unpack(z)
    new = p.to_vector()
    rel_change = np.abs(new - base) / np.maximum(np.abs(base), cfg.window_floor_hz)
    fitted = []
    for t, (a, c) in zip(targets, nuis):
        fitted.append(SampledSpectrum(t.spectrum.freq_axis_hz, a * simulate_target(sys, p, w, t) + c))
    return RefineResult(
        params=p, widths=w, rel_param_change=rel_change, rss=rss,
        names=[r.name(sys) for r in all_param_refs(n)],
        amplitudes=[a for a, _ in nuis], baselines=[c for _, c in nuis],
        iterations=it, aborted=aborted, rss_history=history, fitted=fitted,
    )


# ---------------------------------------------------------------------------
# error bars


@dataclass
class ErrorEstimate:
    std: np.ndarray
    trials: int
    noise_sigma_hz: float
    names: list[str]
    failed: int = 0
    samples: np.ndarray | None = None


def _trial(prob: FitProblem, x_star: np.ndarray, sigma: float, seed, cfg: SolverSettings,
           fail_rms: float):
    if sigma == 0:
        # noiseless data is the original problem, solved by x* itself
        return x_star.copy(), True
    rng = np.random.default_rng(seed)
    noisy = [t.peaks.freqs_hz + rng.normal(0.0, sigma, t.n) for t in prob.targets]
    trial = prob.with_peaks(noisy)
    obj = Objective(trial)
    res = local_solve(obj, x_star, None, cfg)
    rms = float(np.sqrt(res.value / trial.n_lines))
    return res.x, rms <= fail_rms


def estimate_errors(prob: FitProblem, x_star, noise_sigma_hz: float, trials: int = 100,
                    rng: np.random.Generator | int | None = 0,
                    cfg: SolverSettings = SolverSettings(), workers: int = 1,
                    fail_factor: float = 5.0) -> ErrorEstimate:
    """Per-parameter standard deviation under Gaussian frequency noise.

    Every trial adds i.i.d. ``N(0, noise_sigma_hz^2)`` to each experimental
    frequency and re-solves locally from ``x_star``. A trial whose final
    per-line RMS residual exceeds ``fail_factor * sigma + 0.05`` Hz has
    slipped into another basin; it is dropped and counted. More than half
    dropped aborts with :class:`FitError`.
    """
    if noise_sigma_hz < 0 or not np.isfinite(noise_sigma_hz):
        raise FitError("noise sigma must be a finite non-negative number")
    if trials < 2:
        raise FitError("need at least 2 trials")
    x_star = np.asarray(x_star, dtype=float)
    if x_star.size != prob.n_free:
        raise FitError(f"x* has {x_star.size} entries, problem has {prob.n_free} free parameters")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    # one child seed per trial, drawn up front so worker count cannot change results
    seeds = gen.integers(0, 2**63 - 1, size=trials)
    fail_rms = fail_factor * noise_sigma_hz + 0.05
    args = ([prob] * trials, [x_star] * trials, [noise_sigma_hz] * trials, seeds,
            [cfg] * trials, [fail_rms] * trials)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_trial, *args))
    else:
        out = [_trial(*a) for a in zip(*args)]
    good = np.array([x for x, ok in out if ok])
    failed = trials - len(good)
    if failed * 2 > trials:
        raise FitError(f"{failed} of {trials} error trials failed to converge")
    std = np.zeros(prob.n_free)
    if len(good) >= 2:
        # identical samples must give exactly zero, whatever the rounding of their mean
        spread = np.ptp(good, axis=0) > 0
        std[spread] = good[:, spread].std(axis=0, ddof=1)
    return ErrorEstimate(std=std, trials=len(good), noise_sigma_hz=float(noise_sigma_hz),
                         names=prob.names(), failed=failed, samples=good)
