"""Assignment-free frequency fitting.

The objective compares the sorted experimental peak frequencies with the
sorted frequencies of the ``n`` simulated lines of largest integral. Which
simulated line is matched to which peak is decided afresh at every
evaluation, so no spectral assignment is ever supplied. Random 0/1 weights
on the residuals produce a family of objectives that share the true optimum
but not their spurious local minima; alternating between the plain and the
randomly weighted objective lets the local solver escape traps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .peaks import PeakList
from .spectral import (ABS_FLOOR, DROP_REL, detection_operator, diagonalize, sector_blocks,
                       top_n_indices)
from .spin_model import (HamiltonianParams, ParamRef, SpinSystem, all_param_refs,
                         build_hamiltonian, generators, restrict_to_species)

log = logging.getLogger(__name__)

SHORT_PENALTY = 1e12


class FitError(ValueError):
    """Inconsistent fit problem or configuration."""


@dataclass(frozen=True)
class Prep:
    """Initial state of a target.

    ``kind="thermal"`` is the usual high-temperature state. ``kind="coherence"``
    prepares ``|E_i><E_j|`` of the Hamiltonian restricted to ``species``
    (tensored with the identity on all other spins); eigenstates are indexed
    in ascending energy order of that restricted Hamiltonian.
    """

    kind: str = "thermal"
    i: int = -1
    j: int = -1
    species: str = ""

    def __post_init__(self):
        if self.kind not in ("thermal", "coherence"):
            raise FitError(f"unknown preparation {self.kind!r}")

    def __str__(self):
        return "thermal" if self.kind == "thermal" else f"eig:{self.i},{self.j}@{self.species}"

    @classmethod
    def parse(cls, text: str, default_species: str = "") -> "Prep":
        """``thermal`` or ``eig:i,j[@species]``."""
        text = text.strip()
        if text == "thermal":
            return cls()
        if not text.startswith("eig:"):
            raise FitError(f"cannot parse preparation {text!r}")
        body, _, species = text[4:].partition("@")
        try:
            i, j = (int(t) for t in body.split(","))
        except ValueError:
            raise FitError(f"cannot parse preparation {text!r}") from None
        return cls("coherence", i, j, species or default_species)


@dataclass(frozen=True)
class SpectrumTarget:
    """One experimental spectrum to match.

    ``decouple`` restricts the Hamiltonian to the observed species (ideal
    decoupling of all others); otherwise the full system is simulated.
    """

    peaks: PeakList
    observe: str
    decouple: bool = True
    prep: Prep = field(default_factory=Prep)
    name: str = ""

    @property
    def n(self) -> int:
        return len(self.peaks)


@dataclass
class FitProblem:
    sys: SpinSystem
    free: list[ParamRef]
    fixed: HamiltonianParams
    bounds: np.ndarray
    targets: list[SpectrumTarget]
    start: np.ndarray | None = None

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        if self.start is None:
            self.start = np.clip(np.zeros(len(self.bounds)), self.bounds[:, 0], self.bounds[:, 1])
        self.start = np.asarray(self.start, dtype=float).reshape(-1)
        if self.start.size != len(self.bounds):
            raise FitError("start vector length does not match the free parameters")
        if len(self.free) != len(self.bounds):
            raise FitError("one [lo, hi] bound is needed per free parameter")
        if len(set(self.free)) != len(self.free):
            raise FitError("free parameters must be distinct")
        if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
            raise FitError("every bound needs lo <= hi")
        for ref in self.free:
            ref.flat_index(self.sys.n)
        if self.fixed.n != self.sys.n:
            raise FitError("fixed parameters do not match the spin system")
        if not self.targets:
            raise FitError("at least one target spectrum is required")
        for t in self.targets:
            if t.observe not in self.sys.species:
                raise FitError(f"observed species {t.observe!r} not in system")

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def n_lines(self) -> int:
        return sum(t.n for t in self.targets)

    def names(self) -> list[str]:
        return [r.name(self.sys) for r in self.free]

    def params_at(self, x) -> HamiltonianParams:
        vec = self.fixed.to_vector().copy()
        for ref, val in zip(self.free, np.asarray(x, dtype=float)):
            vec[ref.flat_index(self.sys.n)] = val
        return HamiltonianParams.from_vector(vec, self.sys.n)

    def x_of(self, params: HamiltonianParams) -> np.ndarray:
        vec = params.to_vector()
        return np.array([vec[r.flat_index(self.sys.n)] for r in self.free])

    def with_peaks(self, freqs: Sequence[np.ndarray]) -> "FitProblem":
        """Copy with every target's peak frequencies replaced (and re-sorted)."""
        targets = [replace(t, peaks=t.peaks.with_freqs(f)) for t, f in zip(self.targets, freqs)]
        return replace(self, targets=targets)


# ---------------------------------------------------------------------------
# compiled evaluation


class _CompiledTarget:
    """Everything about one target that does not depend on the parameters.

    The Hamiltonian of the simulated spins is block diagonal in the
    magnetization sectors; evaluation works block by block and only forms the
    detection matrix elements between sector pairs it actually connects.
    """

    def __init__(self, prob: FitProblem, target: SpectrumTarget):
        sys = prob.sys
        self.target = target
        sites = sys.sites_of(target.observe) if target.decouple else list(range(sys.n))
        self.sites = sites
        self.sub = SpinSystem(tuple(sys.spins[i] for i in sites))
        species = tuple(self.sub.species)
        gens = generators(species)
        self.blocks = sector_blocks(species)
        n = sys.n
        # global canonical index of every sub-system generator
        self.glob = np.array([ParamRef(r.kind, sites[r.j], sites[r.k] if r.k >= 0 else -1).flat_index(n)
                              for r in all_param_refs(self.sub.n)], dtype=int)
        self.free_cols, free_gens = [], []
        for c, ref in enumerate(prob.free):
            hits = np.flatnonzero(self.glob == ref.flat_index(n))
            if hits.size:
                self.free_cols.append(c)
                free_gens.append(int(hits[0]))
        self.block_gens = [gens[:, b[:, None], b[None, :]] for b in self.blocks]
        self.block_free_gens = [g[free_gens] for g in self.block_gens]
        detect = np.real(detection_operator(self.sub, target.observe))
        self.rho = None
        if target.prep.kind == "coherence":
            self.rho = coherence_state(sys, prob.fixed, target.prep, sites)
        self.pairs = []
        for a, ba in enumerate(self.blocks):
            for b, bb in enumerate(self.blocks):
                d = detect[ba[:, None], bb[None, :]]
                if not np.any(d):
                    continue
                r = None
                if self.rho is not None:
                    r = self.rho[bb[:, None], ba[None, :]]
                    if not np.any(r):
                        continue
                self.pairs.append((a, b, d, r))
        self.offsets = np.concatenate([[0], np.cumsum([b.size for b in self.blocks])])
        dn = np.linalg.norm(detect)
        self.floor = ABS_FLOOR * dn * (dn if self.rho is None else np.linalg.norm(self.rho))
        self.exp = np.asarray(target.peaks.freqs_hz, dtype=float)

    def solve(self, full_vec: np.ndarray):
        """Per-block eigenpairs at ``full_vec``."""
        theta = full_vec[self.glob]
        out = []
        for g in self.block_gens:
            h = np.tensordot(theta, g, axes=1)
            out.append(np.linalg.eigh(h))
        return out

    def lines(self, eigs, rel: float = DROP_REL):
        """Frequencies, integrals and (block, level) indices of all observable lines."""
        freqs, ints, src, dst = [], [], [], []
        for a, b, d, r in self.pairs:
            ea, va = eigs[a]
            eb, vb = eigs[b]
            dt = va.T @ d @ vb
            if r is None:
                integ = dt * dt
            else:
                rt = vb.conj().T @ r @ va
                integ = np.abs(rt.T * dt)
            freqs.append(((ea[:, None] - eb[None, :]) / (2 * np.pi)).ravel())
            ints.append(integ.ravel())
            ia, ib = np.meshgrid(self.offsets[a] + np.arange(ea.size),
                                 self.offsets[b] + np.arange(eb.size), indexing="ij")
            src.append(ia.ravel())
            dst.append(ib.ravel())
        if not freqs:
            empty = np.zeros(0)
            return empty, empty, empty.astype(int), empty.astype(int)
        freq, integ = np.concatenate(freqs), np.concatenate(ints)
        src, dst = np.concatenate(src), np.concatenate(dst)
        top = integ.max()
        keep = integ >= max(rel * top, self.floor) if top > self.floor else np.zeros(integ.size, dtype=bool)
        return freq[keep], integ[keep], src[keep], dst[keep]

    def level_gradients(self, eigs, levels: np.ndarray, gap_rel: float = 1e-8):
        """d(E)/d(free theta) for the given global level indices, or None near degeneracy."""
        scale = max(max((np.abs(e).max() if e.size else 0.0) for e, _ in eigs), 1e-300)
        out = np.zeros((levels.size, len(self.free_cols)))
        block_of = np.searchsorted(self.offsets, levels, side="right") - 1
        for b in np.unique(block_of):
            e, v = eigs[b]
            sel = np.flatnonzero(block_of == b)
            loc = levels[sel] - self.offsets[b]
            if e.size > 1:
                gaps = np.diff(e)
                near = np.zeros(e.size, dtype=bool)
                near[1:] |= gaps < gap_rel * scale
                near[:-1] |= gaps < gap_rel * scale
                if np.any(near[loc]):
                    return None
            vl = v[:, loc]
            gv = self.block_free_gens[b] @ vl
            out[sel] = np.real((vl.conj()[None] * gv).sum(axis=1)).T
        return out


def coherence_state(sys: SpinSystem, params: HamiltonianParams, prep: Prep,
                    sites: Sequence[int] | None = None) -> np.ndarray:
    """``|E_i><E_j|`` of the ``prep.species`` sub-Hamiltonian, identity on the rest.

    The state is expressed on the spins listed in ``sites`` (default: all);
    every spin of ``prep.species`` must be among them.
    """
    sites = list(range(sys.n)) if sites is None else list(sites)
    sub, sub_params = restrict_to_species(sys, params, {prep.species})
    eig = diagonalize(build_hamiltonian(sub, sub_params), sector_blocks(tuple(sub.species)))
    dim = eig.dim
    if not (0 <= prep.i < dim and 0 <= prep.j < dim):
        raise FitError(f"eigenstate indices ({prep.i}, {prep.j}) outside 0..{dim - 1}")
    rho_sub = np.outer(eig.vectors[:, prep.i], eig.vectors[:, prep.j].conj())
    prep_sites = sys.sites_of(prep.species)
    if not set(prep_sites) <= set(sites):
        raise FitError("the prepared species must be part of the simulated spins")
    # tensor with identity, then reorder qubits into `sites` order
    others = [s for s in sites if s not in prep_sites]
    rho = np.kron(rho_sub, np.eye(2 ** len(others)))
    order = prep_sites + others
    return _permute_qubits(rho, [order.index(s) for s in sites])


def _permute_qubits(op: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Reorder tensor factors so new factor ``a`` is old factor ``perm[a]``."""
    n = len(perm)
    if list(perm) == list(range(n)):
        return op
    t = op.reshape([2] * (2 * n))
    axes = list(perm) + [n + p for p in perm]
    return t.transpose(axes).reshape(2**n, 2**n)


@dataclass
class Evaluation:
    """Objective value plus the per-target detail needed by solvers and reports."""

    value: float
    residuals: np.ndarray
    per_target: list[float]
    assignment: list[np.ndarray]
    sim_freqs: list[np.ndarray]
    short: list[int]
    clamped: bool = False
    sim_integrals: list[np.ndarray] = field(default_factory=list)

    def integral_mismatch(self, peaks: Sequence[PeakList]) -> float:
        """L1 distance between unit-sum experimental and matched simulated integrals.

        Zero when the experimental integrals carry no information (all equal).
        """
        total = 0.0
        for pk, si in zip(peaks, self.sim_integrals):
            a = np.asarray(pk.integrals, dtype=float)
            if a.size != si.size or a.size == 0 or np.ptp(a) == 0 or a.sum() <= 0 or si.sum() <= 0:
                continue
            total += float(np.abs(a / a.sum() - si / si.sum()).sum())
        return total


class Objective:
    """Compiled objective ``f_w(x) = sum_j w_j (F_exp_j - F_sim_j)^2``.

    ``w`` is one weight vector over all targets' lines concatenated;
    ``None`` means all ones.
    """

    def __init__(self, prob: FitProblem):
        self.prob = prob
        self.compiled = [_CompiledTarget(prob, t) for t in prob.targets]
        self._base = prob.fixed.to_vector()
        self._flat = np.array([r.flat_index(prob.sys.n) for r in prob.free], dtype=int)
        self.lo, self.hi = prob.bounds[:, 0], prob.bounds[:, 1]
        self.nfev = 0

    @property
    def n_lines(self) -> int:
        return self.prob.n_lines

    def full_vector(self, x) -> np.ndarray:
        vec = self._base.copy()
        vec[self._flat] = x
        return vec

    def clamp(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.lo, self.hi)
        return xc, bool(np.any(xc != x))

    def _target_freqs(self, ct: _CompiledTarget, vec: np.ndarray, want_jac: bool):
        eigs = ct.solve(vec)
        freq, integ, src, dst = ct.lines(eigs)
        n = ct.exp.size
        if freq.size == 0:
            return np.zeros(0), np.zeros((0, 2), dtype=int), None, n, np.zeros(0)
        idx = top_n_indices(freq, integ, n)
        jac = None
        if want_jac:
            jac = np.zeros((idx.size, self.prob.n_free))
            if ct.free_cols:
                p, q = src[idx], dst[idx]
                g = ct.level_gradients(eigs, np.concatenate([p, q]))
                if g is None:
                    jac = None
                else:
                    jac[:, ct.free_cols] = (g[:idx.size] - g[idx.size:]) / (2 * np.pi)
        return freq[idx], np.column_stack([src[idx], dst[idx]]), jac, n - idx.size, integ[idx]

    def evaluate(self, x, w=None) -> Evaluation:
        """Objective with its per-target breakdown at ``x`` (clamped into bounds)."""
        res, ev, _ = self._residuals(x, w, want_jac=False)
        return ev

    def __call__(self, x, w=None) -> float:
        return self.evaluate(x, w).value

    def _residuals(self, x, w, want_jac):
        x, clamped = self.clamp(x)
        vec = self.full_vector(x)
        self.nfev += 1
        parts, jacs, per, assign, sims, shorts, ints = [], [], [], [], [], [], []
        fd_needed = False
        for ct in self.compiled:
            sim, idx, jac, short, integ = self._target_freqs(ct, vec, want_jac)
            ints.append(integ)
            n = ct.exp.size
            if short:
                # deficit lines are compared against nothing: fixed large residual
                r = np.full(n, np.sqrt(SHORT_PENALTY / n + short**2 / n))
                jac = np.zeros((n, self.prob.n_free)) if want_jac else None
                log.debug("target %s: %d of %d lines missing", ct.target.name, short, n)
            else:
                r = ct.exp - sim
            parts.append(r)
            shorts.append(short)
            sims.append(sim)
            assign.append(idx)
            if want_jac:
                if jac is None:
                    fd_needed = True
                else:
                    jacs.append(-jac)
        r = np.concatenate(parts)
        wv = np.ones_like(r) if w is None else np.asarray(w, dtype=float)
        if wv.shape != r.shape:
            raise FitError(f"weight vector has {wv.size} entries, expected {r.size}")
        sw = np.sqrt(wv)
        rw = sw * r
        per, start = [], 0
        for part in parts:
            per.append(float(np.sum(wv[start:start + part.size] * part**2)))
            start += part.size
        ev = Evaluation(float(rw @ rw), r, per, assign, sims, shorts, clamped, ints)
        J = None
        if want_jac:
            J = None if fd_needed else sw[:, None] * np.vstack(jacs)
        return rw, ev, J

    def residual_fn(self, w=None):
        """``(fun, jac)`` pair for :func:`scipy.optimize.least_squares`."""
        cache = {}

        def fun(x):
            rw, ev, J = self._residuals(x, w, want_jac=True)
            cache["x"] = np.array(x)
            cache["J"] = J
            return rw

        def jac(x):
            if "x" not in cache or not np.array_equal(cache["x"], x):
                fun(x)
            J = cache["J"]
            if J is None:
                J = self._fd_jacobian(x, w)
            return J

        return fun, jac

    def _fd_jacobian(self, x, w, step=1e-4):
        x = np.asarray(x, dtype=float)
        cols = []
        for c in range(x.size):
            h = np.zeros_like(x)
            h[c] = step
            xp, _ = self.clamp(x + h)
            xm, _ = self.clamp(x - h)
            rp = self._residuals(xp, w, False)[0]
            rm = self._residuals(xm, w, False)[0]
            d = xp[c] - xm[c]
            cols.append((rp - rm) / d if d > 0 else np.zeros_like(rp))
        return np.column_stack(cols)


def objective(x, prob: FitProblem, w=None) -> Evaluation:
    """One-shot evaluation of ``f_w`` at ``x``; see :class:`Objective` for repeated use."""
    return Objective(prob).evaluate(x, w)


# ---------------------------------------------------------------------------
# weights and local solver


def sample_weights(n: int, p_zero: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. 0/1 weights with ``P(0) = p_zero``; an all-zero draw is redrawn."""
    if not 0 <= p_zero < 1:
        raise FitError("p_zero must lie in [0, 1)")
    if n < 1:
        raise FitError("need at least one weight")
    while True:
        w = (rng.random(n) >= p_zero).astype(float)
        if w.any():
            return w


@dataclass(frozen=True)
class SolverSettings:
    max_nfev: int = 200
    ps_step_hz: float = 10.0
    ps_min_step_hz: float = 1e-3
    ps_max_iter: int = 2000
    ftol: float = 1e-12


@dataclass
class LocalResult:
    x: np.ndarray
    value: float
    hit_cap: bool = False
    nfev: int = 0


def pattern_search(fun, x0, lo, hi, step=10.0, min_step=1e-3, max_iter=2000):
    """Coordinate pattern search with step halving; only strict improvements are taken."""
    x = np.array(x0, dtype=float)
    fx = fun(x)
    nfev = 1
    it = 0
    while step >= min_step and it < max_iter:
        it += 1
        improved = False
        for c in range(x.size):
            for sgn in (1.0, -1.0):
                trial = x.copy()
                trial[c] = min(max(x[c] + sgn * step, lo[c]), hi[c])
                if trial[c] == x[c]:
                    continue
                ft = fun(trial)
                nfev += 1
                if ft < fx:
                    x, fx = trial, ft
                    improved = True
                    break
        if not improved:
            step /= 2
    return x, fx, nfev, it >= max_iter


def local_solve(obj: Objective, x0, w=None, cfg: SolverSettings = SolverSettings()) -> LocalResult:
    """Bound-constrained local minimization of ``f_w`` from ``x0``.

    A trust-region reflective least-squares stage with Hellmann-Feynman
    Jacobians (finite differences at degenerate levels) is followed by a
    coordinate pattern search that handles kinks from re-selection of lines.
    Parameters whose bounds coincide stay fixed. The returned point is never
    worse than ``x0``.
    """
    x0, _ = obj.clamp(x0)
    best_x, best_f = x0, obj(x0, w)
    nfev0 = obj.nfev
    active = obj.hi > obj.lo
    if not np.any(active):
        return LocalResult(best_x, best_f, False, obj.nfev - nfev0)
    lo, hi = obj.lo[active], obj.hi[active]

    def embed(z):
        x = x0.copy()
        x[active] = z
        return x

    fun, jac = obj.residual_fn(w)
    span = hi - lo

    def gradient_stage(x):
        # least_squares needs a strictly interior start
        start = np.clip(x[active], lo + 1e-9 * span, hi - 1e-9 * span)
        try:
            sol = least_squares(lambda z: fun(embed(z)), start,
                                jac=lambda z: jac(embed(z))[:, active],
                                bounds=(lo, hi), method="trf", max_nfev=cfg.max_nfev,
                                ftol=cfg.ftol, xtol=1e-12, gtol=1e-12)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("least-squares stage failed: %s", exc)
            return None, np.inf, False
        return embed(sol.x), obj(embed(sol.x), w), sol.status == 0

    xs, fs, hit_cap = gradient_stage(best_x)
    if fs < best_f:
        best_x, best_f = xs, fs
    z, fz, _, cap = pattern_search(lambda z: obj(embed(z), w), best_x[active], lo, hi,
                                   cfg.ps_step_hz, cfg.ps_min_step_hz, cfg.ps_max_iter)
    if fz < best_f:
        best_x, best_f = embed(z), fz
        # the pattern search may have crossed a kink into a smooth region
        xs, fs, _ = gradient_stage(best_x)
        if fs < best_f:
            best_x, best_f = xs, fs
    return LocalResult(best_x, best_f, hit_cap or cap, obj.nfev - nfev0)


# ---------------------------------------------------------------------------
# global driver


@dataclass(frozen=True)
class NafonsConfig:
    """Settings of :func:`nafons_fit`.

    ``jitter_frac`` scales the uniform start jitter relative to each
    parameter's half range. ``pair_moves`` enables the deterministic
    escape moves of :func:`pair_difference_moves` after an uncertified
    loop. ``workers > 1`` runs restarts in a process pool;
    results are identical to serial runs unless ``max_wall_time`` cuts a
    restart short.
    """

    M: int = 50
    p_zero: float = 0.5
    seed: int = 0
    tol_hz: float = 0.05
    max_wall_time: float | None = None
    restarts: int = 1
    mode: str = "loop"
    certificate_k: int = 10
    jitter_frac: float = 1.0
    pair_moves: bool = True
    solver: SolverSettings = field(default_factory=SolverSettings)
    workers: int = 1

    def __post_init__(self):
        if self.M < 0:
            raise FitError("M must be >= 0")
        if self.mode not in ("loop", "random_walk"):
            raise FitError(f"unknown mode {self.mode!r}")
        if self.restarts < 1:
            raise FitError("restarts must be >= 1")
        if not 0 <= self.p_zero < 1:
            raise FitError("p_zero must lie in [0, 1)")


@dataclass
class RestartOutcome:
    index: int
    value: float
    rms_hz: float
    loops: int
    converged: bool
    wall_s: float
    x: np.ndarray
    integral_mismatch: float = 0.0


@dataclass
class FitResult:
    x_star: np.ndarray
    residual_unweighted: float
    per_target_residuals: list[float]
    assignment: list[np.ndarray]
    sim_freqs: list[np.ndarray]
    loops_used: int
    seed: int
    converged: bool
    names: list[str]
    restarts: list[RestartOutcome]
    n_lines: int
    wall_s: float = 0.0
    certificate: list[float] = field(default_factory=list)
    best_restart: int = 0

    @property
    def rms_hz(self) -> float:
        return float(np.sqrt(self.residual_unweighted / max(self.n_lines, 1)))


def restart_rng(seed: int, restart: int, stream: int = 0) -> np.random.Generator:
    """Generator for ``stream`` of ``restart``; 0 drives the loop, 1 the certificate."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(restart, stream))))


def certify(obj: Objective, x, cfg: NafonsConfig, rng: np.random.Generator) -> tuple[bool, list[float]]:
    """Convergence test at ``x``.

    Passes when the unweighted per-line RMS residual is below ``tol_hz`` and
    ``certificate_k`` freshly drawn weighted objectives are each below
    ``n * tol_hz**2``.
    """
    n = obj.n_lines
    f = obj(x)
    if np.sqrt(f / n) >= cfg.tol_hz:
        return False, []
    vals = [obj(x, sample_weights(n, cfg.p_zero, rng)) for _ in range(cfg.certificate_k)]
    return all(v < n * cfg.tol_hz**2 for v in vals), vals


def _descent_step(obj: Objective, x, w, lam: float) -> tuple[np.ndarray, float]:
    """One damped Gauss-Newton step on ``f_w``, taken only if it lowers ``f_w``."""
    fun, jac = obj.residual_fn(w)
    r = fun(x)
    J = jac(x)
    f0 = float(r @ r)
    g = J.T @ r
    A = J.T @ J
    for _ in range(12):
        try:
            d = -np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
        except np.linalg.LinAlgError:
            d = -g
        xn, _ = obj.clamp(x + d)
        if obj(xn, w) < f0:
            return xn, max(lam / 3, 1e-9)
        lam = min(lam * 4, 1e10)
    return x, lam


def _run_restart(prob: FitProblem, cfg: NafonsConfig, r: int, deadline: float | None) -> RestartOutcome:
    t0 = time.perf_counter()
    obj = Objective(prob)
    rng = restart_rng(cfg.seed, r, 0)
    cert_rng = restart_rng(cfg.seed, r, 1)
    lo, hi = obj.lo, obj.hi
    jitter = rng.uniform(-1, 1, prob.n_free) * cfg.jitter_frac * (hi - lo) / 2
    x0, _ = obj.clamp(prob.start + (jitter if r > 0 else 0.0))
    n = obj.n_lines
    res = local_solve(obj, x0, None, cfg.solver)
    x, best_x, best_f = res.x, res.x, res.value
    loops = 0
    converged = False

    def out_of_time():
        return deadline is not None and time.perf_counter() > deadline

    if cfg.mode == "loop":
        for loops in range(1, cfg.M + 1):
            if certify(obj, best_x, cfg, cert_rng)[0]:
                converged = True
                loops -= 1
                break
            if out_of_time():
                loops -= 1
                break
            w = sample_weights(n, cfg.p_zero, rng)
            x = local_solve(obj, x, w, cfg.solver).x
            res = local_solve(obj, x, None, cfg.solver)
            x = res.x
            if res.value < best_f:
                best_x, best_f = res.x, res.value
            log.debug("restart %d round %d: f=%.6g best=%.6g", r, loops, res.value, best_f)
    else:
        lam = lam_w = 1e-2
        for loops in range(1, cfg.M + 1):
            if loops % 25 == 0 and certify(obj, best_x, cfg, cert_rng)[0]:
                converged = True
                break
            if out_of_time():
                break
            x, lam = _descent_step(obj, x, None, lam)
            w = sample_weights(n, cfg.p_zero, rng)
            x, lam_w = _descent_step(obj, x, w, lam_w)
            fx = obj(x)
            if fx < best_f:
                best_x, best_f = x, fx
        res = local_solve(obj, best_x, None, cfg.solver)
        if res.value < best_f:
            best_x, best_f = res.x, res.value
    if not converged:
        converged = certify(obj, best_x, cfg, cert_rng)[0]
    if not converged and cfg.pair_moves and not out_of_time():
        moved = pair_difference_moves(obj, best_x, cfg)
        if moved is not None and moved.value < best_f:
            best_x, best_f = moved.x, moved.value
            converged = certify(obj, best_x, cfg, cert_rng)[0]
    mismatch = obj.evaluate(best_x).integral_mismatch([t.peaks for t in prob.targets])
    return RestartOutcome(r, best_f, float(np.sqrt(best_f / n)), loops, converged,
                          time.perf_counter() - t0, best_x, mismatch)


PAIR_MOVE_SCALES = tuple(np.round(np.arange(0.5, 1.2001, 0.05), 2))


def _unobserved_pairs(prob: FitProblem):
    """Homonuclear two-spin species that no target observes, with the free
    coupling columns ``(col_a, col_b, J_a, J_b)`` of every spin coupled to both."""
    sys = prob.sys
    observed = {t.observe for t in prob.targets}
    col = {r: c for c, r in enumerate(prob.free)}
    J = prob.fixed.scalar_hz
    out = []
    for species in sys.species_set():
        sites = sys.sites_of(species)
        if species in observed or len(sites) != 2:
            continue
        a, b = sites
        cols = []
        for m in range(sys.n):
            if m in sites:
                continue
            ra = ParamRef("dipolar", min(m, a), max(m, a))
            rb = ParamRef("dipolar", min(m, b), max(m, b))
            if ra in col and rb in col:
                cols.append((col[ra], col[rb], J[m, a], J[m, b]))
        if cols:
            out.append(np.array(cols))
    return out


def pair_difference_moves(obj: Objective, x, cfg: NafonsConfig) -> LocalResult | None:
    """Escape moves for couplings to an unobserved homonuclear pair.

    Spectra of the other spins fix, to first order, each spin's summed
    coupling ``c_a + c_b`` to the pair (``c = D + J``) but only the magnitude
    of the difference ``c_a - c_b``; the wrong sign is a stable local minimum.
    Each move keeps the sums, replaces every difference by ``-s`` times itself
    for the scales in ``PAIR_MOVE_SCALES`` (second-order shifts change the
    magnitude as well) and solves locally. Returns the best result, stopping
    early once the per-line RMS drops below ``tol_hz``; ``None`` if the problem
    has no such pair.
    """
    groups = _unobserved_pairs(obj.prob)
    if not groups:
        return None
    x = np.asarray(x, dtype=float)
    best = None
    target = obj.n_lines * cfg.tol_hz**2
    for g in groups:
        ia, ib = g[:, 0].astype(int), g[:, 1].astype(int)
        ca, cb = x[ia] + g[:, 2], x[ib] + g[:, 3]
        total, diff = ca + cb, ca - cb
        for scale in PAIR_MOVE_SCALES:
            y = x.copy()
            d = -scale * diff
            y[ia] = (total + d) / 2 - g[:, 2]
            y[ib] = (total - d) / 2 - g[:, 3]
            res = local_solve(obj, y, None, cfg.solver)
            log.debug("pair move scale %.2f: f=%.6g", scale, res.value)
            if best is None or res.value < best.value:
                best = res
            if best.value < target:
                return best
    return best


def _rank(o: RestartOutcome):
    # certified restarts all fit the frequencies to tolerance; among them the
    # integral pattern decides, because distinct parameter sets can share
    # one set of line frequencies
    if o.converged:
        return (0, round(o.integral_mismatch, 6), 0.0, o.index)
    return (1, 0.0, o.value, o.index)


def nafons_fit(prob: FitProblem, cfg: NafonsConfig = NafonsConfig()) -> FitResult:
    """Assignment-free global fit of ``prob``.

    Loop mode: solve the plain objective, then repeat up to ``M`` rounds of
    {draw random 0/1 weights; solve the weighted objective; solve the plain
    objective}, each solve starting where the previous one ended. The best
    plain-objective point seen is kept. A restart stops early once the
    convergence certificate of :func:`certify` holds.

    Random-walk mode replaces each round by one descent step on the plain
    objective and one on a freshly weighted objective.

    Restart 0 begins at ``prob.start``; later restarts add uniform jitter of
    ``jitter_frac`` times each half range. Certified restarts beat the rest;
    among them the one whose matched line integrals agree best with the
    experimental integrals wins. Otherwise the lowest residual wins. Remaining
    ties go to the lower restart index.
    """
    t0 = time.perf_counter()
    deadline = None if cfg.max_wall_time is None else t0 + cfg.max_wall_time
    if cfg.workers > 1 and cfg.restarts > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(_run_restart, [prob] * cfg.restarts, [cfg] * cfg.restarts,
                                     range(cfg.restarts), [deadline] * cfg.restarts))
    else:
        outcomes = [_run_restart(prob, cfg, r, deadline) for r in range(cfg.restarts)]
    best = min(outcomes, key=_rank)
    obj = Objective(prob)
    ev = obj.evaluate(best.x)
    _, cert = certify(obj, best.x, cfg, restart_rng(cfg.seed, best.index, 2))
    return FitResult(
        x_star=best.x,
        residual_unweighted=ev.value,
        per_target_residuals=ev.per_target,
        assignment=ev.assignment,
        sim_freqs=ev.sim_freqs,
        loops_used=best.loops,
        seed=cfg.seed,
        converged=best.converged,
        names=prob.names(),
        restarts=outcomes,
        n_lines=prob.n_lines,
        wall_s=time.perf_counter() - t0,
        certificate=cert,
        best_restart=best.index,
    )


# ---------------------------------------------------------------------------
# exact symmetries


def _swap_labels(sys: SpinSystem, vec: np.ndarray, j: int, k: int) -> np.ndarray:
    """Canonical parameter vector with spins ``j`` and ``k`` exchanged."""
    n = sys.n
    perm = np.arange(n)
    perm[[j, k]] = [k, j]
    p = HamiltonianParams.from_vector(vec, n)
    return HamiltonianParams(p.shifts_hz[perm], p.dipolar_hz[np.ix_(perm, perm)],
                             p.scalar_hz[np.ix_(perm, perm)]).to_vector()


def _reflect_pair(sys: SpinSystem, vec: np.ndarray, a: int, b: int) -> np.ndarray:
    """Flip both spins of the pair ``(a, b)`` and exchange their labels.

    Every coupling ``D + J`` from another spin ``m`` to the pair maps as
    ``(c_ma, c_mb) -> (-c_mb, -c_ma)`` with ``J`` held fixed, and the pair's
    shifts become ``(-nu_b, -nu_a)``. Spectra of other spins do not change:
    the transformed Hamiltonian is unitarily equivalent up to a term that is
    constant within each magnetization sector of the pair.
    """
    p = HamiltonianParams.from_vector(vec, sys.n)
    D, J, nu = p.dipolar_hz.copy(), p.scalar_hz, p.shifts_hz.copy()
    for m in range(sys.n):
        if m in (a, b):
            continue
        ca, cb = D[m, a] + J[m, a], D[m, b] + J[m, b]
        D[m, a] = D[a, m] = -cb - J[m, a]
        D[m, b] = D[b, m] = -ca - J[m, b]
    nu[a], nu[b] = -p.shifts_hz[b], -p.shifts_hz[a]
    return HamiltonianParams(nu, D, J).to_vector()


def equivalent_solutions(prob: FitProblem, x, rtol: float = 1e-9) -> list[tuple[str, np.ndarray]]:
    """Other points inside the bounds that fit the data exactly as well as ``x``.

    Candidates are exchanges of two spin labels of one species, and
    reflections of a homonuclear spin pair that no target observes (see
    :func:`_reflect_pair`). Only the free parameters may change. The
    pair's shift sum is then allowed to change as well, because it never
    enters the observed frequencies. Each candidate is kept only if its
    objective value matches that of ``x`` numerically.
    """
    sys = prob.sys
    n = sys.n
    x = np.asarray(x, dtype=float)
    vec = prob.params_at(x).to_vector()
    flat = np.array([r.flat_index(n) for r in prob.free], dtype=int)
    fixed_mask = np.ones(vec.size, dtype=bool)
    fixed_mask[flat] = False
    observed = {t.observe for t in prob.targets}
    obj = Objective(prob)
    f0 = obj(x)
    out = []
    for j in range(n):
        for k in range(j + 1, n):
            if not sys.is_homonuclear(j, k):
                continue
            cands = [(f"swap:{sys.labels[j]},{sys.labels[k]}", _swap_labels(sys, vec, j, k), ())]
            pair = sys.sites_of(sys.spins[j].species)
            if len(pair) == 2 and sys.spins[j].species not in observed:
                cands.append((f"reflect:{sys.labels[j]},{sys.labels[k]}", _reflect_pair(sys, vec, j, k),
                              (ParamRef("shift", j).flat_index(n), ParamRef("shift", k).flat_index(n))))
            for label, img, loose in cands:
                check = fixed_mask.copy()
                check[list(loose)] = False
                if not np.allclose(img[check], vec[check], rtol=0, atol=1e-9):
                    continue
                y = img[flat]
                if np.allclose(y, x) or np.any(y < prob.bounds[:, 0]) or np.any(y > prob.bounds[:, 1]):
                    continue
                if abs(obj(y) - f0) <= rtol * max(f0, 1.0):
                    out.append((label, y))
    return out


# ---------------------------------------------------------------------------
# transition-selective heteronuclear problems


def build_joint_hetero_problem(sys: SpinSystem, known: HamiltonianParams,
                               subspectra: Sequence[tuple[Prep, PeakList]],
                               shift_window_hz: float = 50.0, observe: str | None = None,
                               coupling_bound_hz: float = 2500.0) -> FitProblem:
    """Joint fit of all heteronuclear dipolar couplings from selective subspectra.

    Every subspectrum was recorded after preparing one coherence
    ``|E_i><E_j|`` of the observed species' own Hamiltonian (taken at the
    known parameters) and then acquired without decoupling. The free
    parameters are every heteronuclear dipolar coupling, bounded by
    ``+-coupling_bound_hz`` and started at 0, plus the shifts of the prepared
    species, allowed to move ``+-shift_window_hz`` around their known values.
    Each subspectrum is matched on its own, so lines are only ever permuted
    within a subspectrum.
    """
    if not subspectra:
        raise FitError("at least one subspectrum is required")
    if shift_window_hz < 0:
        raise FitError("shift window must be non-negative")
    species = {prep.species for prep, _ in subspectra}
    if len(species) != 1:
        raise FitError("all subspectra must prepare the same species")
    prep_species = species.pop()
    observe = observe or prep_species
    hetero = [ParamRef("dipolar", j, k) for j in range(sys.n) for k in range(j + 1, sys.n)
              if not sys.is_homonuclear(j, k)]
    if not hetero:
        raise FitError("system has no heteronuclear pairs")
    shift_refs = [ParamRef("shift", j) for j in sys.sites_of(prep_species)]
    free = hetero + shift_refs
    known_shifts = known.shifts_hz[[r.j for r in shift_refs]]
    bounds = ([[-coupling_bound_hz, coupling_bound_hz]] * len(hetero)
              + [[v - shift_window_hz, v + shift_window_hz] for v in known_shifts])
    base = known.dipolar_hz.copy()
    for r in hetero:
        base[r.j, r.k] = base[r.k, r.j] = 0.0
    fixed = HamiltonianParams(known.shifts_hz, base, known.scalar_hz)
    targets = []
    for m, (prep, peaks) in enumerate(subspectra):
        if prep.kind != "coherence":
            raise FitError("subspectra must come from prepared coherences")
        targets.append(SpectrumTarget(peaks, observe, decouple=False, prep=prep, name=f"sub{m + 1}:{prep}"))
    start = np.concatenate([np.zeros(len(hetero)), known_shifts])
    prob = FitProblem(sys, free, fixed, bounds, targets, start)
    # every preparation must give observable signal at the known parameters
    obj = Objective(prob)
    for ct in obj.compiled:
        freq, _, _, _ = ct.lines(ct.solve(obj.full_vector(start)))
        if freq.size == 0:
            raise FitError(f"preparation {ct.target.prep} produces no observable lines")
    return prob
