"""Diagonalization, single-quantum stick spectra, line shapes and eigenvalue gradients."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .spin_model import SpinSystem, SpinModelError, generators, pauli_embed

HERMITIAN_ATOL = 1e-12
DROP_REL = 1e-10
# integrals below this fraction of the operator norms are treated as exact zeros
ABS_FLOOR = 1e-12


class SpectralError(ValueError):
    """Invalid input to a spectral computation."""


class DegenerateGradientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EigenSystem:
    """Energies (rad/s, ascending) and eigenvectors as columns."""

    energies: np.ndarray
    vectors: np.ndarray
    scale: float = 1.0

    @property
    def dim(self) -> int:
        return self.energies.size


@dataclass(frozen=True)
class Transition:
    freq_hz: float
    integral: float
    from_idx: int
    to_idx: int
    coherence_order: int = 1


@dataclass(frozen=True)
class StickSpectrum:
    """Array-backed list of transitions; iterating yields :class:`Transition`."""

    freq_hz: np.ndarray
    integral: np.ndarray
    from_idx: np.ndarray
    to_idx: np.ndarray
    coherence_order: np.ndarray
    amplitude: np.ndarray | None = None

    def __len__(self) -> int:
        return self.freq_hz.size

    def __getitem__(self, i) -> Transition:
        return Transition(float(self.freq_hz[i]), float(self.integral[i]),
                          int(self.from_idx[i]), int(self.to_idx[i]),
                          int(self.coherence_order[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))

    def sorted(self) -> "StickSpectrum":
        order = np.lexsort((-self.integral, self.freq_hz))
        return self.take(order)

    def take(self, idx) -> "StickSpectrum":
        amp = None if self.amplitude is None else self.amplitude[idx]
        return StickSpectrum(self.freq_hz[idx], self.integral[idx], self.from_idx[idx],
                             self.to_idx[idx], self.coherence_order[idx], amp)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "StickSpectrum":
        t = list(transitions)
        return cls(np.array([x.freq_hz for x in t], dtype=float),
                   np.array([x.integral for x in t], dtype=float),
                   np.array([x.from_idx for x in t], dtype=int),
                   np.array([x.to_idx for x in t], dtype=int),
                   np.array([x.coherence_order for x in t], dtype=int))


@dataclass(frozen=True)
class SampledSpectrum:
    freq_axis_hz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        axis = np.asarray(self.freq_axis_hz, dtype=float)
        inten = np.asarray(self.intensity, dtype=float)
        if axis.ndim != 1 or axis.size < 2 or axis.shape != inten.shape:
            raise SpectralError("axis and intensity must be 1-D of equal length >= 2")
        check_axis(axis)
        object.__setattr__(self, "freq_axis_hz", axis)
        object.__setattr__(self, "intensity", inten)

    @property
    def spacing(self) -> float:
        return float(self.freq_axis_hz[1] - self.freq_axis_hz[0])


def check_axis(axis: np.ndarray) -> None:
    d = np.diff(axis)
    if np.any(d <= 0):
        raise SpectralError("frequency axis must be strictly increasing")
    if np.max(np.abs(d - d.mean())) > 1e-9 * abs(d.mean()) * max(1.0, axis.size):
        # accumulated rounding in linspace grows with length; anything beyond that is real
        raise SpectralError("frequency axis is not uniformly spaced")


def make_axis(lo: float, hi: float, spacing: float) -> np.ndarray:
    """Uniform float axis from ``lo`` to ``hi`` (inclusive, rounded to whole steps)."""
    if not spacing > 0 or not hi > lo:
        raise SpectralError("axis needs spacing > 0 and hi > lo")
    n = int(round((hi - lo) / spacing)) + 1
    return float(lo) + float(spacing) * np.arange(n, dtype=float)


@dataclass(frozen=True)
class LineWidths:
    """Per-spin T2* in seconds."""

    t2star_s: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t2star_s, dtype=float).reshape(-1)
        if np.any(~np.isfinite(t)) or np.any(t <= 0):
            raise SpectralError("T2* values must be positive")
        object.__setattr__(self, "t2star_s", t)


# ---------------------------------------------------------------------------
# diagonalization


def _blocks(pattern: np.ndarray) -> list[np.ndarray]:
    ncomp, labels = connected_components(pattern, directed=False)
    return [np.flatnonzero(labels == c) for c in range(ncomp)]


@functools.lru_cache(maxsize=64)
def sector_blocks(species: tuple[str, ...]) -> tuple[np.ndarray, ...]:
    """Invariant subspaces shared by every Hamiltonian of this species pattern."""
    gens = generators(species)
    pattern = np.any(gens != 0, axis=0) | np.eye(gens.shape[1], dtype=bool)
    return tuple(_blocks(pattern))


def _check_hermitian(h: np.ndarray) -> None:
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise SpectralError(f"operator must be square, got shape {h.shape}")
    if not np.allclose(h, h.conj().T, rtol=0, atol=HERMITIAN_ATOL * max(1.0, np.abs(h).max())):
        raise SpectralError("operator is not Hermitian")


def diagonalize(h: np.ndarray, blocks: Sequence[np.ndarray] | None = None) -> EigenSystem:
    """Full Hermitian eigendecomposition with a reproducible eigenvector choice.

    The operator is split into the connected components of its non-zero
    pattern (or the supplied ``blocks``) and each block is diagonalized
    separately, so exactly degenerate levels in different blocks never mix.
    Each eigenvector is phased so its largest component is real positive.
    Levels are sorted by energy; levels equal to within ``1e-12 * ||H||`` are
    ordered by the basis index of their largest component, then by block.
    """
    h = np.asarray(h)
    _check_hermitian(h)
    dim = h.shape[0]
    scale = float(np.abs(h).max()) if h.size else 0.0
    if blocks is None:
        tol = 1e-14 * max(scale, 1e-300)
        blocks = _blocks(np.abs(h) > tol)
    energies = np.empty(dim)
    vectors = np.zeros((dim, dim), dtype=h.dtype if np.iscomplexobj(h) else float)
    col = 0
    for b in blocks:
        sub = h[np.ix_(b, b)]
        try:
            e, v = np.linalg.eigh(sub)
        except np.linalg.LinAlgError as exc:
            raise SpectralError(f"eigensolver failed: {exc}") from exc
        m = b.size
        energies[col:col + m] = e
        vectors[b[:, None], np.arange(col, col + m)] = v
        col += m
    # phase convention
    pivot = np.argmax(np.abs(vectors) > (np.abs(vectors).max(axis=0) - 1e-9), axis=0)
    ph = vectors[pivot, np.arange(dim)]
    vectors = vectors * (np.abs(ph) / ph)[None, :]
    tol = 1e-12 * max(scale, 1e-300)
    order = np.argsort(energies, kind="stable")
    # group near-equal levels into clusters and break ties by pivot index
    e_sorted = energies[order]
    cluster = np.concatenate([[0], np.cumsum(np.diff(e_sorted) > tol)])
    cluster_of = np.empty(dim, dtype=int)
    cluster_of[order] = cluster
    final = np.lexsort((np.arange(dim), pivot, cluster_of))
    return EigenSystem(energies[final], vectors[:, final], scale)


def diagonalize_system(sys: SpinSystem, h: np.ndarray) -> EigenSystem:
    """:func:`diagonalize` using the magnetization sectors of ``sys``."""
    return diagonalize(h, sector_blocks(tuple(sys.species)))


# ---------------------------------------------------------------------------
# transitions


def detection_operator(sys: SpinSystem, observe: str) -> np.ndarray:
    """Sum of raising operators ``(X + iY) / 2`` over spins of ``observe``."""
    sites = sys.sites_of(observe)
    if not sites:
        raise SpectralError(f"species {observe!r} not present in system")
    return _detection(tuple(sys.species), observe).copy()


@functools.lru_cache(maxsize=64)
def _detection(species: tuple[str, ...], observe: str) -> np.ndarray:
    n = len(species)
    out = np.zeros((2**n, 2**n), dtype=complex)
    for k, s in enumerate(species):
        if s == observe:
            out += 0.5 * (pauli_embed("X", k, n) + 1j * pauli_embed("Y", k, n))
    out.setflags(write=False)
    return out


def _coherence(eig: EigenSystem, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    n = int(round(np.log2(eig.dim)))
    idx = np.arange(eig.dim)
    ones = np.array([bin(i).count("1") for i in idx])
    mz = (n - 2 * ones) / 2.0
    m = (np.abs(eig.vectors) ** 2).T @ mz
    return np.rint(m[p] - m[q]).astype(int)


def _check_dims(eig: EigenSystem, *mats: np.ndarray) -> None:
    for m in mats:
        if np.shape(m) != (eig.dim, eig.dim):
            raise SpectralError(f"matrix shape {np.shape(m)} does not match dimension {eig.dim}")


def _lines(eig: EigenSystem, amp: np.ndarray, integral: np.ndarray, rel: float,
           floor: float = 0.0) -> StickSpectrum:
    # ``floor`` is an absolute level below which values are rounding noise
    top = integral.max() if integral.size else 0.0
    if top <= floor:
        empty = np.zeros(0)
        return StickSpectrum(empty, empty, empty.astype(int), empty.astype(int),
                             empty.astype(int), empty.astype(complex))
    p, q = np.nonzero(integral >= max(rel * top, floor))
    freq = (eig.energies[p] - eig.energies[q]) / (2 * np.pi)
    return StickSpectrum(freq, integral[p, q], p, q, _coherence(eig, p, q), amp[p, q])


def stick_spectrum_thermal(eig: EigenSystem, detect: np.ndarray, rel: float = DROP_REL) -> StickSpectrum:
    """Lines ``(E_p - E_q) / 2pi`` with integral ``|<p|detect|q>|^2``."""
    _check_dims(eig, detect)
    v = eig.vectors
    dt = v.conj().T @ detect @ v
    integral = np.abs(dt) ** 2
    return _lines(eig, dt, integral, rel, ABS_FLOOR * np.linalg.norm(detect) ** 2)


def stick_spectrum_from_state(eig: EigenSystem, rho0: np.ndarray, detect: np.ndarray,
                              rel: float = DROP_REL) -> StickSpectrum:
    """Lines observed after preparing ``rho0``.

    In the eigenbasis the line at ``(E_p - E_q) / 2pi`` has complex amplitude
    ``rho_qp * detect_pq``; its integral is the modulus of that amplitude.
    """
    _check_dims(eig, rho0, detect)
    v = eig.vectors
    vh = v.conj().T
    dt = vh @ detect @ v
    rt = vh @ rho0 @ v
    amp = rt.T * dt
    return _lines(eig, amp, np.abs(amp), rel, ABS_FLOOR * np.linalg.norm(rho0) * np.linalg.norm(detect))


def top_n_indices(freq: np.ndarray, integral: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest integrals (ties: lower frequency), by ascending frequency."""
    if n < 1:
        raise SpectralError("n must be >= 1")
    if freq.size == 0:
        raise SpectralError("empty transition list")
    order = np.lexsort((freq, -integral))[:n]
    return order[np.lexsort((-integral[order], freq[order]))]


def top_n_sorted(transitions, n: int) -> tuple[np.ndarray, bool]:
    """Ascending frequencies of the ``n`` largest-integral transitions.

    Returns ``(freqs, short)``; ``short`` is true when fewer than ``n``
    transitions were available and all of them were returned.
    """
    if not isinstance(transitions, StickSpectrum):
        transitions = StickSpectrum.from_transitions(transitions)
    idx = top_n_indices(transitions.freq_hz, transitions.integral, n)
    return transitions.freq_hz[idx], idx.size < n


# ---------------------------------------------------------------------------
# line shapes


def transition_halfwidths(eig: EigenSystem, sticks: StickSpectrum, sys: SpinSystem,
                          widths: LineWidths, observe: str | None = None) -> np.ndarray:
    """Per-line Lorentzian half-width (Hz).

    Each line mixes the per-spin widths ``1/(pi T2*_j)`` with weights
    proportional to ``|<p|sigma+_j|q>|^2`` over the observed spins.
    """
    if widths.t2star_s.size != sys.n:
        raise SpectralError(f"need {sys.n} T2* values, got {widths.t2star_s.size}")
    if len(sticks) == 0:
        return np.zeros(0)
    sites = range(sys.n) if observe is None else sys.sites_of(observe)
    v = eig.vectors
    vp, vq = v[:, sticks.from_idx], v[:, sticks.to_idx]
    weights = []
    rates = []
    for j in sites:
        sp = 0.5 * (pauli_embed("X", j, sys.n) + 1j * pauli_embed("Y", j, sys.n))
        weights.append(np.abs(np.einsum("ik,ij,jk->k", vp.conj(), sp, vq)) ** 2)
        rates.append(1.0 / (np.pi * widths.t2star_s[j]))
    w = np.array(weights)
    tot = w.sum(axis=0)
    rates = np.array(rates)
    mean_rate = rates.mean()
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(tot > 0, (rates[:, None] * w).sum(axis=0) / tot, mean_rate)
    return lam


def lorentzian_sum(axis: np.ndarray, freqs: np.ndarray, integrals: np.ndarray,
                   halfwidths: np.ndarray) -> np.ndarray:
    """``sum_k a_k l_k / (l_k^2 + (nu - f_k)^2)``."""
    axis = np.asarray(axis, dtype=float)
    d = axis[:, None] - freqs[None, :]
    lam = halfwidths[None, :]
    return (integrals[None, :] * lam / (lam**2 + d**2)).sum(axis=1)


def synth_lineshape(sticks: StickSpectrum, halfwidths: np.ndarray, axis: np.ndarray) -> SampledSpectrum:
    """Sampled spectrum from sticks and per-line half-widths (Hz)."""
    halfwidths = np.asarray(halfwidths, dtype=float)
    if halfwidths.shape != sticks.freq_hz.shape or np.any(halfwidths <= 0):
        raise SpectralError("half-widths must be positive, one per line")
    axis = np.asarray(axis, dtype=float)
    check_axis(axis)
    return SampledSpectrum(axis, lorentzian_sum(axis, sticks.freq_hz, sticks.integral, halfwidths))


def simulate_lineshape(sys: SpinSystem, eig: EigenSystem, sticks: StickSpectrum,
                       widths: LineWidths, axis: np.ndarray, observe: str | None = None) -> SampledSpectrum:
    """Convenience: per-line widths from per-spin T2* followed by :func:`synth_lineshape`."""
    lam = transition_halfwidths(eig, sticks, sys, widths, observe)
    return synth_lineshape(sticks, lam, axis)


# ---------------------------------------------------------------------------
# gradients


@dataclass(frozen=True)
class EigenGradients:
    """``dE_k/dtheta`` in rad/s per Hz, shape ``(dim, n_params)``."""

    energy: np.ndarray
    degenerate: np.ndarray

    def transition(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """d(freq_hz)/dtheta for transitions ``p -> q``; shape ``(len(p), n_params)``."""
        return (self.energy[p] - self.energy[q]) / (2 * np.pi)


def eigenvalue_gradients(eig: EigenSystem, sys: SpinSystem, gap_rel: float = 1e-8) -> EigenGradients:
    """Hellmann-Feynman derivatives of every energy w.r.t. every parameter.

    Parameters are in canonical order (shifts, dipolar upper triangle, scalar
    upper triangle). Levels closer than ``gap_rel * ||H||`` to a neighbour
    within the same invariant block are flagged in ``degenerate``; their
    derivatives are not well defined and callers should fall back to finite
    differences.
    """
    gens = generators(tuple(sys.species))
    if gens.shape[1] != eig.dim:
        raise SpectralError("eigensystem dimension does not match the spin system")
    v = eig.vectors
    # <v_k|G|v_k> for all k and all generators
    grad = np.real(np.einsum("ik,pij,jk->kp", v.conj(), gens, v, optimize=True))
    degenerate = _degenerate_levels(eig, sys, gap_rel)
    return EigenGradients(grad, degenerate)


def _degenerate_levels(eig: EigenSystem, sys: SpinSystem, gap_rel: float) -> np.ndarray:
    blocks = sector_blocks(tuple(sys.species))
    owner = np.empty(eig.dim, dtype=int)
    for b, idx in enumerate(blocks):
        owner[idx] = b
    which = owner[np.argmax(np.abs(eig.vectors), axis=0)]
    tol = gap_rel * max(eig.scale, 1e-300)
    flags = np.zeros(eig.dim, dtype=bool)
    for b in range(len(blocks)):
        lev = np.flatnonzero(which == b)
        if lev.size < 2:
            continue
        e = eig.energies[lev]
        close = np.diff(e) < tol
        flags[lev[1:][close]] = True
        flags[lev[:-1][close]] = True
    return flags
