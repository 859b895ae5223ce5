"""Peak lists and peak picking on sampled spectra."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .spectral import SampledSpectrum, SpectralError, check_axis


@dataclass(frozen=True)
class PeakList:
    """Ascending peak frequencies (Hz) with integrals.

    ``short`` marks a list that holds fewer peaks than were requested.
    """

    freqs_hz: np.ndarray
    integrals: np.ndarray | None = None
    noise_sigma_hz: np.ndarray | None = None
    short: bool = False

    def __post_init__(self):
        f = np.asarray(self.freqs_hz, dtype=float).reshape(-1)
        a = np.ones_like(f) if self.integrals is None else np.asarray(self.integrals, dtype=float).reshape(-1)
        if a.shape != f.shape:
            raise ValueError("frequencies and integrals must have equal length")
        if np.any(a < 0):
            raise ValueError("integrals must be non-negative")
        order = np.argsort(f, kind="stable")
        object.__setattr__(self, "freqs_hz", f[order])
        object.__setattr__(self, "integrals", a[order])
        if self.noise_sigma_hz is not None:
            s = np.asarray(self.noise_sigma_hz, dtype=float).reshape(-1)
            object.__setattr__(self, "noise_sigma_hz", s[order])

    def __len__(self) -> int:
        return self.freqs_hz.size

    def with_freqs(self, freqs) -> "PeakList":
        """Same integrals, new frequencies (re-sorted)."""
        return replace(self, freqs_hz=np.sort(np.asarray(freqs, dtype=float)))


def _local_maxima(y: np.ndarray) -> np.ndarray:
    # plateaus count once, at their left edge
    left = np.concatenate([[False], y[1:] > y[:-1]])
    right = np.concatenate([y[:-1] >= y[1:], [False]])
    return np.flatnonzero(left & right)


def _parabolic(x: np.ndarray, y: np.ndarray, i: int) -> float:
    """Vertex of the parabola through the three log-intensity samples around ``i``."""
    if i == 0 or i == y.size - 1:
        return float(x[i])
    ya, yb, yc = y[i - 1], y[i], y[i + 1]
    if min(ya, yb, yc) > 0:
        ya, yb, yc = np.log(ya), np.log(yb), np.log(yc)
    denom = ya - 2 * yb + yc
    if denom >= 0:
        return float(x[i])
    delta = 0.5 * (ya - yc) / denom
    return float(x[i] + np.clip(delta, -0.5, 0.5) * (x[1] - x[0]))


def pick_peaks(spec: SampledSpectrum, n: int, min_prominence: float = 0.02,
               window_pts: int | None = None) -> PeakList:
    """The ``n`` largest-integral peaks of ``spec``, sorted by frequency.

    Peaks are local maxima above ``min_prominence * max(intensity)``. The
    frequency of each is refined by a three-point parabola on log intensity.
    Its integral is the trapezoid area over ``window_pts`` samples either side
    of the apex, never crossing the valley to a neighbouring peak. By default
    the window is eight measured half-widths.

    When fewer than ``n`` peaks exist all of them are returned with
    ``short=True``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < min_prominence < 1:
        raise ValueError("min_prominence must lie in (0, 1)")
    x, y = spec.freq_axis_hz, spec.intensity
    check_axis(x)
    if y.size < 3 or not np.any(y > 0):
        raise SpectralError("spectrum is empty")
    cand = _local_maxima(y)
    cand = cand[y[cand] > min_prominence * y.max()]
    if cand.size == 0:
        return PeakList(np.zeros(0), np.zeros(0), short=True)
    # valleys between consecutive maxima bound every integration window
    valleys = [int(a + np.argmin(y[a:b + 1])) for a, b in zip(cand[:-1], cand[1:])]
    lefts = [0] + valleys
    rights = valleys + [y.size - 1]
    freqs, areas = [], []
    for i, lo_v, hi_v in zip(cand, lefts, rights):
        if window_pts is None:
            half = y[i] / 2
            k = i
            while k > lo_v and y[k] > half:
                k -= 1
            m = i
            while m < hi_v and y[m] > half:
                m += 1
            w = int(np.ceil(8 * max(m - k, 2) / 2))
        else:
            w = int(window_pts)
        a, b = max(lo_v, i - w), min(hi_v, i + w)
        freqs.append(_parabolic(x, y, i))
        areas.append(float(np.trapezoid(y[a:b + 1], x[a:b + 1])) if b > a else 0.0)
    freqs, areas = np.array(freqs), np.array(areas)
    keep = np.lexsort((freqs, -areas))[:n]
    return PeakList(freqs[keep], np.maximum(areas[keep], 0.0), short=keep.size < n)
