"""Plain-text file formats.

All files are UTF-8, ``#`` starts a comment, fields are whitespace separated.
Sectioned files (spin systems, fit problems) use ``[section]`` headers.
"""

from __future__ import annotations

import hashlib
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .spin_model import HamiltonianParams, SpinModel, SpinModelError, SpinSystem
from .spectral import SampledSpectrum, SpectralError, StickSpectrum


class FormatError(ValueError):
    """Malformed input file; the message carries the file name and line number."""


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def read_sections(text: str, source: str = "<string>") -> dict[str, list[tuple[int, list[str]]]]:
    """Split a sectioned file into ``{section: [(lineno, fields), ...]}``."""
    out: dict[str, list[tuple[int, list[str]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise FormatError(f"{source}:{lineno}: bad section header {line!r}")
            current = line[1:-1].strip()
            if current in out:
                raise FormatError(f"{source}:{lineno}: duplicate section [{current}]")
            out[current] = []
            continue
        if current is None:
            raise FormatError(f"{source}:{lineno}: data before the first section header")
        out[current].append((lineno, line.split()))
    return out


def _float(tok: str, source: str, lineno: int) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise FormatError(f"{source}:{lineno}: expected a number, got {tok!r}") from None
    if not np.isfinite(val):
        raise FormatError(f"{source}:{lineno}: non-finite value {tok!r}")
    return val


def parse_spin_model(sections: dict, source: str = "<string>") -> SpinModel:
    if "spins" not in sections:
        raise FormatError(f"{source}: missing [spins] section")
    pairs = []
    for lineno, f in sections["spins"]:
        if len(f) != 2:
            raise FormatError(f"{source}:{lineno}: expected 'label species'")
        pairs.append((f[0], f[1]))
    try:
        sys = SpinSystem.from_pairs(pairs)
    except SpinModelError as exc:
        raise FormatError(f"{source}: {exc}") from None
    n = sys.n

    def index(label, lineno):
        try:
            return sys.index(label)
        except SpinModelError:
            raise FormatError(f"{source}:{lineno}: unknown spin label {label!r}") from None

    shifts = np.zeros(n)
    for lineno, f in sections.get("shifts_hz", []):
        if len(f) != 2:
            raise FormatError(f"{source}:{lineno}: expected 'label value'")
        shifts[index(f[0], lineno)] = _float(f[1], source, lineno)
    mats = {}
    for name in ("dipolar_hz", "scalar_hz"):
        m = np.zeros((n, n))
        seen = set()
        for lineno, f in sections.get(name, []):
            if len(f) != 3:
                raise FormatError(f"{source}:{lineno}: expected 'label label value'")
            j, k = index(f[0], lineno), index(f[1], lineno)
            if j == k:
                raise FormatError(f"{source}:{lineno}: a spin cannot couple to itself")
            key = (min(j, k), max(j, k))
            if key in seen:
                raise FormatError(f"{source}:{lineno}: coupling {f[0]} {f[1]} given twice")
            seen.add(key)
            m[j, k] = m[k, j] = _float(f[2], source, lineno)
        mats[name] = m
    return SpinModel(sys, HamiltonianParams(shifts, mats["dipolar_hz"], mats["scalar_hz"]))


def load_spin_model(path) -> SpinModel:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_spin_model(read_sections(text, str(path)), str(path))


def builtin_system(name: str = "23dfba") -> SpinModel:
    """Load a shipped spin system, e.g. ``23dfba``."""
    ref = resources.files("nafons.data").joinpath(f"{name}.spinsys")
    text = ref.read_text(encoding="utf-8")
    return parse_spin_model(read_sections(text, f"{name}.spinsys"), f"{name}.spinsys")


def format_spin_model(model: SpinModel) -> str:
    sys, p = model.system, model.params
    lines = ["[spins]"]
    lines += [f"{s.label} {s.species}" for s in sys.spins]
    lines += ["", "[shifts_hz]"]
    lines += [f"{lab} {_fmt(v)}" for lab, v in zip(sys.labels, p.shifts_hz)]
    for name, m in (("dipolar_hz", p.dipolar_hz), ("scalar_hz", p.scalar_hz)):
        lines += ["", f"[{name}]"]
        for j in range(sys.n):
            for k in range(j + 1, sys.n):
                if m[j, k] != 0:
                    lines.append(f"{sys.labels[j]} {sys.labels[k]} {_fmt(m[j, k])}")
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# column files


def read_columns(path, ncols: int) -> np.ndarray:
    """Read a numeric table with exactly ``ncols`` columns."""
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        f = line.split()
        if len(f) != ncols:
            raise FormatError(f"{path}:{lineno}: expected {ncols} columns, got {len(f)}")
        rows.append([_float(t, str(path), lineno) for t in f])
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.array(rows)


def write_columns(path, columns: Iterable[np.ndarray], header: str = "") -> None:
    cols = [np.asarray(c) for c in columns]
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    for row in zip(*cols):
        lines.append(" ".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sampled_spectrum(path) -> SampledSpectrum:
    data = read_columns(path, 2)
    try:
        return SampledSpectrum(data[:, 0], data[:, 1])
    except SpectralError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_sampled_spectrum(path, spec: SampledSpectrum, header: str = "freq_hz intensity") -> None:
    write_columns(path, [spec.freq_axis_hz, spec.intensity], header)


def write_sticks(path, sticks: StickSpectrum, header: str = "freq_hz integral coherence_order") -> None:
    s = sticks.sorted()
    write_columns(path, [s.freq_hz, s.integral, s.coherence_order.astype(int)], header)


def read_sticks(path) -> StickSpectrum:
    data = read_columns(path, 3)
    idx = np.full(len(data), -1)
    return StickSpectrum(data[:, 0], data[:, 1], idx, idx, data[:, 2].astype(int))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
