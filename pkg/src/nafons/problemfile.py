"""Text form of fit problems.

A problem file is a spin-system file (the ``[spins]``, ``[shifts_hz]``,
``[dipolar_hz]`` and ``[scalar_hz]`` sections give the fixed values) plus:

``[free]``
    one parameter name per line: ``nu[H1]``, ``D[H1,H2]`` or ``J[H1,H2]``.
``[bounds]``
    ``name lo hi``; a line ``* lo hi`` sets the default (otherwise +-2500 Hz).
``[start]``
    optional ``name value``; unlisted free parameters start at 0 clipped into
    their bounds.
``[targets]``
    one spectrum per line as ``key=value`` fields: ``peaks=FILE`` (required,
    relative to the problem file), ``observe=SPECIES`` (required),
    ``mode=decoupled|coupled`` (default decoupled), ``prep=thermal|eig:i,j``
    and ``name=TEXT``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fitting import FitError, FitProblem, Prep, SpectrumTarget
from .io import FormatError, _float, _fmt, format_spin_model, parse_spin_model, read_columns, read_sections
from .peaks import PeakList
from .spin_model import ParamRef, SpinModel, SpinModelError

DEFAULT_BOUND_HZ = 2500.0


def read_peaks(path) -> PeakList:
    """Two-column ``freq_hz integral`` peak file."""
    data = read_columns(path, 2)
    try:
        return PeakList(data[:, 0], data[:, 1])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_peaks(path, peaks: PeakList, header: str = "freq_hz integral") -> None:
    from .io import write_columns
    write_columns(path, [peaks.freqs_hz, peaks.integrals], header)


def _param(text: str, sys, source: str, lineno: int) -> ParamRef:
    try:
        return ParamRef.parse(text, sys)
    except SpinModelError as exc:
        raise FormatError(f"{source}:{lineno}: {exc}") from None


def parse_problem(text: str, source: str = "<string>", base_dir: Path | None = None,
                  peaks_override: list | None = None,
                  default_bounds: tuple[float, float] | None = None) -> FitProblem:
    """Build a :class:`FitProblem` from problem-file text.

    ``peaks_override`` replaces the targets' peak files in order;
    ``default_bounds`` replaces the ``*`` line of ``[bounds]``.
    """
    sections = read_sections(text, source)
    model = parse_spin_model(sections, source)
    sys = model.system
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    free, seen = [], set()
    for lineno, f in sections.get("free", []):
        if len(f) != 1:
            raise FormatError(f"{source}:{lineno}: expected one parameter name")
        ref = _param(f[0], sys, source, lineno)
        if ref in seen:
            raise FormatError(f"{source}:{lineno}: {f[0]} listed twice")
        seen.add(ref)
        free.append(ref)
    if not free:
        raise FormatError(f"{source}: [free] lists no parameters")
    dflt = (-DEFAULT_BOUND_HZ, DEFAULT_BOUND_HZ)
    explicit = {}
    for lineno, f in sections.get("bounds", []):
        if len(f) != 3:
            raise FormatError(f"{source}:{lineno}: expected 'name lo hi'")
        lo, hi = _float(f[1], source, lineno), _float(f[2], source, lineno)
        if lo > hi:
            raise FormatError(f"{source}:{lineno}: lower bound exceeds upper bound")
        if f[0] == "*":
            dflt = (lo, hi)
        else:
            ref = _param(f[0], sys, source, lineno)
            if ref not in seen:
                raise FormatError(f"{source}:{lineno}: {f[0]} is not a free parameter")
            explicit[ref] = (lo, hi)
    if default_bounds is not None:
        dflt = tuple(default_bounds)
    bounds = np.array([explicit.get(r, dflt) for r in free], dtype=float)
    start = np.clip(np.zeros(len(free)), bounds[:, 0], bounds[:, 1])
    for lineno, f in sections.get("start", []):
        if len(f) != 2:
            raise FormatError(f"{source}:{lineno}: expected 'name value'")
        ref = _param(f[0], sys, source, lineno)
        if ref not in seen:
            raise FormatError(f"{source}:{lineno}: {f[0]} is not a free parameter")
        i = free.index(ref)
        start[i] = np.clip(_float(f[1], source, lineno), bounds[i, 0], bounds[i, 1])
    rows = sections.get("targets", [])
    if not rows:
        raise FormatError(f"{source}: [targets] lists no spectra")
    if peaks_override is not None and len(peaks_override) != len(rows):
        raise FormatError(f"{source}: {len(rows)} targets but {len(peaks_override)} peak files given")
    targets = []
    for m, (lineno, f) in enumerate(rows):
        kv = {}
        for tok in f:
            key, eq, val = tok.partition("=")
            if not eq or key not in ("peaks", "observe", "mode", "prep", "name"):
                raise FormatError(f"{source}:{lineno}: bad target field {tok!r}")
            kv[key] = val
        if "observe" not in kv or ("peaks" not in kv and peaks_override is None):
            raise FormatError(f"{source}:{lineno}: a target needs peaks= and observe=")
        if kv["observe"] not in sys.species:
            raise FormatError(f"{source}:{lineno}: species {kv['observe']!r} not in [spins]")
        mode = kv.get("mode", "decoupled")
        if mode not in ("decoupled", "coupled"):
            raise FormatError(f"{source}:{lineno}: mode must be decoupled or coupled")
        try:
            prep = Prep.parse(kv.get("prep", "thermal"), kv["observe"])
        except FitError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
        path = peaks_override[m] if peaks_override is not None else base_dir / kv["peaks"]
        peaks = read_peaks(path)
        targets.append(SpectrumTarget(peaks, kv["observe"], mode == "decoupled", prep,
                                      kv.get("name", f"target{m + 1}")))
    try:
        return FitProblem(sys, free, model.params, bounds, targets, start)
    except (FitError, SpinModelError) as exc:
        raise FormatError(f"{source}: {exc}") from None


def load_problem(path, peaks_override=None, default_bounds=None) -> FitProblem:
    path = Path(path)
    return parse_problem(path.read_text(encoding="utf-8"), str(path), path.parent,
                         peaks_override, default_bounds)


def format_problem(prob: FitProblem, peak_files: list[str]) -> str:
    """Problem-file text for ``prob``; ``peak_files`` name each target's peak file."""
    sys = prob.sys
    out = [format_spin_model(SpinModel(sys, prob.fixed)).rstrip("\n"), "", "[free]"]
    out += [r.name(sys) for r in prob.free]
    out += ["", "[bounds]"]
    out += [f"{r.name(sys)} {_fmt(lo)} {_fmt(hi)}" for r, (lo, hi) in zip(prob.free, prob.bounds)]
    out += ["", "[start]"]
    out += [f"{r.name(sys)} {_fmt(v)}" for r, v in zip(prob.free, prob.start)]
    out += ["", "[targets]"]
    for t, pf in zip(prob.targets, peak_files):
        fields = [f"peaks={pf}", f"observe={t.observe}",
                  f"mode={'decoupled' if t.decouple else 'coupled'}", f"prep={t.prep}"]
        if t.name:
            fields.append(f"name={t.name.replace(' ', '_')}")
        out.append(" ".join(fields))
    return "\n".join(out) + "\n"
