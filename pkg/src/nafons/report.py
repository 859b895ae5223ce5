"""Key-value result reports and run manifests.

A report is a sectioned text file. Scalar facts are ``key = value`` lines and
tables are whitespace-separated rows headed by a ``#`` comment. Later
commands (refine, errors) replace their own sections and leave the rest
intact, so the file always describes one fit.
"""

from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .fitting import FitProblem, FitResult, equivalent_solutions
from .io import FormatError, _fmt, file_digest, read_sections
from .refine import ErrorEstimate, RefineResult
from .spin_model import HamiltonianParams, SpinSystem, all_param_refs


class Report:
    """Ordered ``{section: [lines]}`` with text round trip."""

    def __init__(self):
        self.sections: dict[str, list[str]] = {}

    def set(self, name: str, lines: list[str]) -> None:
        self.sections[name] = list(lines)

    def drop_prefix(self, prefix: str) -> None:
        for k in [k for k in self.sections if k.startswith(prefix)]:
            del self.sections[k]

    def text(self) -> str:
        out = []
        for name, lines in self.sections.items():
            out.append(f"[{name}]")
            out.extend(lines)
            out.append("")
        return "\n".join(out)

    def write(self, path) -> None:
        Path(path).write_text(self.text(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Report":
        path = Path(path)
        if not path.exists():
            raise FormatError(f"{path}: no such report")
        rep = cls()
        current = None
        for raw in path.read_text(encoding="utf-8").splitlines():
            line = raw.rstrip()
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                rep.sections[current] = []
            elif current is not None and line:
                rep.sections[current].append(line)
        # validate the structure with the common parser
        read_sections(rep.text(), str(path))
        return rep

    def values(self, name: str) -> dict[str, str]:
        """``key = value`` pairs of a section."""
        out = {}
        for line in self.sections.get(name, []):
            if line.startswith("#"):
                continue
            key, eq, val = line.partition("=")
            if eq:
                out[key.strip()] = val.strip()
        return out


def _kv(key: str, val) -> str:
    if isinstance(val, (bool, np.bool_)):
        val = "true" if val else "false"
    elif isinstance(val, (float, np.floating)):
        val = _fmt(val)
    return f"{key} = {val}"


def hamiltonian_lines(sys: SpinSystem, params: HamiltonianParams) -> list[str]:
    vec = params.to_vector()
    return [_kv(r.name(sys), float(v)) for r, v in zip(all_param_refs(sys.n), vec)]


def parse_hamiltonian(rep: Report, sys: SpinSystem, section: str = "hamiltonian") -> HamiltonianParams:
    vals = rep.values(section)
    vec = []
    for r in all_param_refs(sys.n):
        name = r.name(sys)
        if name not in vals:
            raise FormatError(f"report section [{section}] lacks {name}")
        vec.append(float(vals[name]))
    return HamiltonianParams.from_vector(vec, sys.n)


def parse_spins(rep: Report) -> SpinSystem:
    vals = rep.values("spins")
    if not vals:
        raise FormatError("report has no [spins] section")
    return SpinSystem.from_pairs(list(vals.items()))


def fit_report(prob: FitProblem, res: FitResult, problem_file: str, problem_digest: str,
               cfg_items: dict) -> Report:
    """Report of a frequency fit; deterministic given the inputs and seed."""
    rep = Report()
    sys = prob.sys
    rep.set("fit", [
        _kv("converged", res.converged),
        _kv("rms_hz", res.rms_hz),
        _kv("residual_hz2", res.residual_unweighted),
        _kv("n_lines", res.n_lines),
        _kv("loops_used", res.loops_used),
        _kv("best_restart", res.best_restart),
        _kv("seed", res.seed),
        _kv("problem", problem_file),
        _kv("problem_sha256", problem_digest),
    ] + [_kv(k, v) for k, v in cfg_items.items()])
    rep.set("spins", [f"{s.label} = {s.species}" for s in sys.spins])
    rep.set("parameters", [_kv(n, float(v)) for n, v in zip(res.names, res.x_star)])
    rep.set("hamiltonian", hamiltonian_lines(sys, prob.params_at(res.x_star)))
    rows = ["# restart value_hz2 rms_hz loops converged integral_mismatch"]
    for o in res.restarts:
        rows.append(f"{o.index} {_fmt(o.value)} {_fmt(o.rms_hz)} {o.loops} "
                    f"{'true' if o.converged else 'false'} {_fmt(o.integral_mismatch)}")
    rep.set("restarts", rows)
    for t, sim, pairs, per in zip(prob.targets, res.sim_freqs, res.assignment, res.per_target_residuals):
        rows = [f"# target {t.name or '-'} observe={t.observe} prep={t.prep} residual_hz2={_fmt(per)}",
                "# exp_hz sim_hz residual_hz level_from level_to"]
        exp = t.peaks.freqs_hz
        for j in range(exp.size):
            if j < sim.size:
                rows.append(f"{_fmt(exp[j])} {_fmt(sim[j])} {_fmt(exp[j] - sim[j])} "
                            f"{int(pairs[j, 0])} {int(pairs[j, 1])}")
            else:
                rows.append(f"{_fmt(exp[j])} nan nan -1 -1")
        rep.set(f"assignment {t.name or len(rep.sections)}", rows)
    alternatives = equivalent_solutions(prob, res.x_star)
    if alternatives:
        rows = ["# parameter sets that reproduce the same frequencies exactly",
                "# symmetry name value"]
        for label, y in alternatives:
            rows += [f"{label} {n} {_fmt(float(v))}" for n, v in zip(res.names, y)]
        rep.set("equivalent solutions", rows)
    rep.set("certificate", ["# weighted objective values at x* for fresh random weights"]
            + [_fmt(v) for v in res.certificate])
    return rep


def add_refine(rep: Report, sys: SpinSystem, res: RefineResult) -> None:
    rep.drop_prefix("refine")
    rep.set("refine", [
        _kv("rss", res.rss),
        _kv("iterations", res.iterations),
        _kv("aborted", res.aborted),
        _kv("max_rel_change", res.max_rel_change),
    ] + [_kv(f"amplitude_{i + 1}", a) for i, a in enumerate(res.amplitudes)]
      + [_kv(f"baseline_{i + 1}", b) for i, b in enumerate(res.baselines)])
    rep.set("refine t2star_ms", [_kv(lab, float(t * 1e3)) for lab, t in zip(sys.labels, res.widths.t2star_s)])
    rep.set("refine hamiltonian", hamiltonian_lines(sys, res.params))
    rep.set("refine rel_change", [_kv(n, float(c)) for n, c in zip(res.names, res.rel_param_change)])


def add_errors(rep: Report, x_star: np.ndarray, est: ErrorEstimate, seed) -> None:
    rep.drop_prefix("errors")
    rep.set("errors", [
        _kv("noise_sigma_hz", est.noise_sigma_hz),
        _kv("trials", est.trials),
        _kv("failed", est.failed),
        _kv("seed", seed),
    ])
    rows = ["# name value std_hz table"]
    for n, v, s in zip(est.names, x_star, est.std):
        rows.append(f"{n} {_fmt(v)} {_fmt(s)} {v:.2f}({s:.2g})")
    rep.set("errors table", rows)


def parameters_of(rep: Report, prob: FitProblem) -> np.ndarray:
    vals = rep.values("parameters")
    try:
        return np.array([float(vals[n]) for n in prob.names()])
    except KeyError as exc:
        raise FormatError(f"report lacks parameter {exc.args[0]}") from None


@dataclass
class RunManifest:
    """Provenance of one command run."""

    command: list[str]
    seed: int | None
    config_sha256: str | None
    wall_s: float
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(cls, command, seed, config_path, wall_s, inputs, outputs) -> "RunManifest":
        versions = {"python": platform.python_version()}
        for pkg in ("numpy", "scipy", "artifact"):
            try:
                versions[pkg] = metadata.version(pkg)
            except metadata.PackageNotFoundError:
                versions[pkg] = "unknown"
        digest = file_digest(config_path) if config_path else None
        return cls(list(command), seed, digest, wall_s,
                   {str(p): file_digest(p) for p in inputs},
                   {str(p): file_digest(p) for p in outputs if Path(p).exists()}, versions)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")

