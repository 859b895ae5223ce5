"""Command-line interface.

Subcommands: ``simulate``, ``pick``, ``fit``, ``fit-joint``, ``refine`` and
``errors``. Exit status is 0 on success, 1 on usage or input-format errors and
2 when a fit does not converge, a peak list comes up short or a refinement or
error estimate gives up.
"""

from __future__ import annotations

import argparse
import logging
import secrets
import sys
import time
from pathlib import Path

import numpy as np

from . import io as nio
from .fitting import (FitError, NafonsConfig, Objective, Prep, SolverSettings, build_joint_hetero_problem,
                      coherence_state, nafons_fit)
from .peaks import pick_peaks
from .problemfile import format_problem, load_problem, read_peaks, write_peaks
from .refine import LineshapeTarget, estimate_errors, lineshape_refine
from .report import (Report, RunManifest, add_errors, add_refine, fit_report, parameters_of,
                     parse_hamiltonian, parse_spins)
from .spectral import (LineWidths, SpectralError, detection_operator, diagonalize_system, make_axis,
                       simulate_lineshape, stick_spectrum_from_state, stick_spectrum_thermal)
from .spin_model import SpinModelError, build_hamiltonian, restrict_to_species

log = logging.getLogger("nafons")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


def _load_system(spec: str):
    """A spin-system file, or the name of a shipped one."""
    if Path(spec).exists():
        return nio.load_spin_model(spec)
    try:
        return nio.builtin_system(Path(spec).name.removesuffix(".spinsys"))
    except FileNotFoundError:
        raise UsageError(f"no such spin-system file: {spec}") from None


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None


def _t2star(text: str | None, n: int) -> LineWidths:
    vals = _floats(text, "T2* list") if text else [50.0]
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise UsageError(f"need 1 or {n} T2* values, got {len(vals)}")
    return LineWidths(np.array(vals) * 1e-3)


def _seed(arg) -> int:
    return int(arg) if arg is not None else secrets.randbits(32)


def _manifest(args, seed, config, t0, inputs, outputs, path):
    RunManifest.create(sys.argv if args.argv is None else args.argv, seed, config,
                       time.perf_counter() - t0, inputs, outputs).write(path)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    model = _load_system(args.system)
    s, p = model.system, model.params
    if args.observe not in s.species:
        raise UsageError(f"species {args.observe!r} not in the system")
    full_sys, full_p = s, p
    if args.decouple:
        s, p = restrict_to_species(s, p, {args.observe})
    eig = diagonalize_system(s, build_hamiltonian(s, p))
    detect = detection_operator(s, args.observe)
    prep = Prep.parse(args.prep, args.observe)
    if prep.kind == "thermal":
        sticks = stick_spectrum_thermal(eig, detect)
    else:
        sites = [full_sys.index(lab) for lab in s.labels]
        rho = coherence_state(full_sys, full_p, prep, sites)
        sticks = stick_spectrum_from_state(eig, rho, detect)
        if len(sticks) == 0:
            raise FitError(f"preparation {prep} gives no observable lines")
    widths = _t2star(args.t2star, s.n)
    if args.axis:
        lo, hi, step = _floats(args.axis, "axis")
    else:
        pad = 50.0
        lo, hi, step = sticks.freq_hz.min() - pad, sticks.freq_hz.max() + pad, 0.5
    spec = simulate_lineshape(s, eig, sticks, widths, make_axis(lo, hi, step), observe=args.observe)
    out = Path(args.out)
    nio.write_sticks(out.with_suffix(".sticks"), sticks)
    nio.write_sampled_spectrum(out.with_suffix(".spec"), spec)
    print(f"{len(sticks)} lines -> {out.with_suffix('.sticks')}, {spec.intensity.size} points -> "
          f"{out.with_suffix('.spec')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pick


def cmd_pick(args) -> int:
    spec = nio.read_sampled_spectrum(args.spectrum)
    peaks = pick_peaks(spec, args.n, args.min_prominence, args.window_pts)
    write_peaks(args.out, peaks)
    rng = (peaks.integrals.max() / peaks.integrals.min()) if len(peaks) and peaks.integrals.min() > 0 else float("inf")
    print(f"{len(peaks)} peaks -> {args.out}; integral dynamic range {rng:.3g}")
    if peaks.short:
        print(f"warning: only {len(peaks)} of {args.n} requested peaks found", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# fits


def _config(args) -> NafonsConfig:
    return NafonsConfig(M=args.loops, p_zero=args.p_zero, seed=_seed(args.seed), tol_hz=args.tol,
                        max_wall_time=args.max_wall_time, restarts=args.restarts, mode=args.mode,
                        jitter_frac=args.jitter, pair_moves=args.pair_moves, workers=args.workers)


def _cfg_items(cfg: NafonsConfig) -> dict:
    return {"loops": cfg.M, "p_zero": cfg.p_zero, "tol_hz": cfg.tol_hz, "restarts": cfg.restarts,
            "mode": cfg.mode, "jitter_frac": cfg.jitter_frac, "pair_moves": cfg.pair_moves}


def _run_fit(args, prob, problem_path: Path, inputs, t0, extra=None) -> int:
    cfg = _config(args)
    if prob.n_lines < prob.n_free:
        print(f"warning: {prob.n_lines} lines for {prob.n_free} free parameters; "
              "the problem is underdetermined", file=sys.stderr)
    res = nafons_fit(prob, cfg)
    report_path = Path(args.report)
    items = {**_cfg_items(cfg), **(extra or {})}
    rep = fit_report(prob, res, str(problem_path.resolve()), nio.file_digest(problem_path), items)
    rep.write(report_path)
    _manifest(args, cfg.seed, problem_path, t0, inputs, [report_path], report_path.with_suffix(".manifest.json"))
    for name, v in zip(res.names, res.x_star):
        print(f"{name:>12s} = {v:12.4f}")
    state = "converged" if res.converged else "NOT converged"
    print(f"{state}: rms {res.rms_hz:.4g} Hz over {res.n_lines} lines; report -> {report_path}")
    return EXIT_OK if res.converged else EXIT_FAIL


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    bounds = tuple(_floats(args.bounds, "bounds")) if args.bounds else None
    if bounds is not None and len(bounds) != 2:
        raise UsageError("--bounds takes LO,HI")
    prob = load_problem(args.problem, args.peaks, bounds)
    inputs = [args.problem] + list(args.peaks or [])
    extra = {"peaks": " ".join(str(Path(p).resolve()) for p in args.peaks)} if args.peaks else {}
    if bounds is not None:
        extra["bounds"] = f"{bounds[0]!r},{bounds[1]!r}"
    return _run_fit(args, prob, Path(args.problem), inputs, t0, extra)


def cmd_fit_joint(args) -> int:
    t0 = time.perf_counter()
    model = _load_system(args.system)
    known = nio.load_spin_model(args.known) if args.known else model
    if known.system != model.system:
        raise UsageError("--known must describe the same spins as --system")
    subs, files = [], []
    for prep_text, path in args.sub:
        prep = Prep.parse(prep_text, args.observe)
        subs.append((prep, read_peaks(path)))
        files.append(path)
    prob = build_joint_hetero_problem(model.system, known.params, subs, args.shift_window,
                                      observe=args.observe, coupling_bound_hz=args.coupling_bound)
    report_path = Path(args.report)
    problem_path = report_path.with_suffix(".problem")
    problem_path.write_text(format_problem(prob, [str(Path(f).resolve()) for f in files]), encoding="utf-8")
    inputs = [p for p in (args.system, args.known) if p and Path(p).exists()] + files
    return _run_fit(args, prob, problem_path, inputs, t0)


def _prior(report_path):
    rep = Report.read(report_path)
    info = rep.values("fit")
    if "problem" not in info:
        raise nio.FormatError(f"{report_path}: not a fit report")
    return rep, info


def cmd_refine(args) -> int:
    t0 = time.perf_counter()
    rep, _ = _prior(args.report)
    spins = parse_spins(rep)
    params = parse_hamiltonian(rep, spins)
    targets = []
    for spec in args.spectrum:
        observe, mode, path = (spec.split(":", 2) + ["", ""])[:3]
        if mode not in ("decoupled", "coupled") or not path:
            raise UsageError(f"--spectrum takes SPECIES:decoupled|coupled:FILE, got {spec!r}")
        targets.append(LineshapeTarget(nio.read_sampled_spectrum(path), observe, mode == "decoupled"))
    widths = _t2star(args.t2star, spins.n)
    res = lineshape_refine(spins, params, widths, targets)
    add_refine(rep, spins, res)
    rep.write(args.report)
    outputs = [args.report]
    if args.out:
        for k, (t, fit) in enumerate(zip(targets, res.fitted), 1):
            for tag, s in (("exp", t.spectrum), ("sim", fit)):
                path = Path(f"{args.out}.{k}.{t.observe}.{tag}.spec")
                nio.write_sampled_spectrum(path, s)
                outputs.append(path)
    _manifest(args, None, None, t0, [p.split(":", 2)[2] for p in args.spectrum], outputs,
              Path(args.report).with_suffix(".refine.manifest.json"))
    for lab, t in zip(spins.labels, res.widths.t2star_s):
        print(f"T2*[{lab}] = {t * 1e3:.2f} ms")
    print(f"rss {res.rss:.4g}; largest relative parameter change {res.max_rel_change:.3g}")
    return EXIT_FAIL if res.aborted else EXIT_OK


def cmd_errors(args) -> int:
    t0 = time.perf_counter()
    rep, info = _prior(args.report)
    problem = Path(info["problem"])
    if not problem.exists():
        raise nio.FormatError(f"problem file {problem} of the prior fit is missing")
    if nio.file_digest(problem) != info.get("problem_sha256"):
        raise nio.FormatError(f"problem file {problem} changed since the fit")
    override = info["peaks"].split() if info.get("peaks") else None
    bounds = tuple(_floats(info["bounds"], "bounds")) if info.get("bounds") else None
    prob = load_problem(problem, override, bounds)
    x_star = parameters_of(rep, prob)
    seed = _seed(args.seed)
    try:
        est = estimate_errors(prob, x_star, args.noise, args.trials, np.random.default_rng(seed),
                              SolverSettings(), workers=args.workers)
    except FitError as exc:
        print(f"error estimate failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    add_errors(rep, x_star, est, seed)
    rep.write(args.report)
    _manifest(args, seed, problem, t0, [problem], [args.report],
              Path(args.report).with_suffix(".errors.manifest.json"))
    for n, v, s in zip(est.names, x_star, est.std):
        print(f"{n:>12s} = {v:.2f}({s:.2g})")
    print(f"{est.trials} trials used, {est.failed} dropped")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _fit_flags(p):
    p.add_argument("--loops", type=int, default=50, help="perturbation rounds M (default 50)")
    p.add_argument("--p-zero", type=float, default=0.5, help="probability of a zero weight")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (recorded if omitted)")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--mode", choices=("loop", "random_walk"), default="loop")
    p.add_argument("--tol", type=float, default=0.05, help="per-line RMS tolerance in Hz")
    p.add_argument("--max-wall-time", type=float, default=None, help="seconds")
    p.add_argument("--jitter", type=float, default=1.0,
                   help="start jitter of restarts > 0 as a fraction of each half range")
    p.add_argument("--no-pair-moves", dest="pair_moves", action="store_false",
                   help="disable the escape moves for couplings to an unobserved spin pair")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", default="fit.report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nafons", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="stick and sampled spectra of a spin system")
    p.add_argument("--system", default="23dfba", help="spin-system file or shipped name")
    p.add_argument("--observe", required=True)
    p.add_argument("--decouple", action="store_true", help="ideally decouple all other species")
    p.add_argument("--prep", default="thermal", help="thermal or eig:i,j")
    p.add_argument("--axis", help="LO,HI,STEP in Hz (write --axis=-100,100,0.5 for a negative LO)")
    p.add_argument("--t2star", help="T2* in ms, one value or one per simulated spin")
    p.add_argument("--out", default="spectrum", help="output prefix (.sticks and .spec)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pick", help="pick the n largest peaks of a sampled spectrum")
    p.add_argument("spectrum")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--min-prominence", type=float, default=0.02)
    p.add_argument("--window-pts", type=int, default=None)
    p.add_argument("--out", default="peaks.txt")
    p.set_defaults(func=cmd_pick)

    p = sub.add_parser("fit", help="assignment-free fit of a problem file")
    p.add_argument("problem")
    p.add_argument("--peaks", nargs="+", help="peak files replacing the problem's targets in order")
    p.add_argument("--bounds", help="default bounds LO,HI in Hz (write --bounds=-2500,2500)")
    _fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-joint", help="joint heteronuclear fit of transition-selective subspectra")
    p.add_argument("--system", default="23dfba")
    p.add_argument("--known", help="spin-system file with the known parameters (default: --system)")
    p.add_argument("--observe", default="1H", help="species prepared and observed")
    p.add_argument("--sub", nargs=2, action="append", metavar=("PREP", "PEAKS"), required=True)
    p.add_argument("--shift-window", type=float, default=50.0)
    p.add_argument("--coupling-bound", type=float, default=2500.0)
    _fit_flags(p)
    p.set_defaults(func=cmd_fit_joint)

    p = sub.add_parser("refine", help="line-shape refinement of a fit report")
    p.add_argument("report")
    p.add_argument("--spectrum", action="append", required=True, metavar="SPECIES:MODE:FILE")
    p.add_argument("--t2star", help="initial T2* in ms, one value or one per spin")
    p.add_argument("--out", help="prefix for aligned experiment/simulation spectra")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("errors", help="Monte-Carlo error bars of a fit report")
    p.add_argument("report")
    p.add_argument("--noise", type=float, default=0.25, help="frequency noise sigma in Hz")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_errors)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    args.argv = None if argv is None else ["nafons", *argv]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, nio.FormatError, SpectralError, SpinModelError, FitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
