import json
from pathlib import Path

import numpy as np
import pytest

from nafons import io as nio
from nafons.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from nafons.problemfile import read_peaks
from nafons.report import Report

FLUORINE_PROBLEM = """
[spins]
F5 19F
F6 19F
[scalar_hz]
F5 F6 20.75
[free]
nu[F5]
nu[F6]
D[F5,F6]
[targets]
peaks=f.peaks observe=19F
"""


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def fluorine_inputs(work):
    assert main(["simulate", "--observe", "19F", "--decouple", "--t2star", "11.6,15.9",
                 "--axis=-3200,3200,0.25", "--out", "f"]) == EXIT_OK
    assert main(["pick", "f.spec", "-n", "4", "--out", "f.peaks"]) == EXIT_OK
    (work / "f.problem").write_text(FLUORINE_PROBLEM)


def test_simulate_fluorine(work):
    assert main(["simulate", "--observe", "19F", "--decouple", "--out", "f"]) == EXIT_OK
    sticks = nio.read_sticks("f.sticks")
    assert len(sticks) == 4
    assert np.allclose(sticks.freq_hz, [-2763.4, -310.1, 373.1, 2826.4], atol=0.05)
    assert nio.read_sampled_spectrum("f.spec").intensity.max() > 0


def test_simulate_protons_and_prep(work):
    assert main(["simulate", "--observe", "1H", "--decouple", "--out", "h"]) == EXIT_OK
    assert len(nio.read_sticks("h.sticks")) == 56
    assert main(["simulate", "--observe", "1H", "--prep", "eig:3,7", "--out", "c"]) == EXIT_OK
    assert len(nio.read_sticks("c.sticks")) > 0


@pytest.mark.parametrize("argv", [
    ["simulate", "--observe", "13C"],
    ["simulate", "--observe", "1H", "--prep", "eig:99,0"],
    ["simulate", "--observe", "1H", "--prep", "eig:3,3"],
    ["simulate", "--observe", "1H", "--system", "missing.spinsys"],
    ["simulate", "--observe", "1H", "--axis", "1,2"],
    ["simulate"],
    ["frobnicate"],
])
def test_usage_errors(work, argv):
    assert main(argv) == EXIT_USAGE


def test_malformed_system_file_reports_line(work, capsys):
    (work / "bad.spinsys").write_text("[spins]\nA 1H\n[shifts_hz]\nA oops\n")
    assert main(["simulate", "--system", "bad.spinsys", "--observe", "1H", "--out", "x"]) == EXIT_USAGE
    assert "bad.spinsys:4" in capsys.readouterr().err
    assert not (work / "x.sticks").exists()


def test_pick_short_list(work):
    fluorine_inputs(work)
    assert main(["pick", "f.spec", "-n", "6", "--out", "six.peaks"]) == EXIT_FAIL
    assert len(read_peaks("six.peaks")) == 4


def test_fit_fluorine(work):
    fluorine_inputs(work)
    assert main(["fit", "f.problem", "--seed", "0", "--restarts", "8", "--report", "f.report"]) == EXIT_OK
    rep = Report.read("f.report")
    fit = rep.values("fit")
    assert fit["converged"] == "true" and float(fit["rms_hz"]) < 0.05
    pars = {k: float(v) for k, v in rep.values("parameters").items()}
    assert sorted([pars["nu[F5]"], pars["nu[F6]"]]) == pytest.approx([-885, 948], abs=0.1)
    assert pars["D[F5,F6]"] == pytest.approx(-1589, abs=0.1)
    man = json.loads(Path("f.manifest.json").read_text())
    assert man["seed"] == 0 and man["config_sha256"] == nio.file_digest("f.problem")
    assert man["outputs"]["f.report"] == nio.file_digest("f.report")
    assert set(man["versions"]) >= {"python", "numpy", "scipy"}


def test_fit_is_byte_reproducible(work):
    fluorine_inputs(work)
    args = ["fit", "f.problem", "--seed", "5", "--restarts", "3", "--loops", "5"]
    main(args + ["--report", "a.report"])
    main(args + ["--report", "b.report"])
    assert Path("a.report").read_bytes() == Path("b.report").read_bytes()


def test_fit_zero_loops_and_overrides(work):
    fluorine_inputs(work)
    code = main(["fit", "f.problem", "--seed", "1", "--loops", "0", "--peaks", "f.peaks",
                 "--bounds=-2000,2000", "--report", "z.report"])
    assert code in (EXIT_OK, EXIT_FAIL)
    fit = Report.read("z.report").values("fit")
    assert fit["loops"] == "0" and fit["bounds"] == "-2000.0,2000.0"


def test_fit_not_converged_exit_code(work):
    fluorine_inputs(work)
    # bounds that exclude the solution cannot converge
    assert main(["fit", "f.problem", "--seed", "0", "--bounds", "0,10", "--report", "n.report"]) == EXIT_FAIL
    assert Report.read("n.report").values("fit")["converged"] == "false"


def test_fit_bad_problem(work):
    (work / "p.problem").write_text("[spins]\nA 1H\n[free]\nnu[Z]\n")
    assert main(["fit", "p.problem"]) == EXIT_USAGE
    assert main(["fit", "missing.problem"]) == EXIT_USAGE


def test_refine_and_errors(work):
    fluorine_inputs(work)
    main(["fit", "f.problem", "--seed", "0", "--restarts", "8", "--report", "f.report"])
    assert main(["refine", "f.report", "--spectrum", "19F:decoupled:f.spec", "--t2star", "14,12",
                 "--out", "plot"]) == EXIT_OK
    rep = Report.read("f.report")
    t2 = rep.values("refine t2star_ms")
    assert sorted(float(v) for v in t2.values()) == pytest.approx([11.6, 15.9], rel=0.01)
    assert Path("plot.1.19F.exp.spec").exists() and Path("plot.1.19F.sim.spec").exists()
    assert main(["errors", "f.report", "--noise", "0", "--trials", "3", "--seed", "2"]) == EXIT_OK
    rows = [r.split() for r in Report.read("f.report").sections["errors table"] if not r.startswith("#")]
    assert [float(r[2]) for r in rows] == [0.0, 0.0, 0.0]
    assert "refine" in Report.read("f.report").sections


def test_errors_detects_changed_problem(work):
    fluorine_inputs(work)
    main(["fit", "f.problem", "--seed", "0", "--report", "f.report"])
    (work / "f.problem").write_text(FLUORINE_PROBLEM + "\n# edited\n")
    assert main(["errors", "f.report", "--seed", "1", "--trials", "3"]) == EXIT_USAGE


def test_refine_needs_prior_report(work):
    assert main(["refine", "none.report", "--spectrum", "19F:decoupled:x.spec"]) == EXIT_USAGE
    (work / "r.report").write_text("[fit]\nproblem = p\n")
    assert main(["refine", "r.report", "--spectrum", "19F:sideways:x.spec"]) == EXIT_USAGE


def joint_inputs(work, subs):
    paths = []
    for k, prep in enumerate(subs):
        assert main(["simulate", "--observe", "1H", "--prep", prep, "--out", f"s{k}"]) == EXIT_OK
        sticks = nio.read_sticks(f"s{k}.sticks")
        top = np.argsort(-sticks.integral, kind="stable")[:4]
        nio.write_columns(f"s{k}.peaks", [sticks.freq_hz[top], sticks.integral[top]])
        paths.append(f"s{k}.peaks")
    return paths


def test_fit_joint_single_subspectrum_warns(work, capsys):
    (p,) = joint_inputs(work, ["eig:12,0"])
    code = main(["fit-joint", "--sub", "eig:12,0", p, "--seed", "0", "--loops", "0", "--report", "j.report"])
    assert code in (EXIT_OK, EXIT_FAIL)
    assert "underdetermined" in capsys.readouterr().err
    rep = Report.read("j.report")
    assert len([k for k in rep.values("parameters") if k.startswith("D[")]) == 8
    assert Path("j.problem").exists()


def test_fit_joint_zero_window_fixes_shifts(work):
    (p,) = joint_inputs(work, ["eig:12,0"])
    main(["fit-joint", "--sub", "eig:12,0", p, "--shift-window", "0", "--seed", "0", "--loops", "1",
          "--report", "j.report"])
    pars = Report.read("j.report").values("parameters")
    assert float(pars["nu[H1]"]) == -1770.0 and float(pars["nu[H4]"]) == -234.0
