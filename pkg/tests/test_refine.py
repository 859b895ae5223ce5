import numpy as np
import pytest

from nafons import spectral as sp
from nafons.fitting import FitError, FitProblem, SpectrumTarget
from nafons.peaks import PeakList
from nafons.refine import (LineshapeTarget, RefineSettings, estimate_errors, lineshape_refine,
                           simulate_target)
from nafons.spin_model import HamiltonianParams, ParamRef, SpinSystem, build_hamiltonian


def ab_lines(n1, n2, D, J):
    c = (n1 + n2) / 2
    r = 0.5 * np.hypot(n1 - n2, 2 * J - D)
    return np.sort([c + s1 * (D + J) + s2 * r for s1 in (1, -1) for s2 in (1, -1)])


def fluorine_target(fluorine, t2_ms, amp=1.0, base=0.0):
    sys, p = fluorine
    axis = sp.make_axis(-3200, 3200, 0.25)
    probe = LineshapeTarget(sp.SampledSpectrum(axis, np.zeros(axis.size)), "19F")
    y = simulate_target(sys, p, sp.LineWidths(np.array(t2_ms) * 1e-3), probe)
    return LineshapeTarget(sp.SampledSpectrum(axis, amp * y + base), "19F")


def test_simulated_target_has_four_maxima(fluorine):
    t = fluorine_target(fluorine, [11.6, 15.9])
    y = t.spectrum.intensity
    maxima = np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] > y[2:]))
    assert maxima.size == 4


def test_refine_at_truth_is_stationary(fluorine):
    sys, p = fluorine
    t = fluorine_target(fluorine, [11.6, 15.9], amp=3.0, base=0.5)
    res = lineshape_refine(sys, p, sp.LineWidths(np.array([11.6e-3, 15.9e-3])), [t])
    assert res.rss < 1e-12 and not res.aborted
    assert res.amplitudes[0] == pytest.approx(3.0) and res.baselines[0] == pytest.approx(0.5)
    assert res.max_rel_change < 1e-9


def test_refine_recovers_t2star(fluorine):
    sys, p = fluorine
    t = fluorine_target(fluorine, [11.6, 15.9], amp=2.0)
    res = lineshape_refine(sys, p, sp.LineWidths(np.array([14.0e-3, 12.0e-3])), [t])
    assert np.allclose(res.widths.t2star_s * 1e3, [11.6, 15.9], rtol=1e-4)
    assert res.max_rel_change < 1e-4
    assert res.rss_history[-1] < res.rss_history[0]
    assert all(b <= a for a, b in zip(res.rss_history, res.rss_history[1:]))


def test_refine_pulls_parameters_back(fluorine):
    sys, p = fluorine
    t = fluorine_target(fluorine, [11.6, 15.9])
    off = HamiltonianParams(p.shifts_hz + [3.0, -2.0], p.dipolar_hz, p.scalar_hz)
    res = lineshape_refine(sys, off, sp.LineWidths(np.array([11.6e-3, 15.9e-3])), [t])
    assert np.allclose(res.params.shifts_hz, p.shifts_hz, atol=0.01)


def test_refine_respects_window(fluorine):
    sys, p = fluorine
    t = fluorine_target(fluorine, [11.6, 15.9])
    # truth lies outside a 0.1 % window around the displaced start
    off = HamiltonianParams(p.shifts_hz + [30.0, 0.0], p.dipolar_hz, p.scalar_hz)
    cfg = RefineSettings(param_window_frac=0.001, window_floor_hz=1.0, max_iter=30)
    res = lineshape_refine(sys, off, sp.LineWidths(np.array([11.6e-3, 15.9e-3])), [t], cfg)
    assert abs(res.params.shifts_hz[0] - off.shifts_hz[0]) <= 0.001 * abs(off.shifts_hz[0]) + 1e-9


def test_refine_validation(fluorine):
    sys, p = fluorine
    with pytest.raises(FitError):
        lineshape_refine(sys, p, sp.LineWidths(np.array([1e-2, 1e-2])), [])
    with pytest.raises(sp.SpectralError):
        lineshape_refine(sys, p, sp.LineWidths(np.array([1e-2])), [fluorine_target(fluorine, [11.6, 15.9])])


# -- error bars ------------------------------------------------------------


def single_line_problem():
    sys = SpinSystem.from_pairs([("a", "1H")])
    return FitProblem(sys, [ParamRef("shift", 0)], HamiltonianParams.zeros(1), [[-500, 500]],
                      [SpectrumTarget(PeakList([100.0]), "1H")])


def test_single_line_std_equals_noise():
    est = estimate_errors(single_line_problem(), [100.0], 0.5, trials=400, rng=3)
    # the estimate of a standard deviation from 400 samples is good to ~4 %
    assert est.std[0] == pytest.approx(0.5, rel=0.15)
    assert est.failed == 0 and est.trials == 400


def test_fluorine_std_matches_linear_propagation(fluorine):
    sys, p = fluorine
    J = p.scalar_hz[0, 1]
    x = np.array([p.shifts_hz[0], p.shifts_hz[1], p.dipolar_hz[0, 1]])
    free = [ParamRef("shift", 0), ParamRef("shift", 1), ParamRef("dipolar", 0, 1)]
    fixed = HamiltonianParams(np.zeros(2), np.zeros((2, 2)), p.scalar_hz)
    prob = FitProblem(sys, free, fixed, [[-2500, 2500]] * 3, [SpectrumTarget(PeakList(ab_lines(*x, J)), "19F")])
    sigma = 0.25
    h = 1e-3
    jac = np.column_stack([(ab_lines(*(x + h * e), J) - ab_lines(*(x - h * e), J)) / (2 * h) for e in np.eye(3)])
    linear = sigma * np.sqrt(np.diag(np.linalg.inv(jac.T @ jac)))
    est = estimate_errors(prob, x, sigma, trials=300, rng=5)
    assert np.allclose(est.std, linear, rtol=0.2)


def test_error_trials_reproducible():
    prob = single_line_problem()
    a = estimate_errors(prob, [100.0], 0.3, trials=20, rng=9)
    b = estimate_errors(prob, [100.0], 0.3, trials=20, rng=9)
    assert np.array_equal(a.samples, b.samples)
    c = estimate_errors(prob, [100.0], 0.3, trials=20, rng=10)
    assert not np.array_equal(a.samples, c.samples)


def test_zero_noise_gives_zero_std():
    est = estimate_errors(single_line_problem(), [100.0], 0.0, trials=5)
    assert est.std[0] == 0.0


def test_failures_abort(fluorine):
    sys, p = fluorine
    x = np.array([p.shifts_hz[0], p.shifts_hz[1], p.dipolar_hz[0, 1]])
    free = [ParamRef("shift", 0), ParamRef("shift", 1), ParamRef("dipolar", 0, 1)]
    fixed = HamiltonianParams(np.zeros(2), np.zeros((2, 2)), p.scalar_hz)
    peaks = PeakList(ab_lines(*x, p.scalar_hz[0, 1]))
    prob = FitProblem(sys, free, fixed, [[-2500, 2500]] * 3, [SpectrumTarget(peaks, "19F")])
    # with a zero tolerance every noisy trial counts as failed
    with pytest.raises(FitError):
        estimate_errors(prob, x, 2.0, trials=10, fail_factor=0.0)


@pytest.mark.parametrize("kw", [dict(noise_sigma_hz=-1.0), dict(trials=1), dict(x_star=[1.0, 2.0])])
def test_error_validation(kw):
    args = dict(prob=single_line_problem(), x_star=[100.0], noise_sigma_hz=0.5, trials=10)
    args.update(kw)
    with pytest.raises(FitError):
        estimate_errors(**args)
