"""Spin-Hamiltonian NMR simulation and assignment-free parameter fitting."""

from nafons.fitting import (FitError, FitProblem, FitResult, NafonsConfig, Objective, Prep, SpectrumTarget,
                            build_joint_hetero_problem, equivalent_solutions, nafons_fit)
from nafons.peaks import PeakList, pick_peaks
from nafons.refine import LineshapeTarget, RefineSettings, estimate_errors, lineshape_refine
from nafons.spectral import (LineWidths, SampledSpectrum, SpectralError, StickSpectrum, detection_operator,
                             diagonalize_system, stick_spectrum_from_state, stick_spectrum_thermal)
from nafons.spin_model import HamiltonianParams, ParamRef, SpinModelError, SpinSystem, build_hamiltonian

__all__ = [
    "FitError", "FitProblem", "FitResult", "NafonsConfig", "Objective", "Prep", "SpectrumTarget",
    "build_joint_hetero_problem", "equivalent_solutions", "nafons_fit",
    "PeakList", "pick_peaks",
    "LineshapeTarget", "RefineSettings", "estimate_errors", "lineshape_refine",
    "LineWidths", "SampledSpectrum", "SpectralError", "StickSpectrum", "detection_operator",
    "diagonalize_system", "stick_spectrum_from_state", "stick_spectrum_thermal",
    "HamiltonianParams", "ParamRef", "SpinModelError", "SpinSystem", "build_hamiltonian",
]
