"""Stage orchestration: FM calibration, bias field, AC modulations, phasor, ellipse."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import PipelineConfig
from .errors import InvalidInputError, PhasorError, UndefinedEllipseError
from .lineshape import (
    FmCalibration,
    LineshapeFit,
    QuadratureSpectrum,
    calibrate_modulations,
    fit_lineshapes,
    linearity_guard,
)
from .polarization import PolarizationEllipse, ellipse_from_phasor
from .reconstruct import AcFitResult, DcFitResult, FieldReconstructor
from .spin import ComplexFieldVector, ModulationSet, RealFieldVector

logger = logging.getLogger(__name__)

LOW_SNR_RATIO = 10.0


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except PhasorError as exc:
        raise exc.with_stage(name)


@dataclass(frozen=True)
class ReferenceAnalysis:
    """Everything derived from the FM calibration spectrum."""

    fm_fits: Tuple[LineshapeFit, ...]
    calibration: FmCalibration
    dc: DcFitResult
    linewidth: float


@dataclass(frozen=True)
class PipelineResult:
    dc: DcFitResult
    fm_fits: Tuple[LineshapeFit, ...]
    ac_fits: Tuple[LineshapeFit, ...]
    modulations: ModulationSet
    ac: AcFitResult
    ellipse: Optional[PolarizationEllipse]
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict:
        return {
            "dc": self.dc.to_dict(),
            "fm_fits": [f.to_dict() for f in self.fm_fits],
            "ac_fits": [f.to_dict() for f in self.ac_fits],
            "modulations_hz": self.modulations.to_dict(),
            "ac": self.ac.to_dict(),
            "ellipse": None if self.ellipse is None else self.ellipse.to_dict(),
            "warnings": list(self.warnings),
        }


def phasor_from_result(payload: Dict) -> ComplexFieldVector:
    """Reconstructed phasor stored in a result JSON document."""
    try:
        return AcFitResult.from_dict(payload["ac"]).b_ac
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PhasorError):
            raise
        raise InvalidInputError(f"malformed result document: {exc}") from exc


def _require_full_set(config: PipelineConfig) -> None:
    if config.n_resonances != 8:
        raise InvalidInputError(
            f"field reconstruction needs all 8 resonances, config asks for {config.n_resonances}"
        )


def analyze_reference(fm: QuadratureSpectrum, config: PipelineConfig, *,
                      centers_guess: Optional[Sequence[float]] = None,
                      dc_guess: Optional[RealFieldVector] = None) -> ReferenceAnalysis:
    _require_full_set(config)
    with stage("lineshape-fit"):
        fm_fits = tuple(
            fit_lineshapes(fm, config.n_resonances, centers_guess, settings=config.lineshape)
        )
    linewidth = float(np.median([f.sigma for f in fm_fits]))
    with stage("dc-fit"):
        reconstructor = FieldReconstructor(config.params, config.orient, config.reconstruction)
        dc = reconstructor.fit_dc(
            [f.center for f in fm_fits],
            dc_guess if dc_guess is not None else config.dc_guess,
            linewidth=linewidth,
        )
    with stage("calibration"):
        calibration = FmCalibration(config.m_fm, fm_fits)
    return ReferenceAnalysis(fm_fits, calibration, dc, linewidth)


def _fit_ac_lines(reference: ReferenceAnalysis, ac: QuadratureSpectrum,
                  config: PipelineConfig, warnings: List[str]) -> Tuple[LineshapeFit, ...]:
    centers = [f.center for f in reference.fm_fits]
    sigmas = [f.sigma for f in reference.fm_fits]
    locked = fit_lineshapes(
        ac, config.n_resonances, centers, initial_sigmas=sigmas, fixed_geometry=True
    )
    signal = max(abs(f.amplitude) for f in locked)
    noise = max(f.amplitude_error for f in locked)
    if not signal > LOW_SNR_RATIO * noise:
        warnings.append(
            f"low SNR: largest AC amplitude {signal:.3g} is within {LOW_SNR_RATIO:g}x "
            f"of its uncertainty {noise:.3g}; line geometry held at the FM fit"
        )
        logger.warning("%s", warnings[-1])
        return tuple(locked)
    if config.lock_ac_geometry and not config.refit_dc_per_spectrum:
        return tuple(locked)
    return tuple(
        fit_lineshapes(ac, config.n_resonances, centers, initial_sigmas=sigmas, settings=config.lineshape)
    )


def analyze_spectrum(
    reference: ReferenceAnalysis,
    ac: QuadratureSpectrum,
    config: PipelineConfig,
    *,
    ac_guess: Optional[ComplexFieldVector] = None,
) -> PipelineResult:
    warnings: List[str] = []
    with stage("lineshape-fit"):
        ac_fits = _fit_ac_lines(reference, ac, config, warnings)

    dc = reference.dc
    reconstructor = FieldReconstructor(config.params, config.orient, config.reconstruction)
    if config.refit_dc_per_spectrum:
        with stage("dc-fit"):
            dc = reconstructor.fit_dc(
                [f.center for f in ac_fits], reference.dc.b_dc, linewidth=reference.linewidth
            )

    with stage("calibration"):
        modulations = calibrate_modulations(
            ac_fits, reference.calibration, dc.assignment, phase_reference=config.phase_reference
        )
        for w in linearity_guard(modulations, reference.fm_fits, dc.assignment, config.linearity_ratio):
            warnings.append(str(w))

    with stage("ac-fit"):
        ac_result = reconstructor.fit_ac(modulations, dc.b_dc, ac_guess)
    warnings.extend(ac_result.warnings)

    try:
        ellipse = ellipse_from_phasor(ac_result.b_ac)
    except UndefinedEllipseError as exc:
        warnings.append(f"undefined ellipse: {exc.message}")
        logger.warning("%s", warnings[-1])
        ellipse = None

    return PipelineResult(
        dc, reference.fm_fits, ac_fits, modulations, ac_result, ellipse, tuple(warnings)
    )


def run_pipeline(
    fm: QuadratureSpectrum, ac_spectra: Sequence[QuadratureSpectrum], config: PipelineConfig
) -> List[PipelineResult]:
    reference = analyze_reference(fm, config)
    logger.info(
        "bias field %s T from FM calibration (linewidth %.3g Hz)",
        np.array2string(reference.dc.b_dc.as_array(), precision=6), reference.linewidth,
    )
    return [analyze_spectrum(reference, ac, config) for ac in ac_spectra]
