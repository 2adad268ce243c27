"""Bias-field and phasor-field reconstruction from fitted resonances."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from .errors import AmbiguousAssignmentError, ConvergenceError, InvalidInputError
from .geometry import OrientationSet, crystal_symmetries
from .spin import (
    ALL_LABELS,
    BRANCHES,
    ComplexFieldVector,
    Frame,
    ModulationSet,
    RealFieldVector,
    ResonanceLabel,
    SpinModelParams,
    modulation_depths,
    transition_frequencies,
)

logger = logging.getLogger(__name__)

_MT = 1e-3
_NT = 1e-9
_ZERO_FIELD_TOL = 1e3  # Hz
_COLLISION_FLOOR = 1e3  # Hz
_START_SCALES = (0.7, 1.0, 1.4)
_GOOD_DC_RMS = 1.0  # Hz


@dataclass(frozen=True)
class ReconstructionSettings:
    max_iterations: int = 1000
    ftol: float = 1e-12
    step_tol: float = 1e-15  # T
    jacobian_step: float = 1e-9  # T
    poor_fit_factor: float = 100.0
    sign_gauge: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be at least 1")
        for name in ("ftol", "step_tol", "jacobian_step", "poor_fit_factor"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")


@dataclass(frozen=True)
class DcFitResult:
    b_dc: RealFieldVector
    assignment: Tuple[ResonanceLabel, ...]
    center_residual_rms: float
    degenerate: bool = False

    def __post_init__(self):
        if sorted(self.assignment) != sorted(ALL_LABELS):
            raise InvalidInputError("assignment must cover each (branch, orientation) label once")
        if self.center_residual_rms < 0:
            raise InvalidInputError("center residual must be non-negative")

    def to_dict(self):
        return {
            "b_dc_t": self.b_dc.as_array().tolist(),
            "frame": self.b_dc.frame.value,
            "assignment": [str(label) for label in self.assignment],
            "center_residual_rms_hz": self.center_residual_rms,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, payload) -> "DcFitResult":
        return cls(
            b_dc=RealFieldVector.from_array(payload["b_dc_t"], Frame(payload.get("frame", "crystal"))),
            assignment=tuple(ResonanceLabel.parse(s) for s in payload["assignment"]),
            center_residual_rms=float(payload["center_residual_rms_hz"]),
            degenerate=bool(payload.get("degenerate", False)),
        )


@dataclass(frozen=True)
class AcFitResult:
    b_ac: ComplexFieldVector
    cost: float
    converged: bool
    iterations: int
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.cost >= 0:
            raise InvalidInputError("cost must be non-negative")

    def to_dict(self):
        b = self.b_ac.as_array()
        return {
            "b_ac_t": {"real": b.real.tolist(), "imag": b.imag.tolist()},
            "frame": self.b_ac.frame.value,
            "cost_hz2": self.cost,
            "converged": self.converged,
            "iterations": self.iterations,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, payload) -> "AcFitResult":
        b = payload["b_ac_t"]
        values = np.asarray(b["real"], dtype=float) + 1j * np.asarray(b["imag"], dtype=float)
        return cls(
            b_ac=ComplexFieldVector.from_array(values, Frame(payload.get("frame", "crystal"))),
            cost=float(payload["cost_hz2"]),
            converged=bool(payload["converged"]),
            iterations=int(payload["iterations"]),
            warnings=tuple(payload.get("warnings", ())),
        )


def canonical_bias_field(b: np.ndarray) -> np.ndarray:
    """Representative 0 <= bx <= by <= bz of the crystal symmetry orbit."""
    return np.sort(np.abs(np.asarray(b, dtype=float)))


def nearest_equivalent(b: np.ndarray, guess: np.ndarray) -> np.ndarray:
    images = np.array([s @ b for s in crystal_symmetries()])
    return images[int(np.argmin(np.linalg.norm(images - guess, axis=1)))]


def phase_gauge(b: ComplexFieldVector) -> ComplexFieldVector:
    """Pick between B and -B so the real part is non-negative on its largest-magnitude axis.

    A purely imaginary phasor is decided by its imaginary part instead.
    """
    values = b.as_array()
    reference = values.real
    if not np.any(np.abs(reference) > 1e-12 * np.max(np.abs(values), initial=0.0)):
        reference = values.imag
    axis = int(np.argmax(np.abs(reference)))
    if reference[axis] < 0:
        return -b
    return b


def _fundamental_directions(n: int = 24) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * k
    points = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    folded = np.sort(np.abs(points), axis=1)
    return np.unique(np.round(folded, 6), axis=0)


class FieldReconstructor:
    """Least-squares inversion of resonance centers and modulations for fields.

    `evaluations` counts forward-model calls since construction.
    """

    def __init__(
        self,
        params: SpinModelParams,
        orient: OrientationSet,
        settings: Optional[ReconstructionSettings] = None,
    ):
        self.params = params
        self.orient = orient
        self.settings = settings or ReconstructionSettings()
        self.evaluations = 0
        self._rotations = orient.stacked

    def model_frequencies(self, b_crystal) -> np.ndarray:
        """(4, 2) array of [f_minus, f_plus] per orientation."""
        self.evaluations += 1
        b_nv = self._rotations @ np.asarray(b_crystal, dtype=float)
        return transition_frequencies(self.params, b_nv)

    def model_modulations(self, b_dc, b_ac) -> np.ndarray:
        """(4, 2) complex modulations laid out like ModulationSet.values."""
        self.evaluations += 1
        dc = self._rotations @ np.asarray(b_dc, dtype=float)
        ac = np.asarray(b_ac, dtype=complex)
        real = modulation_depths(self.params, dc, self._rotations @ ac.real)
        imag = modulation_depths(self.params, dc, self._rotations @ ac.imag)
        return real + 1j * imag

    def cost(self, mods: ModulationSet, b_dc, b_ac) -> float:
        residual = self.model_modulations(b_dc, b_ac) - mods.values
        return float(np.sum(np.abs(residual) ** 2))

    def frequency_gradient(self, b_dc) -> np.ndarray:
        """(8, 3) derivatives of [f_minus, f_plus] per orientation w.r.t. the crystal field."""
        h = self.settings.jacobian_step
        b_dc = np.asarray(b_dc, dtype=float)
        steps = np.eye(3) * h
        upper = np.stack([self.model_frequencies(b_dc + s).ravel() for s in steps], axis=1)
        lower = np.stack([self.model_frequencies(b_dc - s).ravel() for s in steps], axis=1)
        return (upper - lower) / (2.0 * h)

    def linearized_guess(self, mods: ModulationSet, b_dc) -> np.ndarray:
        """Solve M = 2 G B for real and imaginary parts, G the frequency gradient at B_DC."""
        design = 2.0 * self.frequency_gradient(b_dc)
        data = mods.values.ravel()
        real, *_ = np.linalg.lstsq(design, data.real, rcond=None)
        imag, *_ = np.linalg.lstsq(design, data.imag, rcond=None)
        return real + 1j * imag

    # -- bias field --------------------------------------------------------

    def _center_residuals(self, p_mt: np.ndarray, centers: np.ndarray) -> np.ndarray:
        return np.sort(self.model_frequencies(p_mt * _MT).ravel()) - centers

    def _magnitude_estimate(self, centers: np.ndarray) -> float:
        splittings = centers[::-1][:4] - centers[:4]
        # sum over the four <111> axes of (B.n)^2 is 4|B|^2/3
        return float(np.sqrt(0.75 * np.sum((splittings / (2.0 * self.params.gyromagnetic_ratio)) ** 2)))

    def _assignment(self, b: np.ndarray) -> Tuple[ResonanceLabel, ...]:
        predicted = self.model_frequencies(b)
        order = np.argsort(predicted.ravel(), kind="stable")
        return tuple(
            ResonanceLabel(BRANCHES[k % 2], k // 2 + 1) for k in order
        )

    def _collisions(self, b: np.ndarray, linewidth: float) -> List[Tuple[ResonanceLabel, ResonanceLabel, float]]:
        predicted = self.model_frequencies(b)
        limit = max(2.0 * linewidth, _COLLISION_FLOOR)
        found = []
        for a in range(len(ALL_LABELS)):
            for c in range(a + 1, len(ALL_LABELS)):
                la, lc = ALL_LABELS[a], ALL_LABELS[c]
                if la.orientation == lc.orientation:
                    continue
                separation = abs(
                    predicted[la.orientation - 1, BRANCHES.index(la.branch)]
                    - predicted[lc.orientation - 1, BRANCHES.index(lc.branch)]
                )
                if separation < limit:
                    found.append((la, lc, float(separation)))
        return found

    def fit_dc(
        self,
        centers: Sequence[float],
        initial_guess: Optional[RealFieldVector] = None,
        *,
        linewidth: float = 0.0,
    ) -> DcFitResult:
        c = np.sort(np.asarray(centers, dtype=float).ravel())
        if c.shape != (8,) or not np.all(np.isfinite(c)):
            raise InvalidInputError("bias-field fit needs 8 finite resonance centers")
        if linewidth < 0:
            raise InvalidInputError("linewidth must be non-negative")
        if initial_guess is not None and initial_guess.frame != Frame.CRYSTAL:
            raise InvalidInputError("initial bias-field guess must be in the crystal frame")

        if np.max(np.abs(c - self.params.zero_field_splitting)) <= _ZERO_FIELD_TOL:
            rms = float(np.sqrt(np.mean((c - self.params.zero_field_splitting) ** 2)))
            logger.info("all resonances at the zero-field splitting; reporting B_DC = 0")
            return DcFitResult(RealFieldVector.zero(), ALL_LABELS, rms, degenerate=True)

        if initial_guess is not None:
            starts = [initial_guess.as_array() / _MT]
        else:
            magnitude = self._magnitude_estimate(c) / _MT
            starts = [
                d * magnitude * scale for scale in _START_SCALES for d in _fundamental_directions()
            ]

        best = None
        for k, p0 in enumerate(starts):
            result = least_squares(
                self._center_residuals,
                p0,
                args=(c,),
                method="lm",
                xtol=1e-12,
                ftol=1e-12,
                gtol=1e-12,
                max_nfev=self.settings.max_iterations,
            )
            if best is None or result.cost < best.cost:
                best = result
            if np.sqrt(2.0 * best.cost / 8.0) < _GOOD_DC_RMS:
                logger.debug("bias-field fit settled after %d of %d starts", k + 1, len(starts))
                break

        b = best.x * _MT
        if initial_guess is not None:
            b = nearest_equivalent(b, initial_guess.as_array())
        else:
            b = canonical_bias_field(b)
        rms = float(np.sqrt(np.mean(self._center_residuals(b / _MT, c) ** 2)))
        if best.status <= 0:
            raise ConvergenceError(
                "bias-field fit did not converge",
                best_effort=DcFitResult(RealFieldVector.from_array(b), self._assignment(b), rms),
                stage="dc-fit",
            )
        if linewidth > 0 and rms > 0.1 * linewidth:
            logger.warning("bias-field fit leaves %.3g Hz rms center residual", rms)

        collisions = self._collisions(b, linewidth)
        if collisions:
            raise AmbiguousAssignmentError(
                f"{len(collisions)} resonance pairs from different orientations overlap",
                collisions=collisions,
                stage="dc-fit",
            )
        logger.debug("bias field %s T, center rms %.3g Hz", b, rms)
        return DcFitResult(RealFieldVector.from_array(b), self._assignment(b), rms)

    # -- phasor field ------------------------------------------------------

    def fit_ac(
        self,
        mods: ModulationSet,
        b_dc: RealFieldVector,
        initial_guess: Optional[ComplexFieldVector] = None,
    ) -> AcFitResult:
        if b_dc.frame != Frame.CRYSTAL:
            raise InvalidInputError("bias field must be given in the crystal frame")
        if initial_guess is not None and initial_guess.frame != Frame.CRYSTAL:
            raise InvalidInputError("initial phasor guess must be in the crystal frame")
        settings = self.settings
        dc = b_dc.as_array()
        data = mods.values

        guess = initial_guess.as_array() if initial_guess is not None else self.linearized_guess(mods, dc)
        p0 = np.concatenate([guess.real, guess.imag]) / _NT

        def residual(p):
            b = (p[:3] + 1j * p[3:]) * _NT
            r = self.model_modulations(dc, b) - data
            return np.concatenate([r.real.ravel(), r.imag.ravel()])

        h = settings.jacobian_step / _NT

        def jacobian(p):
            jac = np.empty((16, 6))
            for j in range(6):
                step = np.zeros(6)
                step[j] = h
                jac[:, j] = (residual(p + step) - residual(p - step)) / (2.0 * h)
            return jac

        r0 = residual(p0)
        warnings: List[str] = []
        if not np.any(r0):
            b_ac = ComplexFieldVector.from_array(guess)
            if settings.sign_gauge:
                b_ac = phase_gauge(b_ac)
            return AcFitResult(b_ac, 0.0, True, 0, tuple(warnings))

        scale = max(float(np.linalg.norm(p0)) * _NT, settings.step_tol)
        result = least_squares(
            residual,
            p0,
            jac=jacobian,
            method="lm",
            ftol=max(settings.ftol, 1e-15),
            xtol=max(settings.step_tol / scale, 1e-15),
            gtol=1e-15,
            max_nfev=settings.max_iterations,
        )
        b = (result.x[:3] + 1j * result.x[3:]) * _NT
        cost = float(np.sum(result.fun ** 2))
        b_ac = ComplexFieldVector.from_array(b)
        if settings.sign_gauge:
            b_ac = phase_gauge(b_ac)

        if mods.uncertainty is not None:
            variance = float(np.sum(mods.uncertainty ** 2))
            if variance > 0 and cost > settings.poor_fit_factor * variance:
                warnings.append(
                    f"poor fit: cost {cost:.3g} Hz^2 exceeds {settings.poor_fit_factor:g}x "
                    f"the modulation variance {variance:.3g} Hz^2"
                )
        for w in warnings:
            logger.warning("%s", w)

        fit = AcFitResult(b_ac, cost, result.status > 0, int(result.nfev), tuple(warnings))
        logger.debug(
            "phasor fit: status %d, %d evaluations, cost %.3g Hz^2", result.status, result.nfev, cost
        )
        if result.status <= 0:
            raise ConvergenceError(
                f"phasor fit did not converge within {settings.max_iterations} evaluations",
                best_effort=fit,
                stage="ac-fit",
            )
        return fit


def fit_dc_field(
    centers: Sequence[float],
    params: SpinModelParams,
    orient: OrientationSet,
    initial_guess: Optional[RealFieldVector] = None,
    *,
    linewidth: float = 0.0,
    settings: Optional[ReconstructionSettings] = None,
) -> DcFitResult:
    return FieldReconstructor(params, orient, settings).fit_dc(
        centers, initial_guess, linewidth=linewidth
    )


def fit_ac_field(
    mods: ModulationSet,
    b_dc: RealFieldVector,
    params: SpinModelParams,
    orient: OrientationSet,
    initial_guess: Optional[ComplexFieldVector] = None,
    *,
    settings: Optional[ReconstructionSettings] = None,
) -> AcFitResult:
    return FieldReconstructor(params, orient, settings).fit_ac(mods, b_dc, initial_guess)
