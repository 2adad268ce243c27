"""Polarization ellipses of phasor fields and the crossed-coil coupling model.

A phasor B traces p(phi) = Re[B exp(i phi)] over one cycle. With
phi0 = -arg(B.B)/2 (plain, unconjugated dot product) the real and imaginary
parts of B exp(i phi0) are orthogonal and are the two semi-axes.

Two driven coils a and b with mutual coupling m_c produce

    B_a  = exp(i alpha) |B_a| (a + i m_c b)
    B_b  = exp(i beta)  |B_b| (b + i m_c a)
    B_ab = exp(i kappa) (B_a + B_b)

for unit directions a and b.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.optimize import least_squares

from .errors import ConvergenceError, IllConditionedError, InvalidInputError, UndefinedEllipseError
from .spin import ComplexFieldVector, Frame, RealFieldVector

logger = logging.getLogger(__name__)

MIN_ELLIPSE_POINTS = 16
_CIRCULAR_TOL = 1e-12
_PARALLEL_LIMIT = np.cos(np.deg2rad(5.0))


def _wrap(angle: float) -> float:
    """Map onto (-pi, pi]."""
    wrapped = float(np.angle(np.exp(1j * angle)))
    return np.pi if wrapped == -np.pi else wrapped


def eccentricity(semi_major_len: float, semi_minor_len: float) -> float:
    if not semi_major_len > 0:
        raise UndefinedEllipseError("eccentricity is undefined for a zero major axis")
    if semi_minor_len < 0 or semi_minor_len > semi_major_len * (1.0 + 1e-12):
        raise InvalidInputError("need 0 <= minor <= major")
    ratio = min(semi_minor_len / semi_major_len, 1.0)
    return float(np.sqrt(1.0 - ratio * ratio))


@dataclass(frozen=True, eq=False)
class PolarizationEllipse:
    semi_major: RealFieldVector
    semi_minor: RealFieldVector
    eccentricity: float
    phases: np.ndarray
    points: np.ndarray
    degenerate: bool = False
    major_phase: float = 0.0

    @property
    def major_length(self) -> float:
        return self.semi_major.norm

    @property
    def minor_length(self) -> float:
        return self.semi_minor.norm

    @property
    def normal(self) -> np.ndarray:
        """Unit normal of the polarization plane (zero for a linear field)."""
        n = np.cross(self.semi_major.as_array(), self.semi_minor.as_array())
        norm = np.linalg.norm(n)
        return n / norm if norm > 0 else n

    def to_dict(self) -> Dict:
        return {
            "semi_major_t": self.semi_major.as_array().tolist(),
            "semi_minor_t": self.semi_minor.as_array().tolist(),
            "eccentricity": self.eccentricity,
            "degenerate": self.degenerate,
            "major_phase_rad": self.major_phase,
            "frame": self.semi_major.frame.value,
        }


def _sign_normalised(v: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Flip v so its largest-magnitude component is positive."""
    if np.any(v) and v[int(np.argmax(np.abs(v)))] < 0:
        return -v, True
    return v, False


def ellipse_from_phasor(b: ComplexFieldVector, n_points: int = 360) -> PolarizationEllipse:
    if n_points < MIN_ELLIPSE_POINTS:
        raise InvalidInputError(f"n_points must be at least {MIN_ELLIPSE_POINTS}")
    v = b.as_array()
    power = float(np.vdot(v, v).real)
    if power == 0.0:
        raise UndefinedEllipseError("the zero phasor has no polarization ellipse")

    self_dot = np.dot(v, v)
    degenerate = abs(self_dot) < _CIRCULAR_TOL * power
    phi0 = 0.0 if degenerate else float(-0.5 * np.angle(self_dot))
    rotated = v * np.exp(1j * phi0)
    first, second = rotated.real, -rotated.imag  # p(phi0), p(phi0 + pi/2)
    major, minor = first, second
    major_phase = phi0
    if np.linalg.norm(second) > np.linalg.norm(first):
        major, minor = second, first
        major_phase = phi0 + 0.5 * np.pi
    major, flipped = _sign_normalised(major)
    if flipped:
        major_phase += np.pi
    minor, _ = _sign_normalised(minor)

    major_len = float(np.linalg.norm(major))
    minor_len = float(np.linalg.norm(minor))
    ecc = 0.0 if degenerate else eccentricity(major_len, min(minor_len, major_len))
    phases = 2.0 * np.pi * np.arange(n_points) / n_points
    points = np.real(v[None, :] * np.exp(1j * phases)[:, None])
    frame = b.frame
    return PolarizationEllipse(
        semi_major=RealFieldVector.from_array(major, frame),
        semi_minor=RealFieldVector.from_array(minor, frame),
        eccentricity=ecc,
        phases=phases,
        points=points,
        degenerate=bool(degenerate),
        major_phase=_wrap(major_phase) % (2.0 * np.pi),
    )


@dataclass(frozen=True)
class CoupledCoilModel:
    mag_a: float
    mag_b: float
    dir_a: RealFieldVector
    dir_b: RealFieldVector
    m_c: float
    alpha: float = 0.0
    beta: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        for name in ("dir_a", "dir_b"):
            if abs(getattr(self, name).norm - 1.0) > 1e-12:
                raise InvalidInputError(f"{name} must be a unit vector")
        values = (self.mag_a, self.mag_b, self.m_c, self.alpha, self.beta, self.kappa)
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("coupled-coil parameters must be finite")

    def to_dict(self) -> Dict:
        return {
            "mag_a_t": self.mag_a,
            "mag_b_t": self.mag_b,
            "dir_a": self.dir_a.as_array().tolist(),
            "dir_b": self.dir_b.as_array().tolist(),
            "m_c": self.m_c,
            "alpha_rad": self.alpha,
            "beta_rad": self.beta,
            "kappa_rad": self.kappa,
            "frame": self.dir_a.frame.value,
        }

    @classmethod
    def from_dict(cls, payload) -> "CoupledCoilModel":
        frame = Frame(payload.get("frame", "crystal"))
        return cls(
            mag_a=float(payload["mag_a_t"]),
            mag_b=float(payload["mag_b_t"]),
            dir_a=RealFieldVector.from_array(_unit(payload["dir_a"]), frame),
            dir_b=RealFieldVector.from_array(_unit(payload["dir_b"]), frame),
            m_c=float(payload["m_c"]),
            alpha=float(payload.get("alpha_rad", 0.0)),
            beta=float(payload.get("beta_rad", 0.0)),
            kappa=float(payload.get("kappa_rad", 0.0)),
        )


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0 or not np.isfinite(norm):
        raise InvalidInputError("direction must be a finite non-zero vector")
    return v / norm


def _phasors(mag_a, mag_b, a, b, m_c, alpha, beta, kappa):
    b_a = np.exp(1j * alpha) * mag_a * (a + 1j * m_c * b)
    b_b = np.exp(1j * beta) * mag_b * (b + 1j * m_c * a)
    return b_a, b_b, np.exp(1j * kappa) * (b_a + b_b)


def coupled_coil_phasors(
    model: CoupledCoilModel,
) -> Tuple[ComplexFieldVector, ComplexFieldVector, ComplexFieldVector]:
    """(B_a, B_b, B_ab) produced by the model."""
    frame = model.dir_a.frame
    fields = _phasors(
        model.mag_a, model.mag_b, model.dir_a.as_array(), model.dir_b.as_array(),
        model.m_c, model.alpha, model.beta, model.kappa,
    )
    return tuple(ComplexFieldVector.from_array(f, frame) for f in fields)


def canonical_gauge(model: CoupledCoilModel) -> CoupledCoilModel:
    """Equivalent model with positive magnitudes and alpha, beta in (-pi/2, pi/2].

    Flipping a together with alpha + pi and m_c -> -m_c leaves every phasor
    unchanged, and likewise for b with beta.
    """
    mag_a, mag_b = model.mag_a, model.mag_b
    a, b = model.dir_a.as_array(), model.dir_b.as_array()
    m_c, alpha, beta = model.m_c, model.alpha, model.beta
    if mag_a < 0:
        mag_a, alpha = -mag_a, alpha + np.pi
    if mag_b < 0:
        mag_b, beta = -mag_b, beta + np.pi
    alpha, beta = _wrap(alpha), _wrap(beta)
    if not -0.5 * np.pi < alpha <= 0.5 * np.pi:
        a, alpha, m_c = -a, _wrap(alpha + np.pi), -m_c
    if not -0.5 * np.pi < beta <= 0.5 * np.pi:
        b, beta, m_c = -b, _wrap(beta + np.pi), -m_c
    frame = model.dir_a.frame
    return CoupledCoilModel(
        mag_a, mag_b,
        RealFieldVector.from_array(a, frame), RealFieldVector.from_array(b, frame),
        m_c, alpha, beta, _wrap(model.kappa),
    )


def _angles(v: np.ndarray) -> Tuple[float, float]:
    return float(np.arccos(np.clip(v[2], -1.0, 1.0))), float(np.arctan2(v[1], v[0]))


def _direction(theta: float, phi: float) -> np.ndarray:
    return np.array(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    )


def _check_parallel(a: np.ndarray, b: np.ndarray) -> None:
    overlap = abs(float(np.dot(a, b)))
    if overlap > _PARALLEL_LIMIT:
        angle = float(np.degrees(np.arccos(min(overlap, 1.0))))
        raise IllConditionedError(
            f"coil directions are {angle:.2f} degrees from parallel",
            stage="coil-fit",
            details={"angle_deg": angle},
        )


def _initial_coil(phasor: np.ndarray) -> Tuple[float, np.ndarray, float]:
    """Magnitude, direction and phase of a coil from its own ellipse."""
    ellipse = ellipse_from_phasor(ComplexFieldVector.from_array(phasor))
    direction = ellipse.semi_major.as_array() / ellipse.major_length
    return ellipse.major_length, direction, -ellipse.major_phase


def coupled_coil_residual(
    model: CoupledCoilModel,
    b_a: ComplexFieldVector,
    b_b: ComplexFieldVector,
    b_ab: ComplexFieldVector,
) -> float:
    """Sum of squared differences (T^2) between model and measured phasors."""
    predicted = coupled_coil_phasors(model)
    measured = (b_a, b_b, b_ab)
    return float(sum(np.sum(np.abs(p.as_array() - m.as_array()) ** 2) for p, m in zip(predicted, measured)))


def align_coil_signs(
    b_a: ComplexFieldVector,
    b_b: ComplexFieldVector,
    b_ab: ComplexFieldVector,
) -> Tuple[ComplexFieldVector, ComplexFieldVector, ComplexFieldVector]:
    """Undo independent B -> -B gauge choices between the single-coil phasors.

    A sign flip of B_ab is absorbed by kappa, so only the relative sign of B_b
    matters: it is chosen so that B_a + B_b best matches B_ab up to a phase.
    """
    a, b, ab = b_a.as_array(), b_b.as_array(), b_ab.as_array()

    def mismatch(s):
        total = a + s * b
        return float(np.sum(np.abs(total) ** 2) - 2.0 * abs(np.vdot(total, ab)))

    if mismatch(-1.0) < mismatch(1.0):
        return b_a, -b_b, b_ab
    return b_a, b_b, b_ab


def fit_coupled_coils(
    b_a: ComplexFieldVector,
    b_b: ComplexFieldVector,
    b_ab: ComplexFieldVector,
    *,
    max_iterations: int = 2000,
) -> CoupledCoilModel:
    """Fit the coupled-coil model; B_b is first sign-aligned with `align_coil_signs`."""
    frames = {b_a.frame, b_b.frame, b_ab.frame}
    if len(frames) != 1:
        raise InvalidInputError("coil phasors must share a frame")
    b_a, b_b, b_ab = align_coil_signs(b_a, b_b, b_ab)
    frame = b_a.frame
    data = [b_a.as_array(), b_b.as_array(), b_ab.as_array()]
    scale = max(float(np.linalg.norm(d)) for d in data)
    if scale == 0.0:
        raise InvalidInputError("coil phasors are all zero")
    target = np.concatenate([np.concatenate([d.real, d.imag]) for d in data]) / scale

    mag_a, dir_a, alpha = _initial_coil(data[0])
    mag_b, dir_b, beta = _initial_coil(data[1])
    _check_parallel(dir_a, dir_b)
    m_a = float(np.dot((data[0] * np.exp(-1j * alpha)).imag, dir_b)) / mag_a
    m_b = float(np.dot((data[1] * np.exp(-1j * beta)).imag, dir_a)) / mag_b
    kappa = float(np.angle(np.vdot(data[0] + data[1], data[2])))
    theta_a, phi_a = _angles(dir_a)
    theta_b, phi_b = _angles(dir_b)
    p0 = np.array(
        [mag_a / scale, theta_a, phi_a, mag_b / scale, theta_b, phi_b,
         0.5 * (m_a + m_b), alpha, beta, kappa]
    )

    def unpack(p):
        return (
            p[0], p[3], _direction(p[1], p[2]), _direction(p[4], p[5]), p[6], p[7], p[8], p[9]
        )

    def residual(p):
        m_a_, m_b_, a, b, m_c, al, be, ka = unpack(p)
        fields = _phasors(m_a_, m_b_, a, b, m_c, al, be, ka)
        return np.concatenate([np.concatenate([f.real, f.imag]) for f in fields]) - target

    if not np.any(np.abs(residual(p0)) > 1e-15):
        p = p0
    else:
        result = least_squares(
            residual, p0, method="lm", ftol=1e-12, xtol=1e-12, gtol=1e-15, max_nfev=max_iterations
        )
        logger.debug(
            "coil fit: status %d after %d evaluations, cost %.3g", result.status, result.nfev, result.cost
        )
        if result.status <= 0:
            raise ConvergenceError(
                "coupled-coil fit did not converge", best_effort=result.x, stage="coil-fit"
            )
        p = result.x

    m_a_, m_b_, a, b, m_c, al, be, ka = unpack(p)
    _check_parallel(a, b)
    model = CoupledCoilModel(
        m_a_ * scale, m_b_ * scale,
        RealFieldVector.from_array(a, frame), RealFieldVector.from_array(b, frame),
        float(m_c), float(al), float(be), float(ka),
    )
    return canonical_gauge(model)
