"""Derivative-Gaussian fits of lock-in ODMR spectra and FM calibration.

Each resonance is modelled on both quadratures with one shared center and
width,

    x(f) = a_x g(f),   y(f) = a_y g(f),
    g(f) = u exp(1/2 - u^2/2),   u = (center - f) / sigma,

so g has extrema +1 at f = center - sigma and -1 at f = center + sigma and a
positive amplitude corresponds to a positive resonance shift.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .errors import CalibrationError, ConvergenceError, DetectionError, InvalidInputError
from .spin import ModulationSet, ResonanceLabel

logger = logging.getLogger(__name__)

MIN_SAMPLES = 50
DEFAULT_LINEWIDTH = 5e6  # Hz


@dataclass(frozen=True, eq=False)
class QuadratureSpectrum:
    freqs: np.ndarray
    x_channel: np.ndarray
    y_channel: np.ndarray
    demod_frequency: float = 0.0
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        arrays = {}
        for name in ("freqs", "x_channel", "y_channel"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            arrays[name] = arr
        if len(arrays["freqs"]) < MIN_SAMPLES:
            raise InvalidInputError(
                f"spectrum needs at least {MIN_SAMPLES} samples, got {len(arrays['freqs'])}"
            )
        if np.any(np.diff(arrays["freqs"]) <= 0):
            raise InvalidInputError("spectrum frequencies must be strictly increasing")
        for name in ("x_channel", "y_channel"):
            if len(arrays[name]) != len(arrays["freqs"]):
                raise InvalidInputError(f"{name} length does not match the frequency axis")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return len(self.freqs)

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.freqs[0]), float(self.freqs[-1])

    @property
    def complex_signal(self) -> np.ndarray:
        return self.x_channel + 1j * self.y_channel

    def with_channels(self, x_channel, y_channel) -> "QuadratureSpectrum":
        return replace(self, x_channel=x_channel, y_channel=y_channel)

    def rotated(self, theta: float) -> "QuadratureSpectrum":
        """Quadrature rotation; every complex amplitude picks up exp(i theta)."""
        signal = self.complex_signal * np.exp(1j * theta)
        return self.with_channels(signal.real, signal.imag)

    def shifted(self, delta: float) -> "QuadratureSpectrum":
        return replace(self, freqs=self.freqs + delta)

    def scaled(self, factor: float) -> "QuadratureSpectrum":
        return self.with_channels(self.x_channel * factor, self.y_channel * factor)


@dataclass(frozen=True)
class LineshapeFit:
    center: float
    sigma: float
    amplitude: complex
    residual_rms: float
    amplitude_error: float = 0.0
    center_error: float = 0.0
    converged: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("lineshape width must be positive")

    def to_dict(self) -> Dict[str, float]:
        return {
            "center_hz": self.center,
            "sigma_hz": self.sigma,
            "amplitude": {"real": self.amplitude.real, "imag": self.amplitude.imag},
            "amplitude_error": self.amplitude_error,
            "center_error_hz": self.center_error,
            "residual_rms": self.residual_rms,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, payload) -> "LineshapeFit":
        amplitude = payload["amplitude"]
        return cls(
            center=float(payload["center_hz"]),
            sigma=float(payload["sigma_hz"]),
            amplitude=complex(amplitude["real"], amplitude["imag"]),
            residual_rms=float(payload.get("residual_rms", 0.0)),
            amplitude_error=float(payload.get("amplitude_error", 0.0)),
            center_error=float(payload.get("center_error_hz", 0.0)),
            converged=bool(payload.get("converged", True)),
        )


@dataclass(frozen=True)
class FmCalibration:
    m_fm: float
    fm_fits: Tuple[LineshapeFit, ...]

    def __post_init__(self):
        if not (np.isfinite(self.m_fm) and self.m_fm > 0):
            raise InvalidInputError("FM deviation m_fm must be positive")
        object.__setattr__(self, "fm_fits", tuple(self.fm_fits))
        if len(self.fm_fits) != 8:
            raise InvalidInputError(f"FM calibration needs 8 resonances, got {len(self.fm_fits)}")


@dataclass(frozen=True)
class FitSettings:
    linewidth_guess: float = DEFAULT_LINEWIDTH
    detection_threshold: float = 5.0
    xtol: float = 1e-6
    max_iterations: int = 200

    def __post_init__(self):
        if self.linewidth_guess <= 0 or self.detection_threshold <= 0 or self.xtol <= 0:
            raise InvalidInputError("lineshape fit tolerances must be positive")
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be at least 1")


@dataclass(frozen=True)
class LinearityWarning:
    label: ResonanceLabel
    ratio: float

    def __str__(self) -> str:
        return (
            f"resonance {self.label}: modulation is {self.ratio:.3g} x linewidth, "
            "outside the linear regime"
        )


def derivative_gaussian(freqs, center: float, sigma: float) -> np.ndarray:
    u = (center - np.asarray(freqs, dtype=float)) / sigma
    return u * np.exp(0.5 - 0.5 * u * u)


def model_channels(freqs, fits: Sequence[LineshapeFit]) -> Tuple[np.ndarray, np.ndarray]:
    signal = np.zeros(len(freqs), dtype=complex)
    for fit in fits:
        signal += fit.amplitude * derivative_gaussian(freqs, fit.center, fit.sigma)
    return signal.real, signal.imag


def channel_noise(spectrum: QuadratureSpectrum, fits: Sequence[LineshapeFit]) -> Tuple[float, float]:
    """Residual standard deviation of each channel after removing the fitted lines."""
    mx, my = model_channels(spectrum.freqs, fits)
    # center and width are shared, so each channel carries half of them
    dof = max(len(spectrum) - 3 * len(fits), 1)
    sx = np.sqrt(np.sum((spectrum.x_channel - mx) ** 2) / dof)
    sy = np.sqrt(np.sum((spectrum.y_channel - my) ** 2) / dof)
    return float(sx), float(sy)


def detect_resonances(
    spectrum: QuadratureSpectrum, n_resonances: int, settings: Optional[FitSettings] = None
) -> np.ndarray:
    settings = settings or FitSettings()
    envelope = spectrum.x_channel ** 2 + spectrum.y_channel ** 2
    step = float(np.median(np.diff(spectrum.freqs)))
    # smoothing over one linewidth merges the two lobes of each line into one peak
    smoothed = gaussian_filter1d(envelope, max(settings.linewidth_guess / step, 1.0), mode="nearest")
    floor = float(np.median(smoothed))
    height = max(settings.detection_threshold * floor, 1e-9 * float(smoothed.max()))
    peaks, props = find_peaks(smoothed, height=height) if smoothed.max() > 0 else (np.array([], int), {})
    found = spectrum.freqs[peaks]
    logger.debug("detected %d candidate resonances (floor %.3g)", len(peaks), floor)
    if len(peaks) < n_resonances:
        raise DetectionError(
            f"found {len(peaks)} candidate resonances, need {n_resonances}",
            found_centers=found,
            stage="lineshape-fit",
        )
    strongest = peaks[np.argsort(props["peak_heights"])[len(peaks) - n_resonances:]]
    return np.sort(spectrum.freqs[strongest])


def estimate_sigma(spectrum: QuadratureSpectrum, center: float, guess: float) -> float:
    """Half the distance between the two lobes of the line at `center`."""
    window = np.abs(spectrum.freqs - center) <= 3.0 * guess
    if window.sum() < 5:
        return guess
    x = spectrum.x_channel[window]
    y = spectrum.y_channel[window]
    psi = 0.5 * np.arctan2(2.0 * np.dot(x, y), np.dot(x, x) - np.dot(y, y))
    projected = x * np.cos(psi) + y * np.sin(psi)
    f = spectrum.freqs[window]
    spread = 0.5 * abs(f[np.argmax(projected)] - f[np.argmin(projected)])
    return float(np.clip(spread, 0.25 * guess, 4.0 * guess))


def covariance_from_jacobian(jacobian, cost, n_data, n_params, rcond=1e-12) -> np.ndarray:
    dof = max(1, n_data - n_params)
    scale = 2 * cost / dof
    _, s, vt = np.linalg.svd(jacobian, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((n_params, n_params))
    inv_s2 = np.where(s > rcond * s[0], 1.0 / np.maximum(s, 1e-300) ** 2, 0.0)
    return scale * (vt.T * inv_s2) @ vt


def _design_matrix(freqs, centers, sigmas) -> np.ndarray:
    return np.column_stack([derivative_gaussian(freqs, c, s) for c, s in zip(centers, sigmas)])


def _window_rms(spectrum, residual_x, residual_y, center, sigma) -> float:
    window = np.abs(spectrum.freqs - center) <= 3.0 * sigma
    if not window.any():
        return 0.0
    return float(np.sqrt(np.mean(residual_x[window] ** 2 + residual_y[window] ** 2)))


def _package(spectrum, centers, sigmas, amplitudes, amp_err, center_err, converged) -> List[LineshapeFit]:
    order = np.argsort(centers)
    provisional = [
        LineshapeFit(float(centers[k]), float(sigmas[k]), complex(amplitudes[k]), 0.0)
        for k in order
    ]
    mx, my = model_channels(spectrum.freqs, provisional)
    rx = spectrum.x_channel - mx
    ry = spectrum.y_channel - my
    return [
        replace(
            fit,
            residual_rms=_window_rms(spectrum, rx, ry, fit.center, fit.sigma),
            amplitude_error=float(amp_err[k]),
            center_error=float(center_err[k]),
            converged=converged,
        )
        for fit, k in zip(provisional, order)
    ]


def _fit_amplitudes(spectrum, centers, sigmas) -> List[LineshapeFit]:
    design = _design_matrix(spectrum.freqs, centers, sigmas)
    coef_x, *_ = np.linalg.lstsq(design, spectrum.x_channel, rcond=None)
    coef_y, *_ = np.linalg.lstsq(design, spectrum.y_channel, rcond=None)
    residual = np.concatenate([design @ coef_x - spectrum.x_channel, design @ coef_y - spectrum.y_channel])
    cost = 0.5 * float(residual @ residual)
    cov = covariance_from_jacobian(design, cost / 2.0, len(spectrum), len(centers))
    amp_err = np.sqrt(2.0 * np.clip(np.diag(cov), 0.0, None))
    return _package(
        spectrum, np.asarray(centers), np.asarray(sigmas), coef_x + 1j * coef_y,
        amp_err, np.zeros(len(centers)), True,
    )


def fit_lineshapes(
    spectrum: QuadratureSpectrum,
    n_resonances: int,
    initial_centers: Optional[Sequence[float]] = None,
    *,
    initial_sigmas: Optional[Sequence[float]] = None,
    fixed_geometry: bool = False,
    settings: Optional[FitSettings] = None,
) -> List[LineshapeFit]:
    """Fit `n_resonances` derivative-Gaussian lines to both quadratures.

    Fits come back sorted by center. With `fixed_geometry` the supplied
    centers and widths are held and only the complex amplitudes are solved.
    """
    settings = settings or FitSettings()
    if n_resonances < 1:
        raise InvalidInputError("n_resonances must be at least 1")
    f_lo, f_hi = spectrum.span

    if initial_centers is None:
        if fixed_geometry:
            raise InvalidInputError("fixed geometry needs initial centers")
        centers0 = detect_resonances(spectrum, n_resonances, settings)
        sigmas_given = None
    else:
        centers0 = np.asarray(initial_centers, dtype=float)
        if len(centers0) != n_resonances:
            raise InvalidInputError(
                f"got {len(centers0)} initial centers for {n_resonances} resonances"
            )
        if np.any(centers0 <= f_lo) or np.any(centers0 >= f_hi):
            raise InvalidInputError("initial centers must lie inside the spectrum span")
        sigmas_given = initial_sigmas

    if sigmas_given is not None:
        sigmas0 = np.asarray(sigmas_given, dtype=float)
        if len(sigmas0) != n_resonances or np.any(sigmas0 <= 0):
            raise InvalidInputError("initial sigmas must be positive, one per resonance")
    else:
        sigmas0 = np.array([estimate_sigma(spectrum, c, settings.linewidth_guess) for c in centers0])
    order = np.argsort(centers0)
    centers0, sigmas0 = centers0[order], sigmas0[order]

    if fixed_geometry:
        return _fit_amplitudes(spectrum, centers0, sigmas0)

    freqs = spectrum.freqs
    n = n_resonances
    sigma_ref = float(np.median(sigmas0))
    amp_ref = float(max(np.max(np.abs(spectrum.x_channel)), np.max(np.abs(spectrum.y_channel))))
    if amp_ref == 0.0:
        amp_ref = 1.0
    target = np.concatenate([spectrum.x_channel, spectrum.y_channel]) / amp_ref

    # layout per resonance: [center offset / sigma_ref, sigma / sigma_ref, a_x, a_y]
    start = _fit_amplitudes(spectrum, centers0, sigmas0)
    p0 = np.zeros(4 * n)
    p0[1::4] = sigmas0 / sigma_ref
    for k, fit in enumerate(start):
        p0[4 * k + 2] = fit.amplitude.real / amp_ref
        p0[4 * k + 3] = fit.amplitude.imag / amp_ref

    lower = np.full(4 * n, -np.inf)
    upper = np.full(4 * n, np.inf)
    lower[0::4] = (f_lo - centers0) / sigma_ref
    upper[0::4] = (f_hi - centers0) / sigma_ref
    lower[1::4] = 1e-3
    upper[1::4] = (f_hi - f_lo) / sigma_ref
    p0[1::4] = np.clip(p0[1::4], 2e-3, 0.5 * upper[1::4])

    def unpack(p):
        centers = centers0 + sigma_ref * p[0::4]
        sigmas = sigma_ref * p[1::4]
        return centers, sigmas, p[2::4], p[3::4]

    def residual(p):
        centers, sigmas, ax, ay = unpack(p)
        g = _design_matrix(freqs, centers, sigmas)
        return np.concatenate([g @ ax, g @ ay]) - target

    def jacobian(p):
        centers, sigmas, ax, ay = unpack(p)
        u = (centers[None, :] - freqs[:, None]) / sigmas[None, :]
        e = np.exp(0.5 - 0.5 * u * u)
        g = u * e
        dg_du = (1.0 - u * u) * e
        dg_dd = dg_du * (sigma_ref / sigmas[None, :])
        dg_dw = -dg_du * u * (sigma_ref / sigmas[None, :])
        jac = np.zeros((2 * len(freqs), 4 * n))
        top, bottom = slice(0, len(freqs)), slice(len(freqs), None)
        jac[top, 0::4] = dg_dd * ax
        jac[bottom, 0::4] = dg_dd * ay
        jac[top, 1::4] = dg_dw * ax
        jac[bottom, 1::4] = dg_dw * ay
        jac[top, 2::4] = g
        jac[bottom, 3::4] = g
        return jac

    result = least_squares(
        residual,
        p0,
        jac=jacobian,
        bounds=(lower, upper),
        method="trf",
        x_scale=1.0,
        xtol=settings.xtol,
        ftol=1e-12,
        gtol=1e-12,
        max_nfev=settings.max_iterations,
    )
    centers, sigmas, ax, ay = unpack(result.x)
    cov = covariance_from_jacobian(result.jac, result.cost, len(target), len(result.x))
    var = np.clip(np.diag(cov), 0.0, None)
    amp_err = amp_ref * np.sqrt(var[2::4] + var[3::4])
    center_err = sigma_ref * np.sqrt(var[0::4])
    converged = result.status > 0
    fits = _package(
        spectrum, centers, sigmas, amp_ref * (ax + 1j * ay), amp_err, center_err, converged
    )
    logger.debug(
        "lineshape fit: %d resonances, status %d after %d evaluations, cost %.3g",
        n, result.status, result.nfev, 2.0 * result.cost * amp_ref ** 2,
    )
    if not converged:
        raise ConvergenceError(
            f"lineshape fit did not converge within {settings.max_iterations} iterations",
            best_effort=fits,
            stage="lineshape-fit",
        )
    return fits


def calibrate_modulations(
    ac_fits: Sequence[LineshapeFit],
    cal: FmCalibration,
    assignment: Sequence[ResonanceLabel],
    *,
    phase_reference: bool = False,
) -> ModulationSet:
    """M_AC = A_AC / |A_FM| * M_FM per resonance, relabelled by `assignment`.

    With `phase_reference` the complex A_FM is divided out instead, removing
    the instrument phase common to the FM and AC measurements.
    """
    if not (len(ac_fits) == len(cal.fm_fits) == len(assignment) == 8):
        raise InvalidInputError("calibration needs 8 AC fits, 8 FM fits and 8 labels")
    values: Dict[ResonanceLabel, complex] = {}
    sigma: Dict[ResonanceLabel, float] = {}
    for ac, fm, label in zip(ac_fits, cal.fm_fits, assignment):
        label = ResonanceLabel(*label)
        reference = abs(fm.amplitude)
        if not reference > 10.0 * fm.amplitude_error:
            raise CalibrationError(
                f"FM amplitude of resonance {label} is not resolved above its uncertainty",
                stage="calibration",
                details={
                    "label": str(label),
                    "amplitude": reference,
                    "amplitude_error": fm.amplitude_error,
                },
            )
        if abs(ac.center - fm.center) > max(ac.sigma, fm.sigma):
            logger.warning(
                "resonance %s: AC center %.6g Hz is far from FM center %.6g Hz",
                label, ac.center, fm.center,
            )
        if phase_reference:
            m = ac.amplitude / fm.amplitude * cal.m_fm
        else:
            m = ac.amplitude / reference * cal.m_fm
        values[label] = m
        sigma[label] = float(
            np.hypot(ac.amplitude_error / reference * cal.m_fm, abs(m) * fm.amplitude_error / reference)
        )
    return ModulationSet.from_labels(values, sigma)


def linearity_guard(
    mods: ModulationSet,
    fits: Sequence[LineshapeFit],
    assignment: Sequence[ResonanceLabel],
    ratio: float = 0.2,
) -> List[LinearityWarning]:
    warnings = []
    for fit, label in zip(fits, assignment):
        label = ResonanceLabel(*label)
        r = abs(mods[label]) / fit.sigma
        if r > ratio:
            warnings.append(LinearityWarning(label, float(r)))
    for w in warnings:
        logger.warning("%s", w)
    return warnings
