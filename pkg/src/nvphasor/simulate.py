"""Synthetic lock-in ODMR spectra from known bias and phasor fields.

Generation only uses the forward model: the spin Hamiltonian, the crystal
geometry, the derivative-Gaussian lineshape and the coupled-coil phasors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError
from .geometry import OrientationSet, default_orientation_set, rotation_about
from .lineshape import QuadratureSpectrum, derivative_gaussian
from .polarization import CoupledCoilModel, coupled_coil_phasors
from .spin import (
    ALL_LABELS,
    ComplexFieldVector,
    ModulationSet,
    RealFieldVector,
    SpinModelParams,
    modulation_depths,
    transition_frequencies,
)

logger = logging.getLogger(__name__)

DEFAULT_BIAS_FIELD = (1.0e-3, 2.5e-3, 5.0e-3)  # T, canonical ordering
DEFAULT_AC_AMPLITUDE = 2e-6  # T
DEFAULT_FREQ_SPAN = (2.65e9, 3.10e9, 2001)
# minor/major ratio giving eccentricity 0.9983
ROTATING_COIL_MINOR_RATIO = float(np.sqrt(1.0 - 0.9983 ** 2))
_HARMONIC_SAMPLES = 64

Contrast = Union[float, Tuple[float, ...]]


@dataclass(frozen=True)
class SyntheticScenario:
    params: SpinModelParams = field(default_factory=SpinModelParams)
    orient: OrientationSet = field(default_factory=default_orientation_set)
    b_dc: RealFieldVector = field(default_factory=lambda: RealFieldVector(*DEFAULT_BIAS_FIELD))
    b_ac: ComplexFieldVector = field(
        default_factory=lambda: ComplexFieldVector.from_array(
            DEFAULT_AC_AMPLITUDE * np.array([1.0, 1j * ROTATING_COIL_MINOR_RATIO, 0.0])
        )
    )
    linewidth_sigma: float = 4e6
    contrast: Contrast = 1.0
    m_fm: float = 1e5
    freq_span: Tuple[float, float, int] = DEFAULT_FREQ_SPAN
    noise_std: float = 0.01
    seed: int = 0
    nonlinear: bool = False
    instrument_phase: float = 0.0
    demod_frequency: float = 777.0

    def __post_init__(self):
        if isinstance(self.contrast, (list, tuple, np.ndarray)):
            contrast = tuple(float(c) for c in self.contrast)
            if len(contrast) != 8:
                raise InvalidInputError("contrast needs one value or one per resonance (8)")
            object.__setattr__(self, "contrast", contrast)
        start, stop, n = self.freq_span
        object.__setattr__(self, "freq_span", (float(start), float(stop), int(n)))
        if not stop > start or int(n) < 50:
            raise InvalidInputError("freq_span needs start < stop and at least 50 points")
        if self.noise_std < 0:
            raise InvalidInputError("noise_std must be non-negative")
        if not self.linewidth_sigma > 0 or not self.m_fm > 0:
            raise InvalidInputError("linewidth_sigma and m_fm must be positive")
        for name in ("b_dc", "b_ac"):
            if getattr(self, name).frame.value != "crystal":
                raise InvalidInputError(f"{name} must be given in the crystal frame")
        centers = self.resonance_centers()
        margin = 5.0 * self.linewidth_sigma
        if centers.min() - margin < start or centers.max() + margin > stop:
            raise InvalidInputError(
                f"resonances {centers.min():.6g}..{centers.max():.6g} Hz +/- 5 sigma "
                f"fall outside the sweep {start:.6g}..{stop:.6g} Hz"
            )

    @property
    def freqs(self) -> np.ndarray:
        start, stop, n = self.freq_span
        return np.linspace(start, stop, n)

    @property
    def contrasts(self) -> np.ndarray:
        """Per-resonance contrast in ModulationSet layout (4, 2)."""
        if isinstance(self.contrast, tuple):
            return np.array(self.contrast, dtype=float).reshape(4, 2)
        return np.full((4, 2), float(self.contrast))

    def resonance_centers(self) -> np.ndarray:
        """(4, 2) predicted [f_minus, f_plus] per orientation."""
        return transition_frequencies(self.params, self.orient.stacked @ self.b_dc.as_array())

    def modulations(self) -> ModulationSet:
        rotations = self.orient.stacked
        dc = rotations @ self.b_dc.as_array()
        ac = self.b_ac.as_array()
        real = modulation_depths(self.params, dc, rotations @ ac.real)
        imag = modulation_depths(self.params, dc, rotations @ ac.imag)
        return ModulationSet(real + 1j * imag)

    def to_dict(self) -> Dict:
        b_ac = self.b_ac.as_array()
        return {
            "spin": self.params.to_dict(),
            "orientations": self.orient.to_dict(),
            "b_dc_t": self.b_dc.as_array().tolist(),
            "b_ac_t": {"real": b_ac.real.tolist(), "imag": b_ac.imag.tolist()},
            "linewidth_sigma_hz": self.linewidth_sigma,
            "contrast": list(self.contrast) if isinstance(self.contrast, tuple) else self.contrast,
            "m_fm_hz": self.m_fm,
            "freq_span": list(self.freq_span),
            "noise_std": self.noise_std,
            "seed": self.seed,
            "nonlinear": self.nonlinear,
            "instrument_phase_rad": self.instrument_phase,
            "demod_frequency_hz": self.demod_frequency,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "SyntheticScenario":
        known = set(cls().to_dict())
        unknown = set(payload) - known
        if unknown:
            raise InvalidInputError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        defaults = cls()
        kwargs = {}
        try:
            if "spin" in payload:
                kwargs["params"] = SpinModelParams.from_dict(payload["spin"])
            if "orientations" in payload:
                kwargs["orient"] = OrientationSet.from_dict(payload["orientations"])
            if "b_dc_t" in payload:
                kwargs["b_dc"] = RealFieldVector.from_array(payload["b_dc_t"])
            if "b_ac_t" in payload:
                b = payload["b_ac_t"]
                kwargs["b_ac"] = ComplexFieldVector.from_array(
                    np.asarray(b["real"], dtype=float) + 1j * np.asarray(b["imag"], dtype=float)
                )
            simple = {
                "linewidth_sigma_hz": ("linewidth_sigma", float),
                "m_fm_hz": ("m_fm", float),
                "noise_std": ("noise_std", float),
                "seed": ("seed", int),
                "nonlinear": ("nonlinear", bool),
                "instrument_phase_rad": ("instrument_phase", float),
                "demod_frequency_hz": ("demod_frequency", float),
            }
            for key, (name, cast) in simple.items():
                if key in payload:
                    kwargs[name] = cast(payload[key])
            if "contrast" in payload:
                c = payload["contrast"]
                kwargs["contrast"] = tuple(c) if isinstance(c, list) else float(c)
            if "freq_span" in payload:
                kwargs["freq_span"] = tuple(payload["freq_span"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInputError):
                raise
            raise InvalidInputError(f"malformed scenario: {exc}") from exc
        return replace(defaults, **kwargs)

    def truth(self) -> Dict:
        """Ground truth recorded next to generated spectra."""
        centers = self.resonance_centers()
        return {
            "b_dc_t": self.b_dc.as_array().tolist(),
            "b_ac_t": self.to_dict()["b_ac_t"],
            "centers_hz": {
                str(label): float(centers[label.orientation - 1, 0 if label.branch == "-" else 1])
                for label in ALL_LABELS
            },
            "modulations_hz": self.modulations().to_dict(),
        }


def _overlap_warnings(centers: np.ndarray, sigma: float) -> List[str]:
    flat = centers.ravel()
    warnings = []
    for a in range(len(flat)):
        for b in range(a + 1, len(flat)):
            separation = abs(flat[a] - flat[b])
            if separation < 3.0 * sigma:
                warnings.append(
                    f"resonances {ALL_LABELS[a]} and {ALL_LABELS[b]} are {separation:.3g} Hz apart "
                    f"(< 3 sigma)"
                )
    return warnings


def _first_harmonic(freqs, centers, shifts, sigma, depth) -> np.ndarray:
    """Lock-in first harmonic of Gaussian dips whose resonances move as Re[shift/2 e^{i tau}].

    Scaled so that small shifts reproduce depth * shift * g(f).
    """
    tau = 2.0 * np.pi * np.arange(_HARMONIC_SAMPLES) / _HARMONIC_SAMPLES
    reference = np.exp(-1j * tau)
    signal = np.zeros(len(freqs), dtype=complex)
    for center, shift, k in zip(centers, shifts, depth):
        # dip amplitude fixed by the small-signal limit of the derivative lineshape
        dip = 2.0 * sigma * k * np.exp(0.5)
        detuning = (freqs[:, None] - center) - np.real(0.5 * shift * np.exp(1j * tau))[None, :]
        profile = -dip * np.exp(-0.5 * (detuning / sigma) ** 2)
        signal += (2.0 / _HARMONIC_SAMPLES) * (profile @ reference)
    return signal


def _spectrum(s: SyntheticScenario, signal: np.ndarray, noise: np.ndarray, kind: str) -> QuadratureSpectrum:
    signal = signal * np.exp(1j * s.instrument_phase)
    return QuadratureSpectrum(
        s.freqs,
        signal.real + noise[0],
        signal.imag + noise[1],
        demod_frequency=s.demod_frequency,
        metadata={"kind": kind, "seed": str(s.seed), "source": "synthetic"},
    )


def generate_pair(s: SyntheticScenario) -> Tuple[QuadratureSpectrum, QuadratureSpectrum]:
    """(FM calibration spectrum, AC spectrum) for a scenario."""
    freqs = s.freqs
    centers = s.resonance_centers().ravel()
    modulations = s.modulations().values.ravel()
    contrast = s.contrasts.ravel()
    sigma = s.linewidth_sigma

    for w in _overlap_warnings(s.resonance_centers(), sigma):
        logger.warning("%s", w)

    if s.nonlinear:
        depth = contrast / s.m_fm
        fm_signal = _first_harmonic(freqs, centers, np.full(8, s.m_fm), sigma, depth)
        ac_signal = _first_harmonic(freqs, centers, modulations, sigma, depth)
    else:
        shapes = np.column_stack([derivative_gaussian(freqs, c, sigma) for c in centers])
        fm_signal = shapes @ contrast.astype(complex)
        ac_signal = shapes @ (contrast * modulations / s.m_fm)

    rng = np.random.default_rng(s.seed)
    noise = rng.normal(0.0, s.noise_std, size=(4, len(freqs))) if s.noise_std > 0 else np.zeros((4, len(freqs)))
    return _spectrum(s, fm_signal, noise[:2], "fm"), _spectrum(s, ac_signal, noise[2:], "ac")


@dataclass(frozen=True)
class SeriesRecord:
    """One generated spectrum pair plus the scenario that produced it."""

    name: str
    scenario: SyntheticScenario
    fm: QuadratureSpectrum
    ac: QuadratureSpectrum
    angle: Optional[float] = None


def rotating_coil_scenario(
    amplitude: float = DEFAULT_AC_AMPLITUDE,
    minor_ratio: float = ROTATING_COIL_MINOR_RATIO,
    **kwargs,
) -> SyntheticScenario:
    """Nearly linear in-plane drive with a small out-of-phase orthogonal part."""
    b_ac = ComplexFieldVector.from_array(amplitude * np.array([1.0, 1j * minor_ratio, 0.0]))
    return SyntheticScenario(b_ac=b_ac, **kwargs)


def generate_rotation_series(
    base: SyntheticScenario, n_angles: int, axis: Sequence[float] = (0.0, 0.0, 1.0)
) -> List[SeriesRecord]:
    if n_angles < 3:
        raise InvalidInputError("a rotation series needs at least 3 angles")
    records = []
    phasor = base.b_ac.as_array()
    for k in range(n_angles):
        angle = 2.0 * np.pi * k / n_angles
        rotated = rotation_about(axis, angle) @ phasor
        scenario = replace(base, b_ac=ComplexFieldVector.from_array(rotated), seed=base.seed + k)
        fm, ac = generate_pair(scenario)
        records.append(SeriesRecord(f"angle_{k:02d}", scenario, fm, ac, angle))
    return records


def generate_crossed_coils(base: SyntheticScenario, model: CoupledCoilModel) -> List[SeriesRecord]:
    """Spectrum pairs for coil a alone, coil b alone and both driven together."""
    records = []
    for k, (name, phasor) in enumerate(zip(("a", "b", "ab"), coupled_coil_phasors(model))):
        scenario = replace(base, b_ac=phasor, seed=base.seed + k)
        fm, ac = generate_pair(scenario)
        records.append(SeriesRecord(f"coil_{name}", scenario, fm, ac))
    return records
