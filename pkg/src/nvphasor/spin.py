from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, NamedTuple, Optional, Tuple

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_ZERO_FIELD_SPLITTING = 2.87e9  # Hz
DEFAULT_GYROMAGNETIC_RATIO = 2.8e10  # Hz/T

BRANCHES = ("-", "+")
ORIENTATIONS = (1, 2, 3, 4)

# Spin-1 operators in the {|+1>, |0>, |-1>} basis
_SX = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / np.sqrt(2.0)
_SY = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / np.sqrt(2.0)
_SZ = np.diag([1.0, 0.0, -1.0]).astype(complex)
_ZFS = _SZ @ _SZ - (2.0 / 3.0) * np.eye(3)

# steps used when following the |0> level through an anticrossing
_CONTINUATION_STEPS = 256


class Frame(str, Enum):
    LAB = "lab"
    CRYSTAL = "crystal"
    NV1 = "nv1"
    NV2 = "nv2"
    NV3 = "nv3"
    NV4 = "nv4"

    @classmethod
    def nv(cls, orientation: int) -> "Frame":
        if orientation not in ORIENTATIONS:
            raise InvalidInputError(f"orientation index {orientation} out of range 1..4")
        return cls(f"nv{orientation}")

    @property
    def is_nv(self) -> bool:
        return self.value.startswith("nv")

    @property
    def orientation(self) -> Optional[int]:
        return int(self.value[2]) if self.is_nv else None


class ResonanceLabel(NamedTuple):
    branch: str
    orientation: int

    def __str__(self) -> str:
        return f"{self.branch}{self.orientation}"

    @classmethod
    def parse(cls, text: str) -> "ResonanceLabel":
        text = text.strip()
        if len(text) != 2 or text[0] not in BRANCHES or not text[1].isdigit():
            raise InvalidInputError(f"malformed resonance label {text!r}")
        label = cls(text[0], int(text[1]))
        if label.orientation not in ORIENTATIONS:
            raise InvalidInputError(f"malformed resonance label {text!r}")
        return label


ALL_LABELS = tuple(ResonanceLabel(b, i) for i in ORIENTATIONS for b in BRANCHES)


@dataclass(frozen=True)
class SpinModelParams:
    zero_field_splitting: float = DEFAULT_ZERO_FIELD_SPLITTING
    gyromagnetic_ratio: float = DEFAULT_GYROMAGNETIC_RATIO

    def __post_init__(self):
        if not (np.isfinite(self.zero_field_splitting) and self.zero_field_splitting > 0):
            raise InvalidInputError("zero-field splitting D must be positive")
        if not (np.isfinite(self.gyromagnetic_ratio) and self.gyromagnetic_ratio > 0):
            raise InvalidInputError("gyromagnetic ratio must be positive")

    def to_dict(self) -> Dict[str, float]:
        return {
            "zero_field_splitting_hz": self.zero_field_splitting,
            "gyromagnetic_ratio_hz_per_t": self.gyromagnetic_ratio,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, float]) -> "SpinModelParams":
        return cls(
            zero_field_splitting=float(
                payload.get("zero_field_splitting_hz", DEFAULT_ZERO_FIELD_SPLITTING)
            ),
            gyromagnetic_ratio=float(
                payload.get("gyromagnetic_ratio_hz_per_t", DEFAULT_GYROMAGNETIC_RATIO)
            ),
        )


@dataclass(frozen=True)
class RealFieldVector:
    bx: float
    by: float
    bz: float
    frame: Frame = Frame.CRYSTAL

    def __post_init__(self):
        object.__setattr__(self, "frame", Frame(self.frame))
        if not np.all(np.isfinite([self.bx, self.by, self.bz])):
            raise InvalidInputError(f"non-finite field components {self.as_array()}")

    def __repr__(self) -> str:
        return f"RealFieldVector({self.bx:.6g}, {self.by:.6g}, {self.bz:.6g} T, {self.frame.value})"

    def __iter__(self) -> Iterator[float]:
        return iter((self.bx, self.by, self.bz))

    def __neg__(self) -> "RealFieldVector":
        return RealFieldVector(-self.bx, -self.by, -self.bz, self.frame)

    def as_array(self) -> np.ndarray:
        return np.array([self.bx, self.by, self.bz], dtype=float)

    @classmethod
    def from_array(cls, values, frame: Frame = Frame.CRYSTAL) -> "RealFieldVector":
        arr = np.asarray(values, dtype=float).reshape(3)
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), frame)

    @classmethod
    def zero(cls, frame: Frame = Frame.CRYSTAL) -> "RealFieldVector":
        return cls(0.0, 0.0, 0.0, frame)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def scaled(self, factor: float) -> "RealFieldVector":
        return RealFieldVector.from_array(self.as_array() * factor, self.frame)


@dataclass(frozen=True)
class ComplexFieldVector:
    """Phasor B = B' + iB''; the physical field is Re[B exp(i w t)]."""

    real_part: RealFieldVector
    imag_part: RealFieldVector

    def __post_init__(self):
        if self.real_part.frame != self.imag_part.frame:
            raise InvalidInputError(
                f"phasor parts disagree on frame: {self.real_part.frame.value} "
                f"vs {self.imag_part.frame.value}"
            )

    def __neg__(self) -> "ComplexFieldVector":
        return ComplexFieldVector(-self.real_part, -self.imag_part)

    @property
    def frame(self) -> Frame:
        return self.real_part.frame

    def as_array(self) -> np.ndarray:
        return self.real_part.as_array() + 1j * self.imag_part.as_array()

    @classmethod
    def from_array(cls, values, frame: Frame = Frame.CRYSTAL) -> "ComplexFieldVector":
        arr = np.asarray(values, dtype=complex).reshape(3)
        return cls(
            RealFieldVector.from_array(arr.real, frame),
            RealFieldVector.from_array(arr.imag, frame),
        )

    @classmethod
    def zero(cls, frame: Frame = Frame.CRYSTAL) -> "ComplexFieldVector":
        return cls(RealFieldVector.zero(frame), RealFieldVector.zero(frame))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    @property
    def amplitudes(self) -> np.ndarray:
        return np.abs(self.as_array())

    @property
    def phases(self) -> np.ndarray:
        return np.angle(self.as_array())

    def times_phase(self, theta: float) -> "ComplexFieldVector":
        return ComplexFieldVector.from_array(self.as_array() * np.exp(1j * theta), self.frame)

    def scaled(self, factor: float) -> "ComplexFieldVector":
        return ComplexFieldVector(self.real_part.scaled(factor), self.imag_part.scaled(factor))


@dataclass(frozen=True)
class ResonancePair:
    f_minus: float
    f_plus: float

    def __post_init__(self):
        if self.f_plus < self.f_minus:
            raise InvalidInputError("f_plus must not be below f_minus")

    @property
    def splitting(self) -> float:
        return self.f_plus - self.f_minus


@dataclass(frozen=True, eq=False)
class ModulationSet:
    """Complex peak-to-peak modulations, values[orientation - 1, branch] with
    branch 0 = '-' and 1 = '+'."""

    values: np.ndarray
    uncertainty: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=complex)
        if values.shape != (4, 2):
            raise InvalidInputError(f"expected 8 modulations shaped (4, 2), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("modulations must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.uncertainty is not None:
            sigma = np.array(self.uncertainty, dtype=float)
            if sigma.shape != (4, 2) or np.any(sigma < 0):
                raise InvalidInputError("modulation uncertainty must be non-negative, shaped (4, 2)")
            sigma.setflags(write=False)
            object.__setattr__(self, "uncertainty", sigma)

    def __getitem__(self, label) -> complex:
        branch, orientation = label
        return complex(self.values[orientation - 1, BRANCHES.index(branch)])

    def __iter__(self) -> Iterator[Tuple[ResonanceLabel, complex]]:
        for label in ALL_LABELS:
            yield label, self[label]

    @property
    def plus(self) -> np.ndarray:
        return self.values[:, 1]

    @property
    def minus(self) -> np.ndarray:
        return self.values[:, 0]

    @classmethod
    def zeros(cls) -> "ModulationSet":
        return cls(np.zeros((4, 2), dtype=complex))

    @classmethod
    def from_labels(cls, mapping, uncertainty=None) -> "ModulationSet":
        values = np.zeros((4, 2), dtype=complex)
        sigma = None if uncertainty is None else np.zeros((4, 2))
        seen = set()
        for label, value in mapping.items():
            branch, orientation = label
            values[orientation - 1, BRANCHES.index(branch)] = value
            if sigma is not None:
                sigma[orientation - 1, BRANCHES.index(branch)] = uncertainty[label]
            seen.add(ResonanceLabel(branch, orientation))
        if seen != set(ALL_LABELS):
            raise InvalidInputError("a modulation set needs all 8 (branch, orientation) labels")
        return cls(values, sigma)

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        payload = {}
        for label, value in self:
            entry = {"real": value.real, "imag": value.imag}
            if self.uncertainty is not None:
                entry["sigma"] = float(
                    self.uncertainty[label.orientation - 1, BRANCHES.index(label.branch)]
                )
            payload[str(label)] = entry
        return payload


def _field_array(b) -> np.ndarray:
    if isinstance(b, RealFieldVector):
        return b.as_array()
    arr = np.asarray(b, dtype=float)
    if arr.shape[-1] != 3:
        raise InvalidInputError(f"field arrays need a trailing axis of length 3, got {arr.shape}")
    return arr


def hamiltonian(params: SpinModelParams, fields) -> np.ndarray:
    """D(Sz^2 - 2/3) + gamma B.S for one field (3,) or a stack (..., 3), in Hz."""
    b = _field_array(fields)
    gamma = params.gyromagnetic_ratio
    zeeman = (
        b[..., 0, None, None] * _SX + b[..., 1, None, None] * _SY + b[..., 2, None, None] * _SZ
    )
    return params.zero_field_splitting * _ZFS + gamma * zeeman


def energy_levels(params: SpinModelParams, fields) -> np.ndarray:
    """Ascending eigenvalues (..., 3) of the Hamiltonian."""
    return np.linalg.eigvalsh(hamiltonian(params, fields))


def _continued_levels(params: SpinModelParams, b: np.ndarray) -> np.ndarray:
    """Follow the |0> level from zero field along t*b, t in (0, 1].

    Returns (E0, E_low, E_high) where E0 is the level connected to |0> and the
    remaining two are sorted.
    """
    d = params.zero_field_splitting
    norm = np.linalg.norm(b)
    # below this the |0> level is isolated (Weyl bound on the Zeeman term)
    t_start = min(1.0, 0.25 * d / (params.gyromagnetic_ratio * norm))
    ts = np.linspace(t_start, 1.0, _CONTINUATION_STEPS)
    values, vectors = np.linalg.eigh(hamiltonian(params, ts[:, None] * b))
    tracked = vectors[0, :, 0]
    index = 0
    for k in range(1, len(ts)):
        overlaps = np.abs(vectors[k].conj().T @ tracked)
        index = int(np.argmax(overlaps))
        tracked = vectors[k, :, index]
    others = np.delete(values[-1], index)
    return np.array([values[-1, index], others[0], others[1]])


def transition_frequencies(params: SpinModelParams, fields) -> np.ndarray:
    """(f_minus, f_plus) for one NV-frame field (3,) or a stack (..., 3)."""
    b = _field_array(fields)
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("non-finite field components")
    levels = energy_levels(params, b)
    flat_b = b.reshape(-1, 3)
    flat_levels = levels.reshape(-1, 3)
    # two levels can only exchange order once gamma*|B| reaches D/2
    strong = params.gyromagnetic_ratio * np.linalg.norm(flat_b, axis=1) >= (
        0.5 * params.zero_field_splitting
    )
    if np.any(strong):
        flat_levels = flat_levels.copy()
        for k in np.flatnonzero(strong):
            flat_levels[k] = _continued_levels(params, flat_b[k])
        logger.debug("adiabatic continuation used for %d strong-field evaluations", strong.sum())
    freqs = flat_levels[:, 1:] - flat_levels[:, :1]
    return freqs.reshape(b.shape[:-1] + (2,))


def resonance_frequencies(params: SpinModelParams, b_nv: RealFieldVector) -> ResonancePair:
    if not b_nv.frame.is_nv:
        raise InvalidInputError(
            f"resonance frequencies need an NV-frame field, got {b_nv.frame.value}"
        )
    f_minus, f_plus = transition_frequencies(params, b_nv.as_array())
    return ResonancePair(float(f_minus), float(f_plus))


def modulation_depths(params: SpinModelParams, b_dc, b_ac) -> np.ndarray:
    """Real peak-to-peak modulations f(B_DC + B_AC) - f(B_DC - B_AC), shape (..., 2)."""
    dc = _field_array(b_dc)
    ac = _field_array(b_ac)
    both = transition_frequencies(params, np.stack(np.broadcast_arrays(dc + ac, dc - ac)))
    return both[0] - both[1]


def complex_modulation(
    params: SpinModelParams, b_dc_nv: RealFieldVector, b_ac_nv: ComplexFieldVector
) -> Tuple[complex, complex]:
    """Returns (m_plus, m_minus) for one NV sub-ensemble."""
    frames = {b_dc_nv.frame, b_ac_nv.frame}
    if len(frames) != 1 or not b_dc_nv.frame.is_nv:
        raise InvalidInputError(
            "complex modulation needs DC and AC fields in the same NV frame, got "
            + ", ".join(sorted(f.value for f in frames))
        )
    dc = b_dc_nv.as_array()
    real = modulation_depths(params, dc, b_ac_nv.real_part.as_array())
    imag = modulation_depths(params, dc, b_ac_nv.imag_part.as_array())
    m_minus = complex(real[0], imag[0])
    m_plus = complex(real[1], imag[1])
    return m_plus, m_minus
