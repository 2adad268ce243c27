from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations, product
from typing import Dict, List, Tuple, TypeVar, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError
from .spin import ORIENTATIONS, ComplexFieldVector, Frame, RealFieldVector

# <111> family, one axis per NV sub-ensemble
NV_AXES = np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ]
) / np.sqrt(3.0)

_ORTHONORMAL_TOL = 1e-12
_AXIS_TOL = 1e-9

Field = TypeVar("Field", RealFieldVector, ComplexFieldVector)


def _check_rotation(matrix: np.ndarray, name: str) -> None:
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        raise InvalidInputError(f"{name} must be a finite 3x3 matrix")
    if np.max(np.abs(matrix @ matrix.T - np.eye(3))) > _ORTHONORMAL_TOL:
        raise InvalidInputError(f"{name} is not orthonormal")
    if abs(np.linalg.det(matrix) - 1.0) > _ORTHONORMAL_TOL:
        raise InvalidInputError(f"{name} is not a proper rotation")


@dataclass(frozen=True, eq=False)
class OrientationSet:
    """rotations[i] maps crystal-frame vectors into the frame of NV i+1."""

    rotations: Tuple[np.ndarray, ...]
    crystal_to_lab: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        rotations = tuple(np.array(r, dtype=float) for r in self.rotations)
        if len(rotations) != 4:
            raise InvalidInputError(f"expected 4 NV rotations, got {len(rotations)}")
        for i, r in enumerate(rotations):
            _check_rotation(r, f"rotation {i + 1}")
            axis = r[2]
            # an axis may point either way along its <111> direction
            if min(np.max(np.abs(axis - NV_AXES[i])), np.max(np.abs(axis + NV_AXES[i]))) > _AXIS_TOL:
                raise InvalidInputError(
                    f"rotation {i + 1} z-axis {axis} is not {NV_AXES[i] * np.sqrt(3)}/sqrt(3)"
                )
            r.setflags(write=False)
        lab = np.array(self.crystal_to_lab, dtype=float)
        _check_rotation(lab, "crystal_to_lab")
        lab.setflags(write=False)
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "crystal_to_lab", lab)

    @property
    def stacked(self) -> np.ndarray:
        """(4, 3, 3) array of the crystal-to-NV rotations."""
        return np.stack(self.rotations)

    @property
    def nv_axes(self) -> np.ndarray:
        """NV z-axes in crystal coordinates, one row per orientation."""
        return self.stacked[:, 2, :]

    def to_dict(self) -> Dict[str, List]:
        return {
            "rotations": [r.tolist() for r in self.rotations],
            "crystal_to_lab": self.crystal_to_lab.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, List]) -> "OrientationSet":
        try:
            rotations = tuple(np.array(r, dtype=float) for r in payload["rotations"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed orientation set: {exc}") from exc
        lab = payload.get("crystal_to_lab", np.eye(3).tolist())
        return cls(rotations, np.array(lab, dtype=float))


def _transverse_axis(axis: np.ndarray) -> np.ndarray:
    for reference in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        projected = reference - np.dot(reference, axis) * axis
        norm = np.linalg.norm(projected)
        if norm > 1e-9:
            return projected / norm
    raise InvalidInputError(f"no transverse axis for {axis}")


@lru_cache(maxsize=1)
def default_orientation_set() -> OrientationSet:
    rotations = []
    for axis in NV_AXES:
        x = _transverse_axis(axis)
        y = np.cross(axis, x)
        rotations.append(np.vstack([x, y, axis]))
    return OrientationSet(tuple(rotations), np.eye(3))


def _rotate(matrix: np.ndarray, b: Field, frame: Frame) -> Field:
    if isinstance(b, ComplexFieldVector):
        return ComplexFieldVector.from_array(matrix @ b.as_array(), frame)
    return RealFieldVector.from_array(matrix @ b.as_array(), frame)


def _require_frame(b: Union[RealFieldVector, ComplexFieldVector], frame: Frame) -> None:
    if b.frame != frame:
        raise InvalidInputError(f"expected a {frame.value}-frame field, got {b.frame.value}")


def to_nv_frame(orient: OrientationSet, i: int, b: Field) -> Field:
    if i not in ORIENTATIONS:
        raise InvalidInputError(f"orientation index {i} out of range 1..4")
    _require_frame(b, Frame.CRYSTAL)
    return _rotate(orient.rotations[i - 1], b, Frame.nv(i))


def from_nv_frame(orient: OrientationSet, b: Field) -> Field:
    if not b.frame.is_nv:
        raise InvalidInputError(f"expected an NV-frame field, got {b.frame.value}")
    return _rotate(orient.rotations[b.frame.orientation - 1].T, b, Frame.CRYSTAL)


def to_lab_frame(orient: OrientationSet, b: Field) -> Field:
    _require_frame(b, Frame.CRYSTAL)
    return _rotate(orient.crystal_to_lab, b, Frame.LAB)


def to_crystal_frame(orient: OrientationSet, b: Field) -> Field:
    _require_frame(b, Frame.LAB)
    return _rotate(orient.crystal_to_lab.T, b, Frame.CRYSTAL)


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0 or not np.isfinite(norm):
        raise InvalidInputError("rotation axis must be a finite non-zero vector")
    return Rotation.from_rotvec(axis / norm * angle).as_matrix()


@lru_cache(maxsize=1)
def crystal_symmetries() -> Tuple[np.ndarray, ...]:
    """The 48 signed permutations; each maps the NV axes onto themselves up to sign."""
    matrices = []
    for perm in permutations(range(3)):
        for signs in product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, col in enumerate(perm):
                m[row, col] = signs[row]
            m.setflags(write=False)
            matrices.append(m)
    return tuple(matrices)


def axis_permutation(symmetry: np.ndarray) -> Tuple[int, ...]:
    """Orientation j (1-based) that each orientation i is mapped onto by `symmetry`."""
    images = NV_AXES @ np.asarray(symmetry).T
    mapping = []
    for image in images:
        match = np.flatnonzero(np.abs(np.abs(NV_AXES @ image) - 1.0) < 1e-9)
        if len(match) != 1:
            raise InvalidInputError("matrix does not permute the NV axes")
        mapping.append(int(match[0]) + 1)
    return tuple(mapping)
