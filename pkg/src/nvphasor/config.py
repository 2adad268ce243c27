from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import InvalidInputError
from .fileio import payload_sha256, read_json
from .geometry import OrientationSet, default_orientation_set
from .lineshape import FitSettings
from .reconstruct import ReconstructionSettings
from .spin import RealFieldVector, SpinModelParams

WORKERS_ENV = "NVPHASOR_WORKERS"
RESAMPLE_MODES = ("data", "model")


@dataclass(frozen=True)
class BootstrapSettings:
    n_replicas: int = 1000
    seed: int = 0
    max_failure_rate: float = 0.1
    resample: str = "data"

    def __post_init__(self):
        if self.n_replicas < 1:
            raise InvalidInputError("n_replicas must be at least 1")
        if not 0.0 <= self.max_failure_rate <= 1.0:
            raise InvalidInputError("max_failure_rate must lie in [0, 1]")
        if self.resample not in RESAMPLE_MODES:
            raise InvalidInputError(f"resample must be one of {', '.join(RESAMPLE_MODES)}")


@dataclass(frozen=True)
class PipelineConfig:
    params: SpinModelParams = field(default_factory=SpinModelParams)
    orient: OrientationSet = field(default_factory=default_orientation_set)
    m_fm: float = 1e5
    n_resonances: int = 8
    lineshape: FitSettings = field(default_factory=FitSettings)
    reconstruction: ReconstructionSettings = field(default_factory=ReconstructionSettings)
    bootstrap: BootstrapSettings = field(default_factory=BootstrapSettings)
    refit_dc_per_spectrum: bool = False
    phase_reference: bool = False
    lock_ac_geometry: bool = True
    linearity_ratio: float = 0.2
    dc_guess: Optional[RealFieldVector] = None

    def __post_init__(self):
        if not self.m_fm > 0:
            raise InvalidInputError("m_fm_hz must be positive")
        if self.n_resonances < 1:
            raise InvalidInputError("n_resonances must be at least 1")
        if not self.linearity_ratio > 0:
            raise InvalidInputError("linearity_ratio must be positive")

    def to_dict(self) -> Dict[str, Any]:
        ls, rc, bs = self.lineshape, self.reconstruction, self.bootstrap
        return {
            "spin": self.params.to_dict(),
            "orientations": self.orient.to_dict(),
            "m_fm_hz": self.m_fm,
            "n_resonances": self.n_resonances,
            "lineshape": {
                "linewidth_guess_hz": ls.linewidth_guess,
                "detection_threshold": ls.detection_threshold,
                "xtol": ls.xtol,
                "max_iterations": ls.max_iterations,
            },
            "reconstruction": {
                "max_iterations": rc.max_iterations,
                "ftol": rc.ftol,
                "step_tol_t": rc.step_tol,
                "jacobian_step_t": rc.jacobian_step,
                "poor_fit_factor": rc.poor_fit_factor,
                "sign_gauge": rc.sign_gauge,
            },
            "bootstrap": {
                "n_replicas": bs.n_replicas,
                "seed": bs.seed,
                "max_failure_rate": bs.max_failure_rate,
                "resample": bs.resample,
            },
            "refit_dc_per_spectrum": self.refit_dc_per_spectrum,
            "phase_reference": self.phase_reference,
            "lock_ac_geometry": self.lock_ac_geometry,
            "linearity_ratio": self.linearity_ratio,
            "dc_guess_t": None if self.dc_guess is None else self.dc_guess.as_array().tolist(),
        }

    def digest(self) -> str:
        return payload_sha256(self.to_dict())

    @classmethod
    def from_dict(cls, payload: Dict[str, Any], *, base_dir: Optional[Path] = None) -> "PipelineConfig":
        _reject_unknown(payload, cls().to_dict(), "config")
        kwargs: Dict[str, Any] = {}
        try:
            if "spin" in payload:
                _reject_unknown(payload["spin"], SpinModelParams().to_dict(), "spin")
                kwargs["params"] = SpinModelParams.from_dict(payload["spin"])
            if "orientations" in payload:
                kwargs["orient"] = _load_orientations(payload["orientations"], base_dir)
            if "m_fm_hz" in payload:
                kwargs["m_fm"] = float(payload["m_fm_hz"])
            if "n_resonances" in payload:
                kwargs["n_resonances"] = int(payload["n_resonances"])
            if "lineshape" in payload:
                kwargs["lineshape"] = _section(
                    payload["lineshape"],
                    FitSettings,
                    {
                        "linewidth_guess_hz": ("linewidth_guess", float),
                        "detection_threshold": ("detection_threshold", float),
                        "xtol": ("xtol", float),
                        "max_iterations": ("max_iterations", int),
                    },
                )
            if "reconstruction" in payload:
                kwargs["reconstruction"] = _section(
                    payload["reconstruction"],
                    ReconstructionSettings,
                    {
                        "max_iterations": ("max_iterations", int),
                        "ftol": ("ftol", float),
                        "step_tol_t": ("step_tol", float),
                        "jacobian_step_t": ("jacobian_step", float),
                        "poor_fit_factor": ("poor_fit_factor", float),
                        "sign_gauge": ("sign_gauge", _flag),
                    },
                )
            if "bootstrap" in payload:
                kwargs["bootstrap"] = _section(
                    payload["bootstrap"],
                    BootstrapSettings,
                    {
                        "n_replicas": ("n_replicas", int),
                        "seed": ("seed", int),
                        "max_failure_rate": ("max_failure_rate", float),
                        "resample": ("resample", str),
                    },
                )
            for key in ("refit_dc_per_spectrum", "phase_reference", "lock_ac_geometry"):
                if key in payload:
                    kwargs[key] = _flag(payload[key])
            if "linearity_ratio" in payload:
                kwargs["linearity_ratio"] = float(payload["linearity_ratio"])
            if payload.get("dc_guess_t") is not None:
                kwargs["dc_guess"] = RealFieldVector.from_array(payload["dc_guess_t"])
        except InvalidInputError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed config: {exc}") from exc
        return cls(**kwargs)


def _reject_unknown(payload: Any, reference: Dict[str, Any], where: str) -> None:
    if not isinstance(payload, dict):
        raise InvalidInputError(f"{where} must be a JSON object")
    unknown = set(payload) - set(reference)
    if unknown:
        raise InvalidInputError(f"unknown {where} keys: {', '.join(sorted(unknown))}")


def _flag(value: Any) -> bool:
    if not isinstance(value, bool):
        raise InvalidInputError(f"expected true or false, got {value!r}")
    return value


def _section(payload: Any, cls, mapping):
    _reject_unknown(payload, mapping, cls.__name__)
    return cls(**{mapping[key][0]: mapping[key][1](value) for key, value in payload.items()})


def _load_orientations(value: Any, base_dir: Optional[Path]) -> OrientationSet:
    if isinstance(value, str):
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return OrientationSet.from_dict(read_json(path))
    return OrientationSet.from_dict(value)


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    return PipelineConfig.from_dict(read_json(path), base_dir=path.parent)


def worker_count(requested: Optional[int] = None) -> int:
    """Worker processes for replica runs; NVPHASOR_WORKERS overrides the default of 1."""
    if requested is not None:
        if requested < 1:
            raise InvalidInputError("worker count must be at least 1")
        return requested
    value = os.environ.get(WORKERS_ENV)
    if not value:
        return 1
    try:
        workers = int(value)
    except ValueError as exc:
        raise InvalidInputError(f"{WORKERS_ENV} must be an integer, got {value!r}") from exc
    if workers < 1:
        raise InvalidInputError(f"{WORKERS_ENV} must be at least 1")
    return workers
