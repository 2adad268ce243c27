from __future__ import annotations

from typing import Any, Dict, Optional


class PhasorError(Exception):
    """Base class for every error raised by the analysis pipeline."""

    code = "pipeline-error"
    exit_status = 1

    def __init__(
        self,
        message: str,
        *,
        stage: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.details: Dict[str, Any] = dict(details or {})

    def with_stage(self, stage: str) -> "PhasorError":
        if self.stage is None:
            self.stage = stage
        return self

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"error": self.code, "message": self.message}
        if self.stage is not None:
            payload["stage"] = self.stage
        if self.details:
            payload["details"] = self.details
        return payload


class InvalidInputError(PhasorError, ValueError):
    code = "invalid-input"
    exit_status = 2


class InputNotFoundError(InvalidInputError):
    code = "input-not-found"


class ParseError(InvalidInputError):
    code = "parse-error"

    def __init__(self, message: str, *, line: Optional[int] = None, **kwargs):
        details = dict(kwargs.pop("details", None) or {})
        if line is not None:
            details["line"] = line
        super().__init__(message, details=details, **kwargs)
        self.line = line


class DetectionError(PhasorError):
    code = "detection-failed"
    exit_status = 3

    def __init__(self, message: str, *, found_centers=(), **kwargs):
        details = dict(kwargs.pop("details", None) or {})
        details["found_centers"] = [float(c) for c in found_centers]
        super().__init__(message, details=details, **kwargs)
        self.found_centers = tuple(float(c) for c in found_centers)


class ConvergenceError(PhasorError):
    code = "convergence-failure"
    exit_status = 3

    def __init__(self, message: str, *, best_effort: Any = None, **kwargs):
        super().__init__(message, **kwargs)
        # not serialised; callers decide how to report a partial result
        self.best_effort = best_effort


class CalibrationError(PhasorError):
    code = "calibration-unreliable"
    exit_status = 3


class IllConditionedError(PhasorError):
    code = "ill-conditioned"
    exit_status = 3


class UndefinedEllipseError(PhasorError):
    code = "undefined-ellipse"
    exit_status = 3


class UnstablePipelineError(PhasorError):
    code = "unstable-pipeline"
    exit_status = 3


class AmbiguousAssignmentError(PhasorError):
    code = "ambiguous-assignment"
    exit_status = 4

    def __init__(self, message: str, *, collisions=(), **kwargs):
        details = dict(kwargs.pop("details", None) or {})
        details["collisions"] = [
            [list(map(_label_payload, pair[:2])), float(pair[2])] for pair in collisions
        ]
        super().__init__(message, details=details, **kwargs)
        self.collisions = tuple(collisions)


def _label_payload(label) -> str:
    branch, orientation = label
    return f"{branch}{orientation}"
