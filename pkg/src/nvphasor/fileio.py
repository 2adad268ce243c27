"""Spectrum CSV codec, JSON output, atomic writes and provenance digests.

Spectrum files start with optional ``# key=value`` metadata lines followed by a
``freq_hz,x,y`` header and one row per sample.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import pandas as pd

from . import __version__
from .errors import InputNotFoundError, ParseError
from .lineshape import QuadratureSpectrum

SPECTRUM_COLUMNS = ["freq_hz", "x", "y"]
ELLIPSE_COLUMNS = ["phi", "px", "py", "pz"]
_PANDAS_LINE = re.compile(r"in line (\d+)")


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_json(path, payload: Any) -> Path:
    return atomic_write_text(path, dumps_json(payload))


def read_json(path) -> Any:
    path = Path(path)
    if not path.exists():
        raise InputNotFoundError(f"{path} does not exist", details={"path": str(path)})
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno, details={"path": str(path)}) from exc


def _read_text(path: Path) -> str:
    raw = path.read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise ParseError(
            f"{path}: not valid UTF-8 (byte {exc.start})", line=line, details={"path": str(path)}
        ) from exc


def payload_sha256(payload: Any) -> str:
    normalized = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(normalized).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(config_digest: Optional[str], inputs: Iterable = ()) -> Dict[str, Any]:
    return {
        "tool_version": __version__,
        "config_sha256": config_digest,
        "inputs": {str(p): file_sha256(p) for p in inputs},
    }


def read_spectrum(path) -> QuadratureSpectrum:
    path = Path(path)
    if not path.exists():
        raise InputNotFoundError(f"{path} does not exist", details={"path": str(path)})
    lines = _read_text(path).splitlines()

    metadata: Dict[str, str] = {}
    metadata_lines: Dict[str, int] = {}
    n_comment = 0
    for line in lines:
        if not line.startswith("#"):
            break
        n_comment += 1
        body = line[1:].strip()
        if "=" in body:
            key, value = body.split("=", 1)
            metadata[key.strip()] = value.strip()
            metadata_lines[key.strip()] = n_comment

    header_line = n_comment + 1
    if n_comment >= len(lines):
        raise ParseError(f"{path}: missing header", line=header_line)
    header = [h.strip() for h in lines[n_comment].split(",")]
    if header != SPECTRUM_COLUMNS:
        raise ParseError(
            f"{path}: expected header {','.join(SPECTRUM_COLUMNS)}, got {lines[n_comment]!r}",
            line=header_line,
        )

    try:
        frame = pd.read_csv(
            io.StringIO("\n".join(lines[n_comment:])), dtype=str, skip_blank_lines=False
        )
    except pd.errors.ParserError as exc:
        match = _PANDAS_LINE.search(str(exc))
        line = n_comment + int(match.group(1)) if match else header_line
        raise ParseError(f"{path}: {exc}", line=line) from exc
    frame.columns = [c.strip() for c in frame.columns]
    values = frame.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(
            f"{path}: non-numeric or missing value on line {header_line + row + 1}",
            line=header_line + row + 1,
        )
    data = values.to_numpy(dtype=float)
    if len(data) == 0:
        raise ParseError(f"{path}: no samples", line=header_line)
    steps = np.diff(data[:, 0])
    if np.any(steps <= 0):
        row = int(np.flatnonzero(steps <= 0)[0]) + 1
        raise ParseError(
            f"{path}: frequency column is not strictly increasing at line {header_line + row + 1}",
            line=header_line + row + 1,
        )

    try:
        demod = float(metadata.get("demod_frequency_hz", 0.0))
    except ValueError as exc:
        line = metadata_lines["demod_frequency_hz"]
        raise ParseError(
            f"{path}: demod_frequency_hz must be a number, got {metadata['demod_frequency_hz']!r}",
            line=line,
        ) from exc
    return QuadratureSpectrum(data[:, 0], data[:, 1], data[:, 2], demod_frequency=demod, metadata=metadata)


def spectrum_to_csv(spectrum: QuadratureSpectrum) -> str:
    metadata = dict(spectrum.metadata)
    metadata["demod_frequency_hz"] = repr(float(spectrum.demod_frequency))
    head = "".join(f"# {key}={value}\n" for key, value in sorted(metadata.items()))
    frame = pd.DataFrame(
        {"freq_hz": spectrum.freqs, "x": spectrum.x_channel, "y": spectrum.y_channel},
        columns=SPECTRUM_COLUMNS,
    )
    return head + frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")


def write_spectrum(path, spectrum: QuadratureSpectrum) -> Path:
    return atomic_write_text(path, spectrum_to_csv(spectrum))


def ellipse_to_csv(ellipse) -> str:
    """Traced points (phi, px, py, pz) behind a one-line axes/eccentricity header."""
    major = ",".join(f"{v:.17g}" for v in ellipse.semi_major.as_array())
    minor = ",".join(f"{v:.17g}" for v in ellipse.semi_minor.as_array())
    head = (
        f"# semi_major_t=[{major}] semi_minor_t=[{minor}] "
        f"eccentricity={ellipse.eccentricity:.17g} frame={ellipse.semi_major.frame.value}\n"
    )
    frame = pd.DataFrame(
        np.column_stack([ellipse.phases, ellipse.points]), columns=ELLIPSE_COLUMNS
    )
    return head + frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")


def write_ellipse(path, ellipse) -> Path:
    return atomic_write_text(path, ellipse_to_csv(ellipse))


def read_ellipse_points(path) -> np.ndarray:
    """(n, 4) array of phi, px, py, pz from an ellipse CSV."""
    frame = pd.read_csv(path, comment="#")
    if list(frame.columns) != ELLIPSE_COLUMNS:
        raise ParseError(f"{path}: expected columns {','.join(ELLIPSE_COLUMNS)}", line=2)
    return frame.to_numpy(dtype=float)
