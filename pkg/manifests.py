"""Atomic file writes and the key-value manifest format.

Manifests are TOML documents made only of ``[section]`` headers and
``key = value`` lines (strings, integers, floats, booleans and flat lists of
those). They are written by hand so the byte layout is stable, and read back
with :mod:`tomllib`.
"""
from __future__ import annotations

import json
import math
import os
import platform
import subprocess
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MANIFEST_SUFFIX = ".manifest.toml"
PROVENANCE_SUFFIX = ".meta.toml"


def atomic_write_bytes(path: str | os.PathLike[str], payload: bytes) -> Path:
    """Write ``payload`` next to ``path`` under a temporary name, then rename it into place."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = target.with_name(f"{target.name}.{os.getpid()}.tmp")
    try:
        with open(tmp_path, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, target)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()
    return target


def atomic_write_text(path: str | os.PathLike[str], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def code_version(root: str | os.PathLike[str] | None = None) -> str:
    """``git describe`` of the checkout holding this file, or ``"unknown"``."""

    cwd = Path(root) if root is not None else Path(__file__).resolve().parent
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=cwd,
            capture_output=True,
            text=True,
            check=False,
        )
    except OSError:
        return "unknown"
    if result.returncode != 0:
        return "unknown"
    return result.stdout.strip() or "unknown"


def _format_scalar(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        number = float(value)
        if math.isnan(number):
            return "nan"
        if math.isinf(number):
            return "inf" if number > 0 else "-inf"
        return repr(number)
    if isinstance(value, (str, Path)):
        # JSON string escapes are valid TOML basic-string escapes
        return json.dumps(str(value), ensure_ascii=False)
    raise TypeError(f"Unsupported manifest value: {value!r}")


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_scalar(item) for item in value) + "]"
    return _format_scalar(value)


def format_manifest(sections: Mapping[str, Mapping[str, Any]]) -> str:
    lines: list[str] = []
    for section, values in sections.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key, value in values.items():
            if value is None:
                continue
            lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_manifest(path: str | os.PathLike[str], sections: Mapping[str, Mapping[str, Any]]) -> Path:
    return atomic_write_text(path, format_manifest(sections))


def read_manifest(path: str | os.PathLike[str]) -> dict[str, Any]:
    with open(path, "rb") as handle:
        return tomllib.load(handle)


def runtime_section() -> dict[str, str]:
    return {
        "written_at": utc_timestamp(),
        "code_version": code_version(),
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
    }


def provenance_path(path: str | os.PathLike[str]) -> Path:
    target = Path(path)
    return target.with_name(target.name + PROVENANCE_SUFFIX)


def write_provenance(path: str | os.PathLike[str], dataset: Mapping[str, Any]) -> Path:
    """Write the ``<file>.meta.toml`` sidecar describing where a data file came from."""

    return write_manifest(provenance_path(path), {"dataset": dict(dataset), "runtime": runtime_section()})


__all__ = [
    "MANIFEST_SUFFIX",
    "PROVENANCE_SUFFIX",
    "atomic_write_bytes",
    "atomic_write_text",
    "code_version",
    "format_manifest",
    "provenance_path",
    "read_manifest",
    "runtime_section",
    "utc_timestamp",
    "write_manifest",
    "write_provenance",
]
