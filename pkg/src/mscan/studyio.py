"""On-disk study format: a JSON manifest plus raw little-endian uint16 slices.

Layout::

    <root>/<study_id>/manifest.json
    <root>/<study_id>/<pixel files referenced relatively>

Every check runs in :func:`load_study`; a manifest either yields a complete
:class:`Study` or raises a :class:`~mscan.errors.StudyError` subclass.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadGeometry,
    ManifestError,
    MissingFile,
    MissingLevel,
    ShapeMismatch,
    StudyError,
)
from .geometry import SliceGeometry

LEVELS = ("L1/L2", "L2/L3", "L3/L4", "L4/L5", "L5/S1")
GRADES = ("NormalMild", "Moderate", "Severe")
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SliceRecord:
    index: int
    rows: int
    cols: int
    pixel_path: str
    geometry: SliceGeometry
    bit_depth: int = 16
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    @property
    def path(self) -> Path:
        return Path(self.root or ".") / self.pixel_path

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "rows": self.rows,
            "cols": self.cols,
            "pixel_path": self.pixel_path,
            "bit_depth": self.bit_depth,
            "geometry": self.geometry.to_dict(),
        }


@dataclass(frozen=True)
class LevelGrades:
    grades: dict

    def __post_init__(self):
        if set(self.grades) != set(LEVELS):
            raise MissingLevel(f"labels must cover exactly {LEVELS}, got {sorted(self.grades)}")
        for level, g in self.grades.items():
            if isinstance(g, bool) or not isinstance(g, (int, np.integer)) or g not in (0, 1, 2):
                raise ManifestError(f"grade for {level} must be 0, 1 or 2, got {g!r}")
        object.__setattr__(self, "grades", {lv: int(self.grades[lv]) for lv in LEVELS})

    def as_array(self) -> np.ndarray:
        return np.array([self.grades[lv] for lv in LEVELS], dtype=np.int64)

    @classmethod
    def from_array(cls, values) -> "LevelGrades":
        return cls(dict(zip(LEVELS, (int(v) for v in values))))


@dataclass(frozen=True)
class Study:
    study_id: str
    sagittal_slices: tuple
    axial_slices: tuple
    labels: Optional[LevelGrades] = None
    series_kind: str = "T2/STIR"
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    @property
    def n_sagittal(self) -> int:
        return len(self.sagittal_slices)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "study_id": self.study_id,
            "series_kind": self.series_kind,
            "sagittal_slices": [s.to_dict() for s in self.sagittal_slices],
            "axial_slices": [s.to_dict() for s in self.axial_slices],
            "labels": None if self.labels is None else {"grades": dict(self.labels.grades)},
        }


def load_pixels(record: SliceRecord) -> np.ndarray:
    """Decode a slice file into a (rows, cols) uint16 array."""
    data = np.fromfile(record.path, dtype="<u2")
    if data.size != record.rows * record.cols:
        raise ShapeMismatch(
            f"{record.path}: expected {record.rows}x{record.cols} pixels, found {data.size}"
        )
    return data.reshape(record.rows, record.cols).astype(np.uint16)


def write_pixels(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("expected a 2-D image")
    if image.min(initial=0) < 0 or image.max(initial=0) > 65535:
        raise ValueError("pixel values must fit in uint16")
    np.ascontiguousarray(image, dtype="<u2").tofile(path)


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ManifestError(f"{where}: missing key {key!r}")
    return d[key]


def _parse_geometry(d, where: str) -> SliceGeometry:
    try:
        return SliceGeometry(
            row_dir=tuple(_require(d, "row_dir", where)),
            col_dir=tuple(_require(d, "col_dir", where)),
            origin=tuple(_require(d, "origin", where)),
            spacing_row=_require(d, "spacing_row", where),
            spacing_col=_require(d, "spacing_col", where),
        )
    except BadGeometry as exc:
        raise BadGeometry(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: malformed geometry ({exc})") from None


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _parse_slice(d, where: str, root: Path) -> SliceRecord:
    index = _require(d, "index", where)
    rows = _require(d, "rows", where)
    cols = _require(d, "cols", where)
    pixel_path = _require(d, "pixel_path", where)
    bit_depth = d.get("bit_depth", 16)
    if not (_is_int(index) and index >= 0):
        raise ManifestError(f"{where}: index must be a non-negative integer")
    if not (_is_int(rows) and rows > 0 and _is_int(cols) and cols > 0):
        raise ManifestError(f"{where}: rows/cols must be positive integers")
    if bit_depth != 16:
        raise ManifestError(f"{where}: only 16-bit pixels are supported")
    if not isinstance(pixel_path, str) or not pixel_path or os.path.isabs(pixel_path):
        raise ManifestError(f"{where}: pixel_path must be a relative path")
    geometry = _parse_geometry(_require(d, "geometry", where), where)
    record = SliceRecord(index, rows, cols, pixel_path, geometry, 16, root)
    if not record.path.is_file():
        raise MissingFile(f"{where}: pixel file {record.path} not found")
    size = record.path.stat().st_size
    if size != rows * cols * 2:
        raise ShapeMismatch(f"{where}: {rows}x{cols}x2 = {rows * cols * 2} bytes declared, {record.path} has {size}")
    return record


def _parse_series(m: dict, key: str, root: Path) -> tuple:
    items = _require(m, key, "manifest")
    if not isinstance(items, list):
        raise ManifestError(f"{key} must be a list")
    records = tuple(_parse_slice(d, f"{key}[{i}]", root) for i, d in enumerate(items))
    idx = [r.index for r in records]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ManifestError(f"{key}: slice indices must be strictly increasing")
    return records


def parse_manifest(m: dict, root) -> Study:
    root = Path(root)
    if not isinstance(m, dict):
        raise ManifestError("manifest must be a mapping")
    study_id = _require(m, "study_id", "manifest")
    if not isinstance(study_id, str) or not study_id:
        raise ManifestError("study_id must be a non-empty string")
    sagittal = _parse_series(m, "sagittal_slices", root)
    if not sagittal:
        raise ManifestError("sagittal_slices must be non-empty")
    axial = _parse_series(m, "axial_slices", root)
    labels = m.get("labels")
    if labels is not None:
        grades = _require(labels, "grades", "labels")
        if not isinstance(grades, dict):
            raise ManifestError("labels.grades must be a mapping")
        labels = LevelGrades(grades)
    series_kind = m.get("series_kind", "T2/STIR")
    if not isinstance(series_kind, str):
        raise ManifestError("series_kind must be a string")
    return Study(study_id, sagittal, axial, labels, series_kind, root)


def manifest_path(path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_study(path) -> Study:
    """Load and fully validate a study from its manifest (or study directory)."""
    path = manifest_path(path)
    if not path.is_file():
        raise MissingFile(f"manifest {path} not found")
    try:
        m = json.loads(path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return parse_manifest(m, path.parent)


def save_manifest(study: Study, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / MANIFEST_NAME
    out.write_text(json.dumps(study.to_dict(), indent=1) + "\n")
    return out


def discover_studies(root) -> list[Path]:
    """Study directories under ``root`` (those holding a manifest), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"data root {root} not found")
    return sorted(p for p in root.iterdir() if (p / MANIFEST_NAME).is_file())


def load_studies(root) -> list[Study]:
    return [load_study(p) for p in discover_studies(root)]


__all__ = [
    "LEVELS",
    "GRADES",
    "SliceRecord",
    "LevelGrades",
    "Study",
    "StudyError",
    "load_study",
    "load_pixels",
    "write_pixels",
    "save_manifest",
    "parse_manifest",
    "discover_studies",
    "load_studies",
]
