"""Patient-space geometry: pixel-to-patient projection and axial slice matching.

Conventions follow DICOM: ``row_dir`` is the direction of increasing column
index and ``col_dir`` the direction of increasing row index (the first and
second triplets of ImageOrientationPatient), ``origin`` is
ImagePositionPatient, the centre of pixel (0, 0).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BadGeometry, NotEnoughSlices

UNIT_TOL = 1e-6


class Point2D(NamedTuple):
    row: float
    col: float


class Point3D(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class SliceGeometry:
    row_dir: tuple[float, float, float]
    col_dir: tuple[float, float, float]
    origin: tuple[float, float, float]
    spacing_row: float
    spacing_col: float

    def __post_init__(self):
        for name in ("row_dir", "col_dir", "origin"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3 or not all(np.isfinite(value)):
                raise BadGeometry(f"{name} must be three finite numbers, got {value}")
            object.__setattr__(self, name, value)
        r = np.asarray(self.row_dir)
        c = np.asarray(self.col_dir)
        if abs(np.linalg.norm(r) - 1.0) > UNIT_TOL or abs(np.linalg.norm(c) - 1.0) > UNIT_TOL:
            raise BadGeometry("orientation cosines must be unit vectors")
        if abs(float(r @ c)) > UNIT_TOL:
            raise BadGeometry("row_dir and col_dir must be orthogonal")
        for name in ("spacing_row", "spacing_col"):
            value = float(getattr(self, name))
            if not (np.isfinite(value) and value > 0):
                raise BadGeometry(f"{name} must be positive, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_dicom(cls, orientation, position, pixel_spacing) -> "SliceGeometry":
        """Build from ImageOrientationPatient, ImagePositionPatient, PixelSpacing."""
        orientation = [float(v) for v in orientation]
        return cls(
            row_dir=tuple(orientation[:3]),
            col_dir=tuple(orientation[3:]),
            origin=tuple(position),
            spacing_row=float(pixel_spacing[0]),
            spacing_col=float(pixel_spacing[1]),
        )

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.row_dir, self.col_dir)

    def to_dict(self) -> dict:
        return {
            "row_dir": list(self.row_dir),
            "col_dir": list(self.col_dir),
            "origin": list(self.origin),
            "spacing_row": self.spacing_row,
            "spacing_col": self.spacing_col,
        }


def project_to_3d(geom: SliceGeometry, p) -> Point3D:
    """Map a (row, col) pixel position to patient coordinates in mm."""
    row, col = float(p[0]), float(p[1])
    out = (
        np.asarray(geom.origin)
        + row * geom.spacing_row * np.asarray(geom.col_dir)
        + col * geom.spacing_col * np.asarray(geom.row_dir)
    )
    return Point3D(float(out[0]), float(out[1]), float(out[2]))


def slice_plane_z(geom: SliceGeometry, rows: int, cols: int) -> float:
    """z coordinate of the slice centre, used as the slice's matching key."""
    return project_to_3d(geom, (rows / 2, cols / 2)).z


def _slice_z(s) -> float:
    return slice_plane_z(s.geometry, s.rows, s.cols)


def nearest_by_z(level_z: float, zs: Sequence[float], indices: Sequence[int], k: int = 3) -> list[int]:
    """Pick the k slices whose z is closest to ``level_z``.

    Ties in distance go to the lower slice index; the result is ordered by
    ascending z (then index).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(zs) < k:
        raise NotEnoughSlices(f"need {k} axial slices, have {len(zs)}")
    zs = np.asarray(zs, dtype=float)
    indices = np.asarray(indices)
    dist = np.abs(zs - level_z)
    order = np.lexsort((indices, dist))[:k]
    chosen = order[np.lexsort((indices[order], zs[order]))]
    return [int(i) for i in indices[chosen]]


def nearest_axial_slices(level_z: float, axial, k: int = 3) -> list[int]:
    """Indices of the k axial slices nearest ``level_z``.

    ``axial`` is a sequence of slice records (anything with ``index``,
    ``rows``, ``cols`` and ``geometry``).  Returned values are the records'
    ``index`` fields, so the output does not depend on list order.
    """
    axial = list(axial)
    if len(axial) < k:
        raise NotEnoughSlices(f"need {k} axial slices, have {len(axial)}")
    zs = [_slice_z(s) for s in axial]
    return nearest_by_z(level_z, zs, [s.index for s in axial], k)


def match_levels(study, level_points, sagittal_choice=None, k: int = 3) -> np.ndarray:
    """Assign ``k`` axial slices to each spinal level.

    ``level_points`` holds one (row, col) per level on the sagittal slice
    named by ``sagittal_choice`` (positions into ``study.sagittal_slices``;
    defaults to the middle slice for every level).  Returns an int array of
    shape (n_levels, k) holding axial slice indices.
    """
    sagittal = study.sagittal_slices
    if sagittal_choice is None:
        sagittal_choice = [len(sagittal) // 2] * len(level_points)
    if len(sagittal_choice) != len(level_points):
        raise ValueError("one sagittal slice per level point is required")
    axial = list(study.axial_slices)
    if len(axial) < k:
        raise NotEnoughSlices(f"need {k} axial slices, have {len(axial)}")
    zs = [_slice_z(s) for s in axial]
    idx = [s.index for s in axial]
    table = np.empty((len(level_points), k), dtype=int)
    for j, (p, si) in enumerate(zip(level_points, sagittal_choice)):
        level_z = project_to_3d(sagittal[si].geometry, p).z
        table[j] = nearest_by_z(level_z, zs, idx, k)
    return table
