"""Synthetic lumbar studies with analytically known ground truth.

Each study is a schematic spine.  Sagittal slices (rows = inferior, cols =
posterior) show a CSF canal band, vertebral bodies and five disc levels whose
brightness peaks on one "best" slice per level.  Axial slices show an
elliptical canal whose anteroposterior axis equals the level's canal width.
Axial slices come in a cluster of three around each disc level plus filler
slices above and below the lumbar span, so the nearest-three rule recovers
the clusters exactly from the true keypoints.

Grades follow the canal width: >= 8 mm NormalMild, [5, 8) Moderate, < 5
Severe (boundary widths go to the milder class).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import UnknownStudy
from .geometry import SliceGeometry
from .studyio import LEVELS, LevelGrades, SliceRecord, Study, save_manifest, write_pixels

TRUTH_NAME = "truth.json"

# intensities (arbitrary 12-bit units)
BACKGROUND = 300.0
BONE = 1200.0
POSTERIOR = 900.0
CSF = 2600.0
DISC_BASE = 600.0
DISC_GAIN = 2400.0


@dataclass
class SynthParams:
    n_studies: int = 50
    sagittal_size: int = 64
    axial_size: int = 64
    n_sagittal: tuple = (10, 20)
    n_axial: tuple = (30, 60)
    thresholds: tuple = (8.0, 5.0)
    # class-conditional width ranges (mm); the gaps around the thresholds keep
    # the label a clean function of the rendered geometry
    width_ranges: tuple = ((8.75, 14.0), (5.75, 7.25), (2.0, 4.25))
    class_prior: tuple = (0.65, 0.22, 0.13)
    noise: float = 0.03
    seed: int = 0
    sagittal_spacing: float = 1.5
    axial_spacing: float = 0.75
    slice_gap: float = 3.0          # between sagittal slices, mm
    axial_gap: float = 4.0          # between axial slices, mm
    lateral_sigma: float = 3.0      # disc visibility fall-off across sagittal slices, mm
    prefix: str = "study"

    def __post_init__(self):
        hi, lo = self.thresholds
        if not hi > lo > 0:
            raise ValueError("thresholds must be strictly decreasing and positive")
        if any(a <= 0 or b < a for a, b in self.width_ranges):
            raise ValueError("width ranges must be positive intervals")
        if self.n_axial[0] < 15:
            raise ValueError("need at least 15 axial slices (three per level)")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def grade_from_width(width_mm: float, thresholds=(8.0, 5.0)) -> int:
    hi, lo = thresholds
    if width_mm >= hi:
        return 0
    if width_mm >= lo:
        return 1
    return 2


def sample_widths(rng: np.random.Generator, params: SynthParams, n: int = 5) -> np.ndarray:
    classes = rng.choice(3, size=n, p=np.asarray(params.class_prior) / sum(params.class_prior))
    ranges = np.asarray(params.width_ranges)
    return rng.uniform(ranges[classes, 0], ranges[classes, 1])


def _canal_profile(rows, centers, level_rows, level_widths_px, normal_px):
    """Canal half-width per row: narrowed around each level."""
    width = np.full(rows.shape, normal_px, dtype=float)
    for r_j, w_j in zip(level_rows, level_widths_px):
        dip = (normal_px - w_j) * np.exp(-((rows - r_j) ** 2) / (2 * 1.2**2))
        width = np.minimum(width, normal_px - dip)
    return width / 2


def render_sagittal(size, level_rows, canal_line, level_widths_px, normal_px, visibility):
    """Noiseless sagittal slice.  ``canal_line`` maps row -> canal centre column."""
    rows = np.arange(size, dtype=float)[:, None]
    cols = np.arange(size, dtype=float)[None, :]
    centre = canal_line(rows)
    half = _canal_profile(rows, centre, level_rows, level_widths_px, normal_px)
    img = np.full((size, size), BACKGROUND)

    # vertebral bodies anterior to the canal, between discs
    anterior_wall = centre - normal_px / 2 - 2
    bounds = [-10.0] + list(level_rows) + [size + 10.0]
    for a, b in zip(bounds[:-1], bounds[1:]):
        inside = (rows > a + 2.5) & (rows < b - 2.5) & (cols < anterior_wall) & (cols > anterior_wall - 18)
        img = np.where(inside, BONE, img)
    posterior = (cols > centre + normal_px / 2 + 2) & (cols < centre + normal_px / 2 + 12)
    img = np.where(posterior, POSTERIOR, img)

    coverage = np.clip(half - np.abs(cols - centre) + 0.5, 0.0, 1.0)
    img = img * (1 - coverage) + CSF * coverage

    for j, r_j in enumerate(level_rows):
        c_j = float(canal_line(r_j))
        a = 10.0
        d = np.sqrt(((rows - r_j) / 2.5) ** 2 + ((cols - (c_j - level_widths_px[j] / 2 - a)) / a) ** 2)
        disc = np.clip((1 - d) * 2.5 + 0.5, 0.0, 1.0)
        img = img * (1 - disc) + (DISC_BASE + DISC_GAIN * visibility[j]) * disc
    return img


def render_axial(size, center, width_px, major_px=12.0):
    rows = np.arange(size, dtype=float)[:, None]
    cols = np.arange(size, dtype=float)[None, :]
    cy, cx = center
    a = width_px / 2
    img = np.full((size, size), BACKGROUND)
    body = np.sqrt((rows - (cy - a - 11)) ** 2 + (cols - cx) ** 2)
    img = np.where(body < 10, BONE, img)
    arch = (rows > cy + a + 2) & (rows < cy + a + 8) & (np.abs(cols - cx) < 10)
    img = np.where(arch, POSTERIOR, img)
    rho = np.sqrt(((rows - cy) / a) ** 2 + ((cols - cx) / major_px) ** 2)
    coverage = np.clip((1 - rho) * min(a, major_px) + 0.5, 0.0, 1.0)
    return img * (1 - coverage) + CSF * coverage


def _to_u16(img, rng, noise):
    if noise > 0:
        img = img + rng.normal(0.0, noise * CSF, img.shape)
    return np.clip(np.rint(img), 0, 65535).astype(np.uint16)


def generate_study(params: SynthParams, number: int, out_root) -> tuple[Study, dict]:
    """Render one study into ``out_root/<study_id>`` and return it with its truth record."""
    rng = np.random.default_rng([params.seed, number])
    study_id = f"{params.prefix}_{number:04d}"
    out = Path(out_root) / study_id
    out.mkdir(parents=True, exist_ok=True)

    S, A = params.sagittal_size, params.axial_size
    sp, ap = params.sagittal_spacing, params.axial_spacing
    n_sag = int(rng.integers(params.n_sagittal[0], params.n_sagittal[1] + 1))
    n_ax = int(rng.integers(params.n_axial[0], params.n_axial[1] + 1))

    # sagittal layout, pixel units
    scale = S / 64.0
    first = rng.uniform(8, 12) * scale
    step = rng.uniform(10, 11) * scale
    level_rows = first + step * np.arange(5)
    c0 = rng.uniform(28, 36) * scale
    slope = rng.uniform(-0.1, 0.1)

    def canal_line(r):
        return c0 + slope * (np.asarray(r, dtype=float) - S / 2)

    level_cols = canal_line(level_rows)
    normal_mm = rng.uniform(12.0, 15.0)
    widths = sample_widths(rng, params)
    grades = [grade_from_width(w, params.thresholds) for w in widths]

    # patient frame: x left-right, y anterior->posterior, z superior
    x_first = rng.uniform(-30, -10)
    xs = x_first + params.slice_gap * np.arange(n_sag)
    mid = n_sag // 2
    best = mid + rng.integers(-1, 2, size=5)
    level_x = xs[best] + rng.uniform(-0.5, 0.5, size=5)
    visibility = np.exp(-((xs[:, None] - level_x[None, :]) ** 2) / (2 * params.lateral_sigma**2))
    y0 = rng.uniform(-40, -20)
    z_top = rng.uniform(-50, 50)

    sag_geoms = [
        SliceGeometry((0.0, 1.0, 0.0), (0.0, 0.0, -1.0), (float(x), y0, z_top), sp, sp) for x in xs
    ]
    level_z = [z_top - r * sp for r in level_rows]
    level_y = [y0 + c * sp for c in level_cols]

    sagittal = []
    for i, geom in enumerate(sag_geoms):
        img = render_sagittal(S, level_rows, canal_line, widths / sp, normal_mm / sp, visibility[i])
        name = f"sag_{i:03d}.u16"
        write_pixels(out / name, _to_u16(img, rng, params.noise))
        sagittal.append(SliceRecord(i, S, S, name, geom, 16, out))

    # axial z positions: a cluster of three per level and fillers outside the span
    g = params.axial_gap
    cluster = [(z + d, j) for j, z in enumerate(level_z) for d in (g, 0.0, -g)]
    n_fill = n_ax - len(cluster)
    n_top = int(rng.integers(0, n_fill + 1))
    fill = [(level_z[0] + 3 * g + g * t, -1) for t in range(n_top)]
    fill += [(level_z[-1] - 3 * g - g * t, -1) for t in range(n_fill - n_top)]
    planes = sorted(cluster + fill, key=lambda t: -t[0])

    x0_ax = float(np.mean(level_x)) - (A / 2) * ap + rng.uniform(-5, 5) * scale
    y0_ax = float(np.mean(level_y)) - (A / 2) * ap + rng.uniform(-5, 5) * scale
    axial, centers = [], []
    assignment = [[] for _ in range(5)]
    for k, (z, j) in enumerate(planes):
        if j >= 0:
            x, y, w = level_x[j], level_y[j], widths[j]
            assignment[j].append(k)
        else:
            # fillers sit outside the sagittal field at times; clamp the canal row
            r = np.clip((z_top - z) / sp, 0, S - 1)
            x, y, w = float(np.mean(level_x)), y0 + float(canal_line(r)) * sp, normal_mm
        center = ((y - y0_ax) / ap + rng.uniform(-1.5, 1.5), (x - x0_ax) / ap + rng.uniform(-1.5, 1.5))
        img = render_axial(A, center, w / ap, major_px=9.0 / ap)
        name = f"ax_{k:03d}.u16"
        write_pixels(out / name, _to_u16(img, rng, params.noise))
        geom = SliceGeometry((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (x0_ax, y0_ax, float(z)), ap, ap)
        axial.append(SliceRecord(k, A, A, name, geom, 16, out))
        centers.append([float(center[0]), float(center[1])])

    # ascending z within each level == descending acquisition index
    assignment = [sorted(a, reverse=True) for a in assignment]
    labels = LevelGrades(dict(zip(LEVELS, grades)))
    study = Study(study_id, tuple(sagittal), tuple(axial), labels, "T2/STIR", out)
    save_manifest(study, out)

    truth = {
        "study_id": study_id,
        "keypoints": [[float(r), float(c)] for r, c in zip(level_rows, level_cols)],
        "best_slices": [int(b) for b in best],
        "slice_visibility": visibility.round(12).tolist(),
        "assignments": assignment,
        "canal_centers": centers,
        "widths_mm": [float(w) for w in widths],
        "grades": grades,
        "level_boxes": [
            [float(r - 2.5), float(r + 2.5), float(c - normal_mm / sp / 2 - 20), float(c + normal_mm / sp / 2)]
            for r, c in zip(level_rows, level_cols)
        ],
        "params": _params_echo(params),
    }
    (out / TRUTH_NAME).write_text(json.dumps(truth, indent=1) + "\n")
    return study, truth


def _params_echo(params: SynthParams) -> dict:
    d = asdict(params)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def generate(params: SynthParams, out_root) -> list[Path]:
    """Write ``params.n_studies`` studies under ``out_root``; returns their directories."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for n in range(params.n_studies):
        study, _ = generate_study(params, n, out_root)
        dirs.append(out_root / study.study_id)
    return dirs


def truth(root, study_id: str) -> dict:
    """Ground-truth record written next to a generated study."""
    path = Path(root) / study_id / TRUTH_NAME
    if not path.is_file():
        raise UnknownStudy(f"no truth record for {study_id!r} under {root}")
    return json.loads(path.read_text())


def truth_for(study: Study) -> dict:
    if study.root is None:
        raise UnknownStudy(study.study_id)
    return truth(Path(study.root).parent, study.study_id)
