"""End-to-end inference for one study, plus the crop extraction shared with training.

keypoints -> axial matching -> sagittal slice selection -> crops -> frozen
encoders -> multi-view classifier.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_into, save_checkpoint
from .encoder import CropEncoder, encode
from .errors import EmptySeries, MissingPriorStage, NotEnoughSlices
from .geometry import Point2D, match_levels
from .localization import CanalCenterNet, UNet, predict_centers, predict_keypoints
from .multiview import MScan, SLICES_PER_LEVEL
from .preprocess import ClaheParams, map_points, prepare_crop, prepare_full
from .sliceselect import SliceScorer, score_slices, select_slices
from .studyio import LEVELS, Study, load_pixels


@dataclass
class PipelineConfig:
    full_size: tuple = (64, 64)          # whole-slice model inputs
    sagittal_crop: tuple = (32, 32)
    axial_crop: tuple = (32, 32)
    encoder_input: tuple = (32, 32)
    clahe_clip: float = 2.0
    clahe_tiles: tuple = (4, 4)           # ~8 px tiles on 32 px crops
    clahe_sagittal: bool = True
    clahe_axial: bool = True
    k: int = SLICES_PER_LEVEL

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        d = dict(d or {})
        for key in ("full_size", "sagittal_crop", "axial_crop", "encoder_input", "clahe_tiles"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def clahe(self, series: str) -> ClaheParams | None:
        on = self.clahe_sagittal if series == "sagittal" else self.clahe_axial
        return ClaheParams(self.clahe_clip, tuple(self.clahe_tiles)) if on else None


CHECKPOINTS = {
    "unet": ("unet.ckpt", UNet),
    "scorer": ("scorer.ckpt", SliceScorer),
    "canal": ("canal.ckpt", CanalCenterNet),
    "encoder_sagittal": ("encoder_sagittal.ckpt", CropEncoder),
    "encoder_axial": ("encoder_axial.ckpt", CropEncoder),
    "mscan": ("mscan.ckpt", MScan),
}
STAGE_MODELS = {1: ("unet", "scorer", "canal"), 2: ("encoder_sagittal", "encoder_axial"), 3: ("mscan",)}


@dataclass
class ModelBundle:
    unet: UNet | None = None
    scorer: SliceScorer | None = None
    canal: CanalCenterNet | None = None
    encoder_sagittal: CropEncoder | None = None
    encoder_axial: CropEncoder | None = None
    mscan: MScan | None = None

    def save(self, directory, names=None) -> None:
        for name in names or CHECKPOINTS:
            model = getattr(self, name)
            if model is not None:
                save_checkpoint(Path(directory) / CHECKPOINTS[name][0], model, name, model.config)

    @classmethod
    def load(cls, directory, names=None) -> "ModelBundle":
        from .checkpoint import read_checkpoint

        bundle = cls()
        for name in names or CHECKPOINTS:
            fname, ctor = CHECKPOINTS[name]
            path = Path(directory) / fname
            if not path.is_file():
                raise MissingPriorStage(f"checkpoint {path} not found")
            header, _ = read_checkpoint(path)
            cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()}
            model = ctor(**cfg)
            load_into(model, path, kind=name)
            model.eval()
            if isinstance(model, CropEncoder):
                model.freeze()
            setattr(bundle, name, model)
        return bundle

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise MissingPriorStage(f"models not available: {missing}")


@dataclass
class StudyFeatures:
    study_id: str
    sagittal_crops: np.ndarray               # (5, 1, h, w)
    axial_crops: np.ndarray                  # (5, k, 1, h, w)
    selected: list = field(default_factory=list)       # sagittal slice per level
    keypoints: list = field(default_factory=list)      # Point2D per level
    table: np.ndarray | None = None                    # (5, k) axial slice indices
    centers: np.ndarray | None = None                  # (5, k, 2) canal centres
    P: np.ndarray | None = None                        # (N, 5) slice scores


def _axial_by_index(study: Study) -> dict:
    return {s.index: s for s in study.axial_slices}


def axial_crops_for(study: Study, table, canal: CanalCenterNet, cfg: PipelineConfig):
    """Crop every matched axial slice around its predicted canal centre."""
    by_index = _axial_by_index(study)
    table = np.asarray(table)
    flat = [by_index[int(i)] for i in table.ravel()]
    images = [load_pixels(r) for r in flat]
    inputs = np.stack([prepare_full(im, canal.size) for im in images])[:, None]
    centers = predict_centers(canal, inputs)
    # model coordinates -> source pixels
    centers = np.stack([map_points(c, canal.size, im.shape) for c, im in zip(centers, images)])
    crops = np.stack([
        prepare_crop(im, c, cfg.axial_crop, cfg.encoder_input, cfg.clahe("axial")) for im, c in zip(images, centers)
    ])
    k = table.shape[1]
    return crops.reshape(len(table), k, 1, *cfg.encoder_input), centers.reshape(len(table), k, 2)


def sagittal_crops_for(study: Study, selected, keypoints, cfg: PipelineConfig) -> np.ndarray:
    cache = {}
    crops = []
    for si, p in zip(selected, keypoints):
        if si not in cache:
            cache[si] = load_pixels(study.sagittal_slices[si])
        crops.append(prepare_crop(cache[si], p, cfg.sagittal_crop, cfg.encoder_input, cfg.clahe("sagittal")))
    return np.stack(crops)[:, None]


def locate_levels(study: Study, models: ModelBundle, cfg: PipelineConfig):
    """Slice scores, per-level slice choice and per-level keypoints (source pixels)."""
    P = score_slices(models.scorer, study)
    selected = select_slices(P)
    distinct = sorted(set(selected))
    images = {si: load_pixels(study.sagittal_slices[si]) for si in distinct}
    size = cfg.full_size
    inputs = np.stack([prepare_full(images[si], size) for si in distinct])[:, None]
    decoded = dict(zip(distinct, predict_keypoints(models.unet, inputs)))
    keypoints = []
    for j, si in enumerate(selected):
        r, c = map_points(decoded[si][j], size, images[si].shape)
        keypoints.append(Point2D(float(r), float(c)))
    return P, selected, keypoints


def extract_features(study: Study, models: ModelBundle, cfg: PipelineConfig) -> StudyFeatures:
    """Run stages one and two of inference and return the crops fed to the encoders."""
    if not study.sagittal_slices:
        raise EmptySeries(f"{study.study_id}: no sagittal slices")
    if len(study.axial_slices) < cfg.k:
        raise EmptySeries(f"{study.study_id}: needs at least {cfg.k} axial slices, has {len(study.axial_slices)}")
    models.require("unet", "scorer", "canal")
    P, selected, keypoints = locate_levels(study, models, cfg)
    table = match_levels(study, keypoints, selected, k=cfg.k)
    ax, centers = axial_crops_for(study, table, models.canal, cfg)
    sag = sagittal_crops_for(study, selected, keypoints, cfg)
    return StudyFeatures(study.study_id, sag, ax, selected, keypoints, table, centers, P)


def embed(features: list[StudyFeatures], models: ModelBundle):
    """Stack encoder outputs into E_s (B, 5, 512) and E_a (B, 5, k, 512)."""
    models.require("encoder_sagittal", "encoder_axial")
    B = len(features)
    sag = np.concatenate([f.sagittal_crops for f in features])
    ax = np.concatenate([f.axial_crops.reshape(-1, *f.axial_crops.shape[2:]) for f in features])
    e_s = encode(models.encoder_sagittal, sag)
    e_a = encode(models.encoder_axial, ax)
    n_levels, k = features[0].axial_crops.shape[:2]
    return e_s.reshape(B, n_levels, -1), e_a.reshape(B, n_levels, k, -1)


def predict_logits(features: list[StudyFeatures], models: ModelBundle) -> np.ndarray:
    models.require("mscan")
    e_s, e_a = embed(features, models)
    models.mscan.eval()
    with torch.no_grad():
        return models.mscan(e_s, e_a).numpy().astype(np.float64)


def predict_study(study: Study, models: ModelBundle, cfg: PipelineConfig) -> np.ndarray:
    """(5, 3) grade probabilities for one study."""
    logits = predict_logits([extract_features(study, models, cfg)], models)[0]
    return torch.softmax(torch.from_numpy(logits), dim=-1).numpy()


__all__ = [
    "PipelineConfig",
    "ModelBundle",
    "StudyFeatures",
    "extract_features",
    "embed",
    "predict_logits",
    "predict_study",
    "LEVELS",
    "NotEnoughSlices",
]
