"""Sagittal slice selection: per-slice level scores and the per-level argmax."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadShape, EmptyDataset, EmptySeries
from .fitting import FitConfig, batched, fit, seed_everything
from .preprocess import prepare_full
from .studyio import load_pixels

N_LEVELS = 5


class SliceScorer(nn.Module):
    """Whole-slice CNN emitting one sigmoid score per level."""

    def __init__(self, size=(64, 64), widths=(8, 16, 32), hidden=64, n_levels=N_LEVELS):
        super().__init__()
        self.config = {"size": list(size), "widths": list(widths), "hidden": hidden, "n_levels": n_levels}
        self.size = tuple(size)
        layers, c = [], 1
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*layers)
        cells = (size[0] >> len(widths)) * (size[1] >> len(widths))
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c * cells, hidden), nn.ReLU(), nn.Linear(hidden, n_levels))

    def logits(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.size:
            raise BadShape(f"expected B x 1 x {self.size[0]} x {self.size[1]}, got {tuple(x.shape)}")
        return self.head(self.features(x))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def slice_inputs(study, size=(64, 64)) -> np.ndarray:
    return np.stack([prepare_full(load_pixels(r), size) for r in study.sagittal_slices])[:, None]


def score_slices(scorer: SliceScorer, study) -> np.ndarray:
    """N x 5 matrix of per-slice level probabilities."""
    if not study.sagittal_slices:
        raise EmptySeries(f"{study.study_id}: no sagittal slices")
    scorer.eval()
    x = torch.from_numpy(slice_inputs(study, scorer.size))
    return batched(scorer, x).numpy().astype(np.float64)


def select_slices(P) -> list[int]:
    """For each level column, the slice with the highest score (lowest index on ties)."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] < 1:
        raise BadShape(f"expected an N x levels matrix with N >= 1, got {P.shape}")
    return [int(i) for i in np.argmax(P, axis=0)]


def train_scorer(images, targets, cfg: FitConfig, model: SliceScorer | None = None):
    """Binary cross entropy against soft per-level visibility targets in [0, 1]."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    if len(x) == 0:
        raise EmptyDataset("no slices to train the scorer on")
    seed_everything(cfg.seed)
    if model is None:
        model = SliceScorer(size=tuple(x.shape[2:]), n_levels=y.shape[1])

    def step(idx):
        return F.binary_cross_entropy_with_logits(model.logits(x[idx]), y[idx])

    log = fit(model, len(x), step, cfg)
    return model, log
