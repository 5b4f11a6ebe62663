"""Crop encoder: a small CNN producing 512-d embeddings, pretrained on crop grades."""
from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import parameter_hash
from .errors import BadShape, EmptyDataset
from .fitting import FitConfig, batched, fit, seed_everything
from .multiview import DEFAULT_WEIGHTS, N_GRADES, wce_loss

EMBED_DIM = 512


class WeightedLossUndefined(UserWarning):
    """Some grade is absent from the pretraining set."""


class CropEncoder(nn.Module):
    """Conv stages -> global average pool -> linear to 512 (+ 3-way head for pretraining)."""

    def __init__(self, widths=(16, 32, 64, 128), embed_dim=EMBED_DIM, input_size=(32, 32)):
        super().__init__()
        self.config = {"widths": list(widths), "embed_dim": embed_dim, "input_size": list(input_size)}
        self.input_size = tuple(input_size)
        layers, c = [], 1
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            c = w
        self.backbone = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.project = nn.Sequential(nn.Linear(c, embed_dim), nn.ReLU())
        self.classifier = nn.Linear(embed_dim, N_GRADES)
        self.frozen = False

    def embed(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.input_size:
            raise BadShape(f"expected B x 1 x {self.input_size[0]} x {self.input_size[1]}, got {tuple(x.shape)}")
        return self.project(self.backbone(x))

    def forward(self, x):
        return self.classifier(self.embed(x))

    def freeze(self) -> "CropEncoder":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        # a frozen encoder keeps its batch-norm statistics fixed too
        return super().train(mode and not self.frozen)

    def checksum(self) -> str:
        return parameter_hash(self)


def encode(model: CropEncoder, crops) -> torch.Tensor:
    """(B, 1, h, w) crops -> (B, 512) embeddings, inference mode."""
    model.eval()
    x = torch.as_tensor(np.asarray(crops), dtype=torch.float32)
    return batched(model.embed, x)


def pretrain(crops, grades, cfg: FitConfig, weights=DEFAULT_WEIGHTS, model: CropEncoder | None = None):
    """Supervised 3-class pretraining with the weighted cross entropy.

    Returns (model, log) where each log row holds epoch, loss and training
    accuracy.
    """
    x = torch.as_tensor(np.asarray(crops), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(grades), dtype=torch.long)
    if len(x) == 0:
        raise EmptyDataset("no crops to pretrain on")
    missing = sorted(set(range(N_GRADES)) - set(y.tolist()))
    if missing:
        warnings.warn(f"grades {missing} absent from pretraining data", WeightedLossUndefined, stacklevel=2)
    seed_everything(cfg.seed)
    if model is None:
        model = CropEncoder(input_size=tuple(x.shape[2:]))

    def step(idx):
        return wce_loss(model(x[idx]), y[idx], weights)

    def metrics():
        pred = batched(model, x).argmax(-1)
        return {"accuracy": float((pred == y).float().mean())}

    log = fit(model, len(x), step, cfg, metrics=metrics)
    return model, log
