"""Keypoint heatmap U-Net for sagittal levels and the axial canal-centre regressor."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadShape, EmptyDataset
from .fitting import FitConfig, batched, fit, seed_everything
from .geometry import Point2D

N_LEVELS = 5
HEATMAP_SIGMA = 3.0


class DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    """Encoder-decoder with skip connections; 4 down/up steps, softplus output."""

    def __init__(self, in_channels=1, n_keypoints=N_LEVELS, base=16, depth=4):
        super().__init__()
        self.config = {"in_channels": in_channels, "n_keypoints": n_keypoints, "base": base, "depth": depth}
        widths = [base * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        c = in_channels
        for w in widths[:-1]:
            self.down.append(DoubleConv(c, w))
            c = w
        self.bottleneck = DoubleConv(c, widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w_hi, w in zip(widths[:0:-1], widths[-2::-1]):
            self.up.append(nn.ConvTranspose2d(w_hi, w, 2, stride=2))
            self.dec.append(DoubleConv(2 * w, w))
        self.head = nn.Conv2d(widths[0], n_keypoints, 1)
        # start near-zero everywhere, like the targets
        nn.init.constant_(self.head.bias, -4.0)
        self.divisor = 2**depth

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config["in_channels"]:
            raise BadShape(f"expected B x {self.config['in_channels']} x H x W, got {tuple(x.shape)}")
        if x.shape[2] % self.divisor or x.shape[3] % self.divisor:
            raise BadShape(f"H and W must be divisible by {self.divisor}, got {tuple(x.shape[2:])}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return F.softplus(self.head(x))


def unet_forward(model: UNet, images: torch.Tensor) -> torch.Tensor:
    return model(images)


def gaussian_heatmaps(points, shape, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """(K, H, W) unit-peak Gaussians centred on each (row, col) in ``points``."""
    H, W = shape
    rows = np.arange(H, dtype=float)[None, :, None]
    cols = np.arange(W, dtype=float)[None, None, :]
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    d2 = (rows - pts[:, 0, None, None]) ** 2 + (cols - pts[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2 * sigma**2))


def decode_keypoints(heatmap, window: int = 5, floor: float = 0.8) -> list[Point2D]:
    """Per-channel sub-pixel peak location.

    The integer argmax (first in row-major order on ties) is refined by the
    intensity-weighted centroid of a ``window`` x ``window`` neighbourhood,
    weighting each pixel by how far it rises above ``floor`` times the peak
    (or above the window minimum, whichever is higher).  Measuring only the
    top of the peak keeps the centroid unbiased when the true centre falls
    between pixels; flat neighbourhoods keep the argmax.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 3:
        raise BadShape(f"heatmap must be (K, H, W), got {hm.shape}")
    half = window // 2
    out = []
    for ch in hm:
        r, c = np.unravel_index(int(np.argmax(ch)), ch.shape)
        r0, r1 = max(r - half, 0), min(r + half + 1, ch.shape[0])
        c0, c1 = max(c - half, 0), min(c + half + 1, ch.shape[1])
        patch = ch[r0:r1, c0:c1]
        w = np.maximum(patch - max(floor * ch[r, c], patch.min()), 0.0)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            out.append(Point2D(float(r), float(c)))
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        out.append(Point2D(float((w * rr).sum() / total), float((w * cc).sum() / total)))
    return out


def train_unet(images, keypoints, cfg: FitConfig, model: UNet | None = None, sigma: float = HEATMAP_SIGMA):
    """Fit heatmaps by per-pixel MSE against Gaussian targets.

    ``images`` is (N, 1, H, W) float and ``keypoints`` (N, 5, 2) in pixels;
    ``keypoints=None`` trains against all-zero maps.  Returns (model,
    per-epoch loss log).
    """
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if len(images) == 0:
        raise EmptyDataset("no images to train the keypoint model on")
    if keypoints is None:
        targets = torch.zeros(len(images), N_LEVELS, *images.shape[2:])
    else:
        targets = torch.as_tensor(
            np.stack([gaussian_heatmaps(k, images.shape[2:], sigma) for k in keypoints]), dtype=torch.float32
        )
    seed_everything(cfg.seed)
    if model is None:
        model = UNet()

    def step(idx):
        return F.mse_loss(model(images[idx]), targets[idx])

    log = fit(model, len(images), step, cfg)
    return model, log


def predict_keypoints(model: UNet, images) -> list[list[Point2D]]:
    model.eval()
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    hm = batched(model, x, 64).numpy()
    return [decode_keypoints(h) for h in hm]


class CanalCenterNet(nn.Module):
    """Small CNN with a regression head giving the canal centre in pixels."""

    def __init__(self, size=(64, 64), widths=(8, 16, 32), hidden=64):
        super().__init__()
        self.config = {"size": list(size), "widths": list(widths), "hidden": hidden}
        self.size = tuple(size)
        layers, c = [], 1
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*layers)
        cells = (size[0] >> len(widths)) * (size[1] >> len(widths))
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c * cells, hidden), nn.ReLU(), nn.Linear(hidden, 2))

    def normalized(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.size:
            raise BadShape(f"expected B x 1 x {self.size[0]} x {self.size[1]}, got {tuple(x.shape)}")
        return torch.sigmoid(self.head(self.features(x)))

    def forward(self, x):
        scale = torch.tensor(self.size, dtype=x.dtype)
        return self.normalized(x) * scale


def canal_center_forward(model: CanalCenterNet, crops: torch.Tensor) -> torch.Tensor:
    return model(crops)


def canal_loss(model: CanalCenterNet, images: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """MSE on centres normalised by the input size."""
    scale = torch.tensor(model.size, dtype=images.dtype)
    return F.mse_loss(model.normalized(images), centers / scale)


def train_canal(images, centers, cfg: FitConfig, model: CanalCenterNet | None = None):
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    centers = torch.as_tensor(np.asarray(centers), dtype=torch.float32)
    if len(images) == 0:
        raise EmptyDataset("no images to train the canal model on")
    seed_everything(cfg.seed)
    if model is None:
        model = CanalCenterNet(size=tuple(images.shape[2:]))

    def step(idx):
        return canal_loss(model, images[idx], centers[idx])

    log = fit(model, len(images), step, cfg)
    return model, log


def predict_centers(model: CanalCenterNet, images) -> np.ndarray:
    model.eval()
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return batched(model, x).numpy().astype(np.float64)
