"""Shared minibatch training loop (AdamW, global-norm clipping, seeded order)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyDataset


@dataclass
class FitConfig:
    epochs: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    clip_norm: float = 1.0


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def fit(model: torch.nn.Module, n_items: int, step, cfg: FitConfig, params=None, metrics=None,
        on_epoch=None) -> list[dict]:
    """Run ``cfg.epochs`` passes over ``n_items`` examples.

    ``step(idx)`` receives a LongTensor of example indices and returns the
    scalar batch loss.  ``metrics()`` (optional) is called after each epoch
    and may add entries such as accuracy to the log row.  Returns one dict per
    epoch with the sample-weighted mean loss.
    """
    if n_items <= 0:
        raise EmptyDataset("no training examples")
    params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    log = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n_items)
        total = 0.0
        for start in range(0, n_items, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            opt.zero_grad()
            loss = step(idx)
            loss.backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()
            total += float(loss.detach()) * len(idx)
        row = {"epoch": epoch + 1, "loss": total / n_items}
        if metrics is not None:
            model.eval()
            row.update(metrics())
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return log


def batched(fn, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Apply ``fn`` over the leading axis in chunks without tracking gradients."""
    with torch.no_grad():
        if len(x) == 0:
            return fn(x)
        return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
