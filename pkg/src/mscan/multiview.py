"""Multi-view sequence classifier over the five spinal levels.

Data flow for a batch of studies::

    E_s  (B, T, D)      -> bidirectional GRU          -> O_s  (B, T, D)
    E_a  (B, T, 3, D)   -> LSTM over 3 slices/level   -> H_a  (B, T, D)
                        -> bidirectional GRU          -> O_ax (B, T, D)
    O_1 = attn(Q=O_ax, K=O_s,  V=O_s)
    O_2 = attn(Q=O_s,  K=O_ax, V=O_ax)
    spatial dropout on O_1, O_2 -> concat (B, T, 2D) -> linear+ReLU (B, T, D)
    -> one linear head per level -> logits (B, T, 3)
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadLabel, BadShape

N_LEVELS = 5
N_GRADES = 3
SLICES_PER_LEVEL = 3
DEFAULT_WEIGHTS = (1.0, 2.0, 4.0)


def _check(x: torch.Tensor, shape: tuple, what: str):
    """``shape`` entries of None match any size."""
    if x.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, x.shape)):
        want = " x ".join("*" if s is None else str(s) for s in shape)
        raise BadShape(f"{what}: expected {want}, got {tuple(x.shape)}")


class BiGRU(nn.Module):
    """Bidirectional GRU over the level axis; each direction is dim/2 wide."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError("dim must be even")
        self.dim = dim
        self.rnn = nn.GRU(dim, dim // 2, batch_first=True, bidirectional=True)

    def forward(self, x):
        _check(x, (None, None, self.dim), "bi-GRU input")
        out, _ = self.rnn(x)
        return out


class LevelLSTM(nn.Module):
    """One LSTM shared by all levels, run over each level's slices.

    The final hidden state summarises the level.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.rnn = nn.LSTM(dim, dim, batch_first=True)

    def forward(self, x):
        _check(x, (None, None, None, self.dim), "axial input")
        B, T, S, D = x.shape
        _, (h, _) = self.rnn(x.reshape(B * T, S, D))
        return h[-1].reshape(B, T, D)


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product attention with learned projections.

    ``identity=True`` drops every projection (a single head attending
    directly over the inputs); used to check the attention core in isolation.
    """

    def __init__(self, dim: int, n_heads: int = 4, identity: bool = False):
        super().__init__()
        if identity:
            n_heads = 1
        if dim % n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.dim, self.n_heads, self.identity = dim, n_heads, identity
        if not identity:
            self.q = nn.Linear(dim, dim)
            self.k = nn.Linear(dim, dim)
            self.v = nn.Linear(dim, dim)
            self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v, return_weights: bool = False):
        for name, t in (("query", q), ("key", k), ("value", v)):
            _check(t, (None, None, self.dim), name)
        if k.shape != v.shape or q.shape[0] != k.shape[0]:
            raise BadShape("keys and values must share a shape, and the batch size must match queries")
        if not self.identity:
            q, k, v = self.q(q), self.k(k), self.v(v)
        B, Tq, D = q.shape
        H, hd = self.n_heads, D // self.n_heads
        qh = q.reshape(B, Tq, H, hd).transpose(1, 2)
        kh = k.reshape(B, -1, H, hd).transpose(1, 2)
        vh = v.reshape(B, -1, H, hd).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(hd)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(B, Tq, D)
        if not self.identity:
            out = self.out(out)
        return (out, weights) if return_weights else out


def spatial_dropout(x: torch.Tensor, rate: float, training: bool) -> torch.Tensor:
    """Zero whole feature channels (shared across the level axis) of a (B, T, C) tensor."""
    if not training or rate <= 0:
        return x
    keep = torch.empty(x.shape[0], 1, x.shape[2], dtype=x.dtype).bernoulli_(1 - rate)
    return x * keep / (1 - rate)


class FuseClassify(nn.Module):
    def __init__(self, dim: int, n_heads: int = 4, dropout: float = 0.1, n_levels: int = N_LEVELS):
        super().__init__()
        self.dim, self.n_levels, self.dropout = dim, n_levels, dropout
        self.attn_ax_to_sag = CrossAttention(dim, n_heads)
        self.attn_sag_to_ax = CrossAttention(dim, n_heads)
        self.project = nn.Linear(2 * dim, dim)
        self.heads = nn.ModuleList(nn.Linear(dim, N_GRADES) for _ in range(n_levels))

    def forward(self, o_s, o_ax, return_parts: bool = False):
        _check(o_s, (None, self.n_levels, self.dim), "sagittal states")
        _check(o_ax, tuple(o_s.shape), "axial states")
        o1 = self.attn_ax_to_sag(o_ax, o_s, o_s)
        o2 = self.attn_sag_to_ax(o_s, o_ax, o_ax)
        o1 = spatial_dropout(o1, self.dropout, self.training)
        o2 = spatial_dropout(o2, self.dropout, self.training)
        o = torch.cat([o1, o2], dim=-1)
        z = F.relu(self.project(o))
        logits = torch.stack([head(z[:, j]) for j, head in enumerate(self.heads)], dim=1)
        if return_parts:
            return logits, {"O_1": o1, "O_2": o2, "O": o, "projected": z}
        return logits


class MScan(nn.Module):
    """Sequence encoders, bidirectional cross attention and per-level heads."""

    def __init__(self, dim: int = 512, n_heads: int = 4, dropout: float = 0.1, n_levels: int = N_LEVELS):
        super().__init__()
        self.config = {"dim": dim, "n_heads": n_heads, "dropout": dropout, "n_levels": n_levels}
        self.dim, self.n_levels = dim, n_levels
        self.sagittal_rnn = BiGRU(dim)
        self.axial_level_rnn = LevelLSTM(dim)
        self.axial_rnn = BiGRU(dim)
        self.fuse = FuseClassify(dim, n_heads, dropout, n_levels)

    def states(self, e_s, e_a):
        _check(e_s, (None, self.n_levels, self.dim), "E_s")
        _check(e_a, (e_s.shape[0], self.n_levels, SLICES_PER_LEVEL, self.dim), "E_a")
        o_s = self.sagittal_rnn(e_s)
        h_a = self.axial_level_rnn(e_a)
        o_ax = self.axial_rnn(h_a)
        return o_s, h_a, o_ax

    def forward(self, e_s, e_a):
        o_s, _, o_ax = self.states(e_s, e_a)
        return self.fuse(o_s, o_ax)


def sagittal_rnn(model: MScan, e_s):
    return model.sagittal_rnn(e_s)


def axial_level_rnn(model: MScan, e_a):
    return model.axial_level_rnn(e_a)


def axial_rnn(model: MScan, h_a):
    return model.axial_rnn(h_a)


def cross_attention(attn: CrossAttention, q, k, v):
    return attn(q, k, v)


def fuse_and_classify(model: MScan, o_s, o_ax):
    return model.fuse(o_s, o_ax)


def mscan_forward(model: MScan, e_s, e_a):
    return model(e_s, e_a)


def wce_loss(logits: torch.Tensor, grades, weights=DEFAULT_WEIGHTS, eps: float | None = None) -> torch.Tensor:
    """Class-weighted cross entropy averaged over every (study, level) entry.

    ``logits`` is (..., 3) and ``grades`` the matching (...) integer labels.
    Each entry contributes ``w[g] * -log(softmax(logits)[g])``, computed with
    ``log_softmax`` so it stays finite for any finite logits.  Passing ``eps``
    clamps the probability at ``eps`` first, which caps each entry's loss.
    """
    grades = torch.as_tensor(grades)
    if logits.shape[-1] != N_GRADES or tuple(grades.shape) != tuple(logits.shape[:-1]):
        raise BadShape(f"logits {tuple(logits.shape)} do not match grades {tuple(grades.shape)}")
    if grades.is_floating_point() or grades.numel() and (grades.min() < 0 or grades.max() >= N_GRADES):
        raise BadLabel("grades must be integers in {0, 1, 2}")
    w = torch.as_tensor(weights, dtype=logits.dtype)
    if w.shape != (N_GRADES,) or bool((w <= 0).any()):
        raise ValueError("weights must be three positive numbers")
    grades = grades.long()
    log_p = torch.log_softmax(logits, dim=-1)
    if eps is not None:
        log_p = log_p.clamp_min(math.log(eps))
    nll = -log_p.gather(-1, grades.unsqueeze(-1)).squeeze(-1)
    return (w[grades] * nll).mean()


def probabilities(logits) -> np.ndarray:
    return torch.softmax(torch.as_tensor(logits), dim=-1).numpy()
