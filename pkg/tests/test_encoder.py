import numpy as np
import pytest
import torch

from mscan.encoder import CropEncoder, WeightedLossUndefined, encode, pretrain
from mscan.errors import BadShape, EmptyDataset
from mscan.fitting import FitConfig
from mscan.multiview import wce_loss
from mscan.pipeline import ModelBundle, StudyFeatures
from mscan.preprocess import normalize
from mscan.synth import render_axial
from mscan.trainer import TrainConfig, train_multiview


def ellipse_crops(rng, n_per_class=10, size=32):
    """Canal cross-sections whose minor axis depends on the class."""
    widths = {0: (14, 18), 1: (8, 10), 2: (3, 5)}
    crops, labels = [], []
    for g, (lo, hi) in widths.items():
        for _ in range(n_per_class):
            centre = tuple(size / 2 + rng.uniform(-2, 2, 2))
            img = render_axial(size, centre, rng.uniform(lo, hi), major_px=10.0)
            crops.append(normalize(img + rng.normal(0, 60, img.shape))[None])
            labels.append(g)
    return np.asarray(crops, dtype=np.float32), np.asarray(labels)


def test_encode_shape_and_duplicates():
    m = CropEncoder()
    x = torch.randn(3, 1, 32, 32)
    x[2] = x[0]
    e = encode(m, x)
    assert e.shape == (3, 512) and torch.isfinite(e).all()
    torch.testing.assert_close(e[2], e[0], rtol=0, atol=0)
    torch.testing.assert_close(encode(m, x), e, rtol=0, atol=0)


@pytest.mark.parametrize("widths", [(8,), (4, 8, 16), (16, 32, 64, 128)])
def test_embedding_is_always_512(widths):
    assert encode(CropEncoder(widths=widths, input_size=(16, 16)), torch.randn(2, 1, 16, 16)).shape == (2, 512)


def test_bad_crop_shape():
    with pytest.raises(BadShape):
        encode(CropEncoder(), torch.randn(2, 1, 16, 16))


def test_overfit_thirty_crops(rng):
    x, y = ellipse_crops(rng)
    _, log = pretrain(x, y, FitConfig(epochs=300, lr=1e-3, batch_size=30, seed=0))
    reached = [row["epoch"] for row in log if row["accuracy"] == 1.0]
    assert reached and reached[0] <= 300


def test_pretrain_seeded_reruns_identical(rng):
    x, y = ellipse_crops(rng, 4)
    cfg = FitConfig(epochs=3, lr=1e-3, batch_size=5, seed=9)
    m1, a = pretrain(x, y, cfg)
    m2, b = pretrain(x, y, cfg)
    assert a == b and m1.checksum() == m2.checksum()


def test_doubling_severe_matches_weighted_mean(rng):
    x, y = ellipse_crops(rng, 5)
    m = CropEncoder().eval()
    with torch.no_grad():
        logits = m(torch.from_numpy(x)).double()
    yt = torch.from_numpy(y)
    nll = -torch.log_softmax(logits, -1).gather(1, yt[:, None])[:, 0]
    w = torch.tensor([1.0, 2.0, 4.0], dtype=torch.float64)
    base = wce_loss(logits, yt)
    torch.testing.assert_close(base, (w[yt] * nll).mean(), rtol=0, atol=1e-12)
    sev = yt == 2
    doubled = wce_loss(torch.cat([logits, logits[sev]]), torch.cat([yt, yt[sev]]))
    expect = ((w[yt] * nll).sum() + 4 * nll[sev].sum()) / (len(yt) + int(sev.sum()))
    torch.testing.assert_close(doubled, expect, rtol=0, atol=1e-12)


def test_missing_class_warns_and_empty_raises(rng):
    x, y = ellipse_crops(rng, 3)
    keep = y < 2
    with pytest.warns(WeightedLossUndefined):
        pretrain(x[keep], y[keep], FitConfig(epochs=1, batch_size=8))
    with pytest.raises(EmptyDataset):
        pretrain(x[:0], y[:0], FitConfig(epochs=1))


def test_frozen_encoders_unchanged_by_stage_three(rng):
    bundle = ModelBundle(encoder_sagittal=CropEncoder(), encoder_axial=CropEncoder())
    before = (bundle.encoder_sagittal.checksum(), bundle.encoder_axial.checksum())
    feats = [
        StudyFeatures(f"s{i}", rng.normal(size=(5, 1, 32, 32)).astype(np.float32),
                      rng.normal(size=(5, 3, 1, 32, 32)).astype(np.float32))
        for i in range(6)
    ]
    grades = rng.integers(0, 3, (6, 5))
    model, log = train_multiview(feats, grades, bundle, TrainConfig(stage=3, epochs=1, batch_size=2), dim=None)
    assert len(log) == 1
    assert (bundle.encoder_sagittal.checksum(), bundle.encoder_axial.checksum()) == before
    assert all(not p.requires_grad for p in bundle.encoder_axial.parameters())
    # batch-norm running statistics stay put as well
    assert not bundle.encoder_sagittal.training
