"""The nine acceptance criteria, each checked at its stated tolerance.

A pass/fail line per criterion is printed in the terminal summary (see
``pytest_terminal_summary`` in conftest).  Criteria 1 and 9 share one
400-study training run, which takes several minutes on a single core.
"""
import math

import numpy as np
import pytest
import torch

from mscan.errors import NotEnoughSlices
from mscan.geometry import match_levels, nearest_axial_slices, project_to_3d
from mscan.localization import CanalCenterNet, canal_loss
from mscan.multiview import CrossAttention, MScan, mscan_forward, wce_loss
from mscan.pipeline import CHECKPOINTS, ModelBundle, StudyFeatures, locate_levels
from mscan.preprocess import ClaheParams, clahe
from mscan.encoder import CropEncoder
from mscan.sliceselect import select_slices
from mscan.studyio import load_study
from mscan.synth import SynthParams, generate, truth
from mscan.trainer import RunConfig, TrainConfig, auroc, read_split, train_multiview

from conftest import TINY_RUN, finite_difference_check, random_geometry, run_all_stages
from test_geometry import axial_records, brute_nearest, homogeneous_oracle
from test_multiview import direct_wce
from test_sliceselect import brute_select
from test_trainer import pair_count_auroc

BENCH = "400 synthetic studies, 80/20 split, 3 stages: macro AUROC >= 0.95, accuracy >= 0.90, < 30 min"


# ------------------------------------------------------------------ 1

@pytest.mark.criterion(1, BENCH)
def test_c1_synthetic_benchmark(benchmark, measured):
    r, t = benchmark["report"], benchmark["timings"]
    measured(f"macro AUROC {r.macro_auroc:.4f}, accuracy {r.accuracy:.4f}, "
             f"binary AUROC {r.binary_auroc:.4f}, {r.n_studies} test studies, wall clock {t['total'] / 60:.1f} min")
    assert r.n_studies == 80 and not r.failures
    assert r.macro_auroc >= 0.95
    assert r.accuracy >= 0.90
    assert t["total"] < 30 * 60


# ------------------------------------------------------------------ 2

@pytest.mark.criterion(2, "geometry: projection vs 4x4 oracle (1e-9, 1000 cases); nearest slices vs brute force (1000)")
def test_c2_geometry_oracles(measured):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        g = random_geometry(rng)
        p = rng.uniform(-50, 600, 2)
        worst = max(worst, float(np.abs(np.subtract(project_to_3d(g, p), homogeneous_oracle(g, p))).max()))
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(3, 40))
        zs = list(rng.integers(-12, 12, n) / 2.0)
        level = float(rng.integers(-26, 26)) / 4
        mismatches += nearest_axial_slices(level, axial_records(zs), 3) != brute_nearest(level, zs, 3)
    measured(f"max projection error {worst:.2e}, {mismatches} nearest-slice mismatches")
    assert worst < 1e-9 and mismatches == 0
    with pytest.raises(NotEnoughSlices):
        nearest_axial_slices(0.0, axial_records([0.0, 1.0]), 3)


# ------------------------------------------------------------------ 3

@pytest.mark.criterion(3, "select_slices equals exhaustive column-max search on 1000 random Nx5 matrices")
def test_c3_selection_equivalence(measured):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        P = rng.integers(0, 5, (n, 5)) / 4.0 if rng.random() < 0.5 else rng.uniform(0, 1, (n, 5))
        mismatches += select_slices(P) != brute_select(P.tolist())
    measured(f"{mismatches} mismatches")
    assert mismatches == 0


# ------------------------------------------------------------------ 4

@pytest.mark.criterion(4, "wce_loss vs direct formula (1e-9, 1000 cases); unit weights equal cross entropy (1e-12)")
def test_c4_loss_correctness(measured):
    rng = np.random.default_rng(4)
    worst = worst_ce = 0.0
    for _ in range(1000):
        B = int(rng.integers(1, 8))
        logits = rng.normal(0, rng.uniform(0.1, 10), (B, 5, 3))
        grades = rng.integers(0, 3, (B, 5))
        lt, gt = torch.from_numpy(logits), torch.from_numpy(grades)
        worst = max(worst, abs(wce_loss(lt, gt).item() - direct_wce(logits, grades, [1, 2, 4])))
        ce = torch.nn.functional.cross_entropy(lt.reshape(-1, 3), gt.reshape(-1)).item()
        worst_ce = max(worst_ce, abs(wce_loss(lt, gt, [1, 1, 1]).item() - ce))
    measured(f"max deviation {worst:.1e} (weighted), {worst_ce:.1e} (unit weights)")
    assert worst < 1e-9 and worst_ce < 1e-12


# ------------------------------------------------------------------ 5

@pytest.mark.criterion(5, "float64 finite-difference gradients: multi-view model (dim 8, T=5, B=2) and canal regressor")
def test_c5_gradient_suite(measured):
    torch.manual_seed(5)
    m = MScan(dim=8, n_heads=4).double().eval()
    e_s = torch.randn(2, 5, 8, dtype=torch.float64)
    e_a = torch.randn(2, 5, 3, 8, dtype=torch.float64)
    y = torch.randint(0, 3, (2, 5))
    err_m = finite_difference_check(m, lambda: wce_loss(mscan_forward(m, e_s, e_a), y))
    c = CanalCenterNet(size=(16, 16), widths=(2, 4), hidden=8).double()
    x = torch.randn(2, 1, 16, 16, dtype=torch.float64)
    t = torch.rand(2, 2, dtype=torch.float64) * 16
    err_c = finite_difference_check(c, lambda: canal_loss(c, x, t))
    n_params = sum(p.numel() for p in m.parameters()) + sum(p.numel() for p in c.parameters())
    measured(f"max relative error {err_m:.1e} (multi-view), {err_c:.1e} (canal), {n_params} parameters checked")
    assert err_m < 1e-4 and err_c < 1e-4


# ------------------------------------------------------------------ 6

@pytest.mark.criterion(6, "shape contracts, attention identity and permutation equivariance, CLAHE invariants, frozen encoders")
@pytest.mark.parametrize("B", [1, 2, 7])
def test_c6_shapes(B):
    m = MScan().eval()
    e_s, e_a = torch.randn(B, 5, 512), torch.randn(B, 5, 3, 512)
    o_s, h_a, o_ax = m.states(e_s, e_a)
    logits, parts = m.fuse(o_s, o_ax, return_parts=True)
    assert o_s.shape == h_a.shape == o_ax.shape == parts["O_1"].shape == parts["O_2"].shape == (B, 5, 512)
    assert parts["O"].shape == (B, 5, 1024) and logits.shape == (B, 5, 3)
    assert CropEncoder().eval().embed(torch.randn(B, 1, 32, 32)).shape == (B, 512)
    from mscan.localization import UNet

    assert UNet()(torch.randn(B, 1, 32, 32)).shape == (B, 5, 32, 32)
    assert CanalCenterNet(size=(32, 32))(torch.randn(B, 1, 32, 32)).shape == (B, 2)


@pytest.mark.criterion(6, "shape contracts, attention identity and permutation equivariance, CLAHE invariants, frozen encoders")
def test_c6_attention():
    attn = CrossAttention(8, identity=True).double()
    q, k, v = (torch.randn(4, 1, 8, dtype=torch.float64) for _ in range(3))
    assert torch.equal(attn(q, k, v), v)
    for identity in (True, False):
        a = CrossAttention(16, 4, identity=identity).double()
        q, k, v = (torch.randn(3, 5, 16, dtype=torch.float64) for _ in range(3))
        perm = torch.randperm(5)
        torch.testing.assert_close(a(q, k[:, perm], v[:, perm]), a(q, k, v), rtol=0, atol=1e-12)


@pytest.mark.criterion(6, "shape contracts, attention identity and permutation equivariance, CLAHE invariants, frozen encoders")
def test_c6_clahe():
    rng = np.random.default_rng(6)
    for value in (0, 1, 517, 65535):
        img = np.full((31, 40), value, dtype=np.uint16)
        assert np.array_equal(clahe(img, ClaheParams(2.0, (4, 4))), img)
    for _ in range(20):
        img = rng.integers(0, 4096, (24, 24)).astype(np.uint16)
        out = clahe(img, ClaheParams(float(rng.uniform(1, 5)), (1, 1)))
        order = np.argsort(img.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order].astype(np.int64)) >= 0)


@pytest.mark.criterion(6, "shape contracts, attention identity and permutation equivariance, CLAHE invariants, frozen encoders")
def test_c6_frozen_encoders(measured):
    rng = np.random.default_rng(7)
    bundle = ModelBundle(encoder_sagittal=CropEncoder(), encoder_axial=CropEncoder())
    before = bundle.encoder_sagittal.checksum(), bundle.encoder_axial.checksum()
    feats = [StudyFeatures(f"s{i}", rng.normal(size=(5, 1, 32, 32)).astype(np.float32),
                           rng.normal(size=(5, 3, 1, 32, 32)).astype(np.float32)) for i in range(8)]
    model, log = train_multiview(feats, rng.integers(0, 3, (8, 5)), bundle, TrainConfig(stage=3, epochs=1, batch_size=4))
    after = bundle.encoder_sagittal.checksum(), bundle.encoder_axial.checksum()
    measured(f"encoder hashes {'unchanged' if after == before else 'CHANGED'} after one stage-3 epoch")
    assert after == before


# ------------------------------------------------------------------ 7

@pytest.mark.criterion(7, "auroc vs O(n^2) pair counting (1e-12, n <= 100, ties); separated case exactly 1.0")
def test_c7_auroc(measured):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 101))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 10, n) / 9.0 if rng.random() < 0.5 else rng.normal(size=n)
        worst = max(worst, abs(auroc(s, y) - pair_count_auroc(s, y)))
    separated = auroc(np.r_[rng.uniform(0, 1, 50), rng.uniform(2, 3, 50)], np.r_[np.zeros(50), np.ones(50)])
    measured(f"max deviation {worst:.1e}; separated case {separated!r}")
    assert worst < 1e-12 and separated == 1.0


# ------------------------------------------------------------------ 8

@pytest.mark.criterion(8, "identical seed and inputs give byte-identical metrics logs and reports")
def test_c8_determinism(tiny_run, tmp_path, measured):
    data, first, _, _ = tiny_run
    run_all_stages(data, tmp_path / "again", RunConfig.from_dict(TINY_RUN))
    names = ["split.csv", "eval_report.csv", "eval_predictions.csv"]
    names += [f"stage{k}_{kind}" for k in (1, 2, 3) for kind in ("metrics.csv", "config.json")]
    names += [fname for fname, _ in CHECKPOINTS.values()]
    differing = [n for n in names if (first / n).read_bytes() != (tmp_path / "again" / n).read_bytes()]
    measured(f"{len(names) - len(differing)}/{len(names)} files byte-identical")
    assert not differing


# ------------------------------------------------------------------ 9

@pytest.mark.criterion(9, "stage-1 U-Net mean keypoint error < 4 px; match_levels recovers >= 95% of noiseless studies")
def test_c9_localization(benchmark, tmp_path, measured):
    models = ModelBundle.load(benchmark["models"], ["unet", "scorer"])
    cfg = benchmark["run"].pipeline
    data = benchmark["data"]
    split = read_split(benchmark["models"] / "split.csv")
    errors = []
    for sid in sorted(k for k, v in split.items() if v == "test"):
        study, t = load_study(data / sid), truth(data, sid)
        _, _, kps = locate_levels(study, models, cfg)
        errors += [math.dist(p, q) for p, q in zip(kps, t["keypoints"])]
    # fresh noiseless studies never seen in training
    clean = tmp_path / "clean"
    generate(SynthParams(n_studies=40, seed=99, noise=0.0), clean)
    recovered = 0
    for n in range(40):
        sid = f"study_{n:04d}"
        study, t = load_study(clean / sid), truth(clean, sid)
        _, selected, kps = locate_levels(study, models, cfg)
        recovered += match_levels(study, kps, selected).tolist() == t["assignments"]
    mean_err = float(np.mean(errors))
    measured(f"mean keypoint error {mean_err:.2f} px over {len(errors)} held-out levels; "
             f"{recovered}/40 noiseless studies matched exactly")
    assert mean_err < 4.0
    assert recovered / 40 >= 0.95
