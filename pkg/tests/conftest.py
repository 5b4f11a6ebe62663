from pathlib import Path

import numpy as np
import pytest
import torch

from mscan.geometry import SliceGeometry
from mscan.synth import SynthParams, generate


def random_geometry(rng) -> SliceGeometry:
    # random orthonormal pair via QR
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return SliceGeometry(
        row_dir=tuple(q[:, 0]),
        col_dir=tuple(q[:, 1]),
        origin=tuple(rng.uniform(-200, 200, 3)),
        spacing_row=float(rng.uniform(0.2, 5)),
        spacing_col=float(rng.uniform(0.2, 5)),
    )


def finite_difference_check(model, loss_fn, h=1e-4):
    """Max elementwise relative error between autograd and central differences.

    The denominator is floored at 1e-6 so that vanishing gradients are compared absolutely.
    """
    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            flat, g = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                ana = g[i].item()
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small")
    params = SynthParams(n_studies=6, seed=11)
    generate(params, root)
    return root, params


@pytest.fixture(scope="session")
def noiseless_synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_clean")
    params = SynthParams(n_studies=20, seed=5, noise=0.0)
    generate(params, root)
    return root, params


TINY_RUN = {
    "seed": 0,
    "split_fraction": 0.8,
    "stages": {
        "1": {"lr": 1e-3, "epochs": 2, "batch_size": 8},
        "2": {"lr": 1e-3, "epochs": 2, "batch_size": 16},
        "3": {"lr": 1e-4, "epochs": 2, "batch_size": 4},
    },
    "pipeline": {"full_size": [64, 64], "sagittal_crop": [32, 32], "axial_crop": [32, 32],
                 "encoder_input": [32, 32], "clahe_tiles": [4, 4]},
}


def run_all_stages(data_root, out_dir, run):
    from mscan.trainer import run_eval, run_stage

    for stage in (1, 2, 3):
        run_stage(stage, data_root, out_dir, run)
    return run_eval(data_root, out_dir, run)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Ten studies through all three stages and evaluation, with a couple of epochs each."""
    from mscan.trainer import RunConfig

    root = tmp_path_factory.mktemp("tiny_run")
    generate(SynthParams(n_studies=10, seed=21), root / "data")
    run = RunConfig.from_dict(TINY_RUN)
    report = run_all_stages(root / "data", root / "models", run)
    return root / "data", root / "models", run, report


# ---------------------------------------------------------------- acceptance plumbing

BENCHMARK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic_benchmark.json"
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    n, title = marker
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["notes"] += [v for k, v in report.user_properties if k == "measured"]


@pytest.fixture(autouse=True)
def _criterion_tag(request):
    m = request.node.get_closest_marker("criterion")
    if m is not None:
        request.node.user_properties.append(("criterion", tuple(m.args)))


@pytest.fixture
def measured(request):
    """Record a measured value that is echoed next to the criterion's pass/fail line."""
    def note(text):
        request.node.user_properties.append(("measured", text))
    return note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        notes = "; ".join(e["notes"])
        line = f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """400 synthetic studies trained through all three stages with the benchmark config."""
    import time

    from mscan.trainer import RunConfig, run_eval, run_stage

    root = tmp_path_factory.mktemp("benchmark")
    timings = {}
    t0 = time.perf_counter()
    generate(SynthParams(n_studies=400, seed=0), root / "data")
    timings["generate"] = time.perf_counter() - t0
    run = RunConfig.from_file(BENCHMARK_CONFIG)
    for stage in (1, 2, 3):
        t = time.perf_counter()
        run_stage(stage, root / "data", root / "models", run)
        timings[f"stage{stage}"] = time.perf_counter() - t
    t = time.perf_counter()
    report = run_eval(root / "data", root / "models", run)
    timings["eval"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    return {"data": root / "data", "models": root / "models", "run": run, "report": report, "timings": timings}
