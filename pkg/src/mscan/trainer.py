"""Three-stage training orchestration, evaluation and metrics.

Stage 1 fits the keypoint U-Net, the sagittal slice scorer and the axial
canal-centre regressor.  Stage 2 pretrains one crop encoder per view on
crop-level grades.  Stage 3 freezes both encoders and fits the multi-view
classifier on features produced by the full inference pipeline.

Stages 1 and 2 need per-study annotations in the ``truth.json`` sidecar
format written by :mod:`mscan.synth` (keypoints, best slices, slice
visibility, canal centres); stage 3 and evaluation only need labels.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .encoder import pretrain
from .errors import EmptyDataset, MissingPriorStage, MScanError, SingleClass, TooFewStudies
from .fitting import FitConfig, fit, seed_everything
from .geometry import match_levels
from .localization import train_canal, train_unet
from .multiview import DEFAULT_WEIGHTS, MScan, wce_loss
from .pipeline import (
    CHECKPOINTS,
    STAGE_MODELS,
    ModelBundle,
    PipelineConfig,
    StudyFeatures,
    axial_crops_for,
    embed,
    extract_features,
    predict_logits,
    sagittal_crops_for,
)
from .preprocess import map_points, prepare_full
from .sliceselect import train_scorer
from .studyio import LEVELS, Study, load_pixels, load_studies
from .synth import truth_for

log = logging.getLogger(__name__)

METRICS_HEADER = ["stage", "model", "epoch", "loss", "accuracy"]


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-4
    optimizer: str = "adamw"
    weight_decay: float = 1e-2
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    split_fraction: float = 0.8
    class_weights: tuple = DEFAULT_WEIGHTS
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.optimizer.lower() != "adamw":
            raise ValueError("only the adamw optimizer is supported")
        self.class_weights = tuple(float(w) for w in self.class_weights)

    def fit_config(self, offset: int = 0) -> FitConfig:
        return FitConfig(self.epochs, self.lr, self.weight_decay, self.batch_size, self.seed + offset, self.clip_norm)


@dataclass
class RunConfig:
    """Everything one training run reads: shared defaults, per-stage overrides, pipeline options."""

    base: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        stages = {int(k): dict(v) for k, v in d.pop("stages", {}).items()}
        pipeline = PipelineConfig.from_dict(d.pop("pipeline", None))
        known = {f.name for f in fields(TrainConfig)}
        for section in [d, *stages.values()]:
            unknown = set(section) - known
            if unknown:
                raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(d, stages, pipeline)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def stage_config(self, stage: int, **overrides) -> TrainConfig:
        merged = {**self.base, **self.stages.get(stage, {}), **{k: v for k, v in overrides.items() if v is not None}}
        merged["stage"] = stage
        return TrainConfig(**merged)

    def to_dict(self) -> dict:
        return {"base": self.base, "stages": {str(k): v for k, v in self.stages.items()},
                "pipeline": self.pipeline.to_dict()}


# ---------------------------------------------------------------- splitting

def split_studies(studies, fraction: float = 0.8, seed: int = 0):
    """Deterministic study-level split; membership depends only on (ids, fraction, seed)."""
    studies = list(studies)
    if len(studies) < 2:
        raise TooFewStudies("need at least two studies to split")
    ids = sorted(_sid(s) for s in studies)
    if len(set(ids)) != len(ids):
        raise ValueError("study ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(int(round(fraction * len(ids))), 1), len(ids) - 1)
    train_ids = {ids[i] for i in order[:n_train]}
    train = [s for s in studies if _sid(s) in train_ids]
    test = [s for s in studies if _sid(s) not in train_ids]
    return train, test


def _sid(s) -> str:
    return s if isinstance(s, str) else s.study_id


# ---------------------------------------------------------------- metrics

def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score+ > score-) + P(tie)/2, via midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both positive and negative examples")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # midranks for tied runs
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(scores)]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _try_auroc(scores, labels):
    try:
        return auroc(scores, labels)
    except SingleClass:
        return None


@dataclass
class MetricsReport:
    n_studies: int
    accuracy: float
    wce_loss: float
    macro_auroc: float | None
    binary_auroc: float | None
    binary_accuracy: float
    per_level: dict
    study_ids: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def rows(self):
        yield ("n_studies", "all", str(self.n_studies))
        for name in ("accuracy", "wce_loss", "macro_auroc", "binary_auroc", "binary_accuracy"):
            yield (name, "all", _fmt(getattr(self, name)))
        for level, m in self.per_level.items():
            for name, v in m.items():
                yield (name, level, _fmt(v))
        yield ("failed_studies", "all", str(len(self.failures)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "level", "value"])
        w.writerows(self.rows())
        return buf.getvalue()


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.6f}"


def compute_metrics(logits, grades, weights=DEFAULT_WEIGHTS, study_ids=(), failures=None) -> MetricsReport:
    """Metrics over (B, 5, 3) logits and (B, 5) grades.

    Macro AUROC is one-vs-rest per class, averaged over the classes present
    at a level and then over levels.  Binary metrics group NormalMild against
    Moderate+Severe, scoring with the summed Moderate and Severe probability.
    """
    logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    grades = np.asarray(grades, dtype=np.int64)
    if len(grades) == 0:
        raise EmptyDataset("no studies to evaluate")
    probs = torch.softmax(logits, dim=-1).numpy()
    pred = probs.argmax(-1)
    loss = float(wce_loss(logits, torch.from_numpy(grades), weights))
    bin_true = (grades > 0).astype(int)
    bin_score = probs[..., 1] + probs[..., 2]
    bin_pred = (bin_score > probs[..., 0]).astype(int)
    per_level, level_macros = {}, []
    for j, level in enumerate(LEVELS):
        class_aucs = [a for c in range(3) if (a := _try_auroc(probs[:, j, c], (grades[:, j] == c).astype(int))) is not None]
        macro = float(np.mean(class_aucs)) if class_aucs else None
        if macro is not None:
            level_macros.append(macro)
        per_level[level] = {
            "accuracy": float((pred[:, j] == grades[:, j]).mean()),
            "macro_auroc": macro,
            "binary_auroc": _try_auroc(bin_score[:, j], bin_true[:, j]),
            "binary_accuracy": float((bin_pred[:, j] == bin_true[:, j]).mean()),
        }
    return MetricsReport(
        n_studies=len(grades),
        accuracy=float((pred == grades).mean()),
        wce_loss=loss,
        macro_auroc=float(np.mean(level_macros)) if level_macros else None,
        binary_auroc=_try_auroc(bin_score.ravel(), bin_true.ravel()),
        binary_accuracy=float((bin_pred == bin_true).mean()),
        per_level=per_level,
        study_ids=list(study_ids),
        failures=dict(failures or {}),
    )


# ---------------------------------------------------------------- data assembly

def _truth(study: Study) -> dict:
    try:
        return truth_for(study)
    except MScanError as exc:
        raise EmptyDataset(f"{study.study_id}: stages 1 and 2 need a truth.json annotation sidecar") from exc


def _grades(study: Study) -> np.ndarray:
    if study.labels is None:
        raise EmptyDataset(f"{study.study_id} has no labels")
    return study.labels.as_array()


def stage1_data(studies, cfg: PipelineConfig):
    """Inputs and targets for the three stage-one models."""
    size = cfg.full_size
    unet_x, unet_y, scorer_x, scorer_y, canal_x, canal_y = [], [], [], [], [], []
    for n, study in enumerate(studies):
        t = _truth(study)
        # one best slice per study, cycling through the levels
        si = t["best_slices"][n % 5]
        img = load_pixels(study.sagittal_slices[si])
        unet_x.append(prepare_full(img, size))
        unet_y.append(map_points(t["keypoints"], img.shape, size))
        for rec, vis in zip(study.sagittal_slices, t["slice_visibility"]):
            scorer_x.append(prepare_full(load_pixels(rec), size))
            scorer_y.append(vis)
        by_index = {s.index: s for s in study.axial_slices}
        for idx in sorted({i for row in t["assignments"] for i in row}):
            img = load_pixels(by_index[idx])
            canal_x.append(prepare_full(img, size))
            canal_y.append(map_points(t["canal_centers"][idx], img.shape, size))
    stack = lambda xs: np.stack(xs)[:, None].astype(np.float32)  # noqa: E731
    return (stack(unet_x), np.asarray(unet_y), stack(scorer_x), np.asarray(scorer_y, dtype=np.float32),
            stack(canal_x), np.asarray(canal_y, dtype=np.float32))


def stage2_data(studies, models: ModelBundle, cfg: PipelineConfig):
    """Crops at annotated sagittal keypoints and at predicted axial canal centres."""
    sag, sag_y, ax, ax_y = [], [], [], []
    for study in studies:
        t = _truth(study)
        grades = _grades(study)
        selected = t["best_slices"]
        sag.append(sagittal_crops_for(study, selected, t["keypoints"], cfg))
        sag_y.append(grades)
        table = match_levels(study, t["keypoints"], selected, k=cfg.k)
        crops, _ = axial_crops_for(study, table, models.canal, cfg)
        ax.append(crops.reshape(-1, *crops.shape[2:]))
        ax_y.append(np.repeat(grades, cfg.k))
    return np.concatenate(sag), np.concatenate(sag_y), np.concatenate(ax), np.concatenate(ax_y)


def pipeline_features(studies, models: ModelBundle, cfg: PipelineConfig):
    """Run inference stages one and two per study; failures are logged and skipped."""
    feats, failures = [], {}
    for study in sorted(studies, key=lambda s: s.study_id):
        try:
            feats.append(extract_features(study, models, cfg))
        except MScanError as exc:
            log.warning("skipping %s: %s", study.study_id, exc)
            failures[study.study_id] = str(exc)
    return feats, failures


# ---------------------------------------------------------------- training

def train_multiview(features: list[StudyFeatures], grades, models: ModelBundle, cfg: TrainConfig, dim=None):
    """Fit the multi-view classifier with both encoders frozen.

    Encoder outputs are computed once up front (the encoders are in eval
    mode and excluded from the optimizer).
    """
    models.require("encoder_sagittal", "encoder_axial")
    if not features:
        raise EmptyDataset("no studies with features for stage three")
    for enc in (models.encoder_sagittal, models.encoder_axial):
        enc.freeze()
    e_s, e_a = embed(features, models)
    y = torch.as_tensor(np.asarray(grades), dtype=torch.long)
    seed_everything(cfg.seed)
    model = MScan(dim=dim or e_s.shape[-1])
    frozen = {id(p) for enc in (models.encoder_sagittal, models.encoder_axial) for p in enc.parameters()}
    params = [p for p in model.parameters() if id(p) not in frozen]

    def step(idx):
        return wce_loss(model(e_s[idx], e_a[idx]), y[idx], cfg.class_weights)

    def metrics():
        with torch.no_grad():
            pred = model(e_s, e_a).argmax(-1)
        return {"accuracy": float((pred == y).float().mean())}

    history = fit(model, len(y), step, cfg.fit_config(), params=params, metrics=metrics)
    models.mscan = model
    return model, history


def _log_rows(stage, name, history):
    for row in history:
        yield [stage, name, row["epoch"], f"{row['loss']:.8f}",
               "" if row.get("accuracy") is None else f"{row['accuracy']:.6f}"]


def write_metrics_log(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)
    return path


def write_split(path, train, test) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study_id", "split"])
        for s in sorted([(s.study_id, "train") for s in train] + [(s.study_id, "test") for s in test]):
            w.writerow(s)


def read_split(path) -> dict:
    with open(path, newline="") as fh:
        return {r["study_id"]: r["split"] for r in csv.DictReader(fh)}


def load_split(data_root, out_dir, run: RunConfig):
    """Load all studies and split them; the split is recorded in ``out_dir/split.csv``."""
    studies = load_studies(data_root)
    if not studies:
        raise EmptyDataset(f"no studies under {data_root}")
    base = run.stage_config(1)
    train, test = split_studies(studies, base.split_fraction, base.seed)
    write_split(Path(out_dir) / "split.csv", train, test)
    return train, test


def run_stage(stage: int, data_root, out_dir, run: RunConfig | None = None, **overrides) -> Path:
    """Train one stage on the training split; writes checkpoints and ``stage<k>_metrics.csv``."""
    run = run or RunConfig()
    cfg = run.stage_config(stage, **overrides)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prior = [n for s in range(1, stage) for n in STAGE_MODELS[s]]
    for name in prior:
        if not (out_dir / CHECKPOINTS[name][0]).is_file():
            raise MissingPriorStage(f"stage {stage} needs the {name} checkpoint from an earlier stage in {out_dir}")
    train, _ = load_split(data_root, out_dir, run)
    pcfg = run.pipeline
    models = ModelBundle.load(out_dir, prior) if prior else ModelBundle()
    rows = []
    if stage == 1:
        ux, uy, sx, sy, cx, cy = stage1_data(train, pcfg)
        models.unet, h = train_unet(ux, uy, cfg.fit_config(0))
        rows += _log_rows(1, "unet", h)
        models.scorer, h = train_scorer(sx, sy, cfg.fit_config(1))
        rows += _log_rows(1, "scorer", h)
        models.canal, h = train_canal(cx, cy, cfg.fit_config(2))
        rows += _log_rows(1, "canal", h)
    elif stage == 2:
        sag, sag_y, ax, ax_y = stage2_data(train, models, pcfg)
        models.encoder_sagittal, h = pretrain(sag, sag_y, cfg.fit_config(3), cfg.class_weights)
        rows += _log_rows(2, "encoder_sagittal", h)
        models.encoder_axial, h = pretrain(ax, ax_y, cfg.fit_config(4), cfg.class_weights)
        rows += _log_rows(2, "encoder_axial", h)
    else:
        feats, failures = pipeline_features(train, models, pcfg)
        by_id = {s.study_id: s for s in train}
        grades = np.stack([_grades(by_id[f.study_id]) for f in feats]) if feats else np.zeros((0, 5))
        _, h = train_multiview(feats, grades, models, cfg)
        rows += _log_rows(3, "mscan", h)
    models.save(out_dir, STAGE_MODELS[stage])
    (out_dir / f"stage{stage}_config.json").write_text(
        json.dumps({"train": {**asdict(cfg), "class_weights": list(cfg.class_weights)},
                    "pipeline": pcfg.to_dict()}, indent=1, sort_keys=True) + "\n")
    return write_metrics_log(out_dir / f"stage{stage}_metrics.csv", rows)


def evaluate(models: ModelBundle, studies, cfg: PipelineConfig | None = None, weights=DEFAULT_WEIGHTS,
             train_ids=()) -> tuple[MetricsReport, dict]:
    """Full inference on ``studies``; returns the report and per-study logits."""
    cfg = cfg or PipelineConfig()
    leaked = sorted({s.study_id for s in studies} & set(train_ids))
    if leaked:
        raise ValueError(f"training studies in the evaluation set: {leaked[:5]}")
    models.require(*CHECKPOINTS)
    feats, failures = pipeline_features(studies, models, cfg)
    if not feats:
        raise EmptyDataset("every study failed; nothing to evaluate")
    logits = predict_logits(feats, models)
    by_id = {s.study_id: s for s in studies}
    grades = np.stack([_grades(by_id[f.study_id]) for f in feats])
    ids = [f.study_id for f in feats]
    report = compute_metrics(logits, grades, weights, ids, failures)
    return report, dict(zip(ids, logits))


def write_predictions(path, logits_by_id: dict) -> Path:
    """Per-study, per-level grade probabilities as CSV."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study_id", "level", "p_normal_mild", "p_moderate", "p_severe", "grade"])
        for sid in sorted(logits_by_id):
            probs = torch.softmax(torch.as_tensor(logits_by_id[sid]), dim=-1).numpy()
            for level, p in zip(LEVELS, probs):
                w.writerow([sid, level, *(f"{v:.6f}" for v in p), int(p.argmax())])
    return path


def run_eval(data_root, out_dir, run: RunConfig | None = None) -> MetricsReport:
    """Evaluate the trained bundle in ``out_dir`` on its recorded test split."""
    run = run or RunConfig()
    out_dir = Path(out_dir)
    models = ModelBundle.load(out_dir)
    split_path = out_dir / "split.csv"
    if not split_path.is_file():
        raise MissingPriorStage(f"{split_path} not found; train first")
    split = read_split(split_path)
    studies = load_studies(data_root)
    test = [s for s in studies if split.get(s.study_id) == "test"]
    train_ids = [sid for sid, part in split.items() if part == "train"]
    weights = run.stage_config(3).class_weights
    report, logits = evaluate(models, test, run.pipeline, weights, train_ids)
    (out_dir / "eval_report.csv").write_text(report.to_csv())
    write_predictions(out_dir / "eval_predictions.csv", logits)
    return report
