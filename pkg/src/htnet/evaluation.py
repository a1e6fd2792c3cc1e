"""Leave-one-subject-out protocol and report assembly."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Mapping

import numpy as np

from . import metrics
from .manifest import SampleManifest
from .model import HTNet, ModelConfig
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

REPORT_FORMAT = "htnet-loso-report/1"

Predictor = Callable[[np.ndarray], np.ndarray]
# (train images, train labels, fold index) -> predictor returning logits
Trainer = Callable[[np.ndarray, np.ndarray, int], Predictor]


class ProtocolError(ValueError):
    pass


class FoldError(RuntimeError):
    def __init__(self, subject: str, cause: BaseException):
        super().__init__(f"fold for subject {subject} failed: {cause}")
        self.subject = subject
        self.cause = cause


@dataclass(frozen=True)
class Fold:
    subject: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def loso_split(manifest: SampleManifest) -> list[Fold]:
    """One fold per (dataset-namespaced) subject, holding out all its samples."""
    subjects = manifest.subjects()
    if len(subjects) < 2:
        raise ProtocolError(f"LOSO needs at least 2 subjects, found {len(subjects)}")
    folds = []
    for subject in subjects:
        test = tuple(s.sample_id for s in manifest if s.subject_key == subject)
        train = tuple(s.sample_id for s in manifest if s.subject_key != subject)
        folds.append(Fold(subject, train, test))
    return folds


@dataclass
class FoldReport:
    subject: str
    sample_ids: list[str]
    datasets: list[str]
    y_true: list[int]
    y_pred: list[int]
    logits: list[list[float]]
    confusion: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = metrics.confusion_matrix(self.y_true, self.y_pred)
        if int(self.confusion.sum()) != len(self.sample_ids):
            raise ValueError("confusion total differs from held-out sample count")

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "n_test": len(self.sample_ids),
            "confusion": self.confusion.tolist(),
            "samples": [
                {"sample_id": sid, "dataset": ds, "true": t, "pred": p, "logits": lg}
                for sid, ds, t, p, lg in zip(
                    self.sample_ids, self.datasets, self.y_true, self.y_pred, self.logits
                )
            ],
        }


def htnet_trainer(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Trainer:
    return _HTNetTrainer(model_cfg, train_cfg)


@dataclass(frozen=True)
class _HTNetTrainer:
    model_cfg: ModelConfig
    train_cfg: TrainConfig

    def __call__(self, images, labels, fold_index):
        model = HTNet(self.model_cfg, seed=self.train_cfg.seed + fold_index)
        fit(model, images, labels, self.train_cfg)
        return lambda x: model.forward(x).data


def _run_fold(args) -> FoldReport:
    index, fold, trainer, images, labels, datasets = args
    try:
        predictor = trainer(
            np.stack([images[sid] for sid in fold.train_ids]),
            np.array([labels[sid] for sid in fold.train_ids]),
            index,
        )
        test_x = np.stack([images[sid] for sid in fold.test_ids])
        logits = np.asarray(predictor(test_x), dtype=np.float64)
    except Exception as exc:
        raise FoldError(fold.subject, exc) from exc
    return FoldReport(
        subject=fold.subject,
        sample_ids=list(fold.test_ids),
        datasets=[datasets[s] for s in fold.test_ids],
        y_true=[int(labels[s]) for s in fold.test_ids],
        y_pred=[int(p) for p in logits.argmax(axis=1)],
        logits=[[float(v) for v in row] for row in logits],
    )


def summarize(cm: np.ndarray) -> dict:
    """UF1/UAR plus per-class detail; undefined entries become ``None``."""
    out = {
        "n": int(cm.sum()),
        "confusion": cm.tolist(),
        "empty_classes": metrics.empty_classes(cm),
    }
    try:
        out["f1_per_class"] = metrics.per_class_f1(cm).tolist()
        out["uf1"] = metrics.uf1(cm)
    except metrics.DegenerateInputError:
        out["f1_per_class"], out["uf1"] = None, None
    try:
        out["uar"] = metrics.uar(cm)
        out["recall_per_class"] = (np.diag(cm) / cm.sum(axis=1)).tolist()
    except metrics.DegenerateInputError:
        out["uar"], out["recall_per_class"] = None, None
    return out


@dataclass
class LosoReport:
    folds: list[FoldReport]
    model_cfg: ModelConfig | None = None
    train_cfg: TrainConfig | None = None
    extra: dict = field(default_factory=dict)

    @property
    def pooled_confusion(self) -> np.ndarray:
        return sum((f.confusion for f in self.folds), np.zeros((3, 3), dtype=np.int64))

    def dataset_confusion(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for f in self.folds:
            for ds, t, p in zip(f.datasets, f.y_true, f.y_pred):
                out.setdefault(ds, np.zeros((3, 3), dtype=np.int64))[t, p] += 1
        return dict(sorted(out.items()))

    @property
    def uf1(self) -> float:
        return metrics.uf1(self.pooled_confusion)

    @property
    def uar(self) -> float:
        return metrics.uar(self.pooled_confusion)

    def to_dict(self, timestamp: bool = True) -> dict:
        out = {
            "format": REPORT_FORMAT,
            "classes": list(metrics.CLASS_NAMES),
            "seed": self.train_cfg.seed if self.train_cfg else None,
            "config": {
                "model": self.model_cfg.to_dict() if self.model_cfg else None,
                "train": self.train_cfg.to_dict() if self.train_cfg else None,
                **self.extra,
            },
            "pooled": summarize(self.pooled_confusion),
            "per_dataset": {ds: summarize(cm) for ds, cm in self.dataset_confusion().items()},
            "folds": [f.to_dict() for f in self.folds],
            "notes": {
                "aggregation": "TP/FP/FN summed over all folds before UF1/UAR",
                "per_dataset": "pooled counts over that dataset's held-out samples",
                "empty_class_f1": "F1 of a class with no true and no predicted samples is 0",
            },
        }
        if timestamp:
            out["created_at"] = datetime.now(timezone.utc).isoformat()
        return out


def evaluate_loso(
    manifest: SampleManifest,
    images: Mapping[str, np.ndarray],
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    trainer: Trainer | None = None,
    jobs: int = 1,
) -> LosoReport:
    """Train a fresh model per held-out subject and pool the predictions."""
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    trainer = trainer or htnet_trainer(model_cfg, train_cfg)
    missing = [s.sample_id for s in manifest if s.sample_id not in images]
    if missing:
        raise ProtocolError(f"no features for samples {missing[:5]}")
    labels = {s.sample_id: s.label for s in manifest}
    datasets = {s.sample_id: s.dataset for s in manifest}
    folds = loso_split(manifest)
    images = dict(images)
    tasks = [(i, f, trainer, images, labels, datasets) for i, f in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_fold, tasks))
    else:
        reports = []
        for task in tasks:
            reports.append(_run_fold(task))
            log.info(
                "fold %s: %d/%d correct",
                reports[-1].subject,
                int(np.trace(reports[-1].confusion)),
                len(reports[-1].sample_ids),
            )
    return LosoReport(reports, model_cfg, train_cfg)


def confusion_csv(report: dict) -> str:
    """Pooled and per-dataset confusion matrices as CSV rows."""
    classes = report["classes"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scope", "true_class"] + [f"pred_{c}" for c in classes])
    scopes = [("pooled", report["pooled"])] + list(report["per_dataset"].items())
    for scope, summary in scopes:
        for name, row in zip(classes, summary["confusion"]):
            w.writerow([scope, name] + list(row))
    return buf.getvalue()
