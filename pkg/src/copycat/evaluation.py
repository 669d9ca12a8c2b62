"""Macro accuracy, copy performance, label-distribution statistics, robustness."""

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model_zoo
from .data import images as _images
from .errors import UndefinedClassError, ValidationError


def _as_labels(values, k, what):
    a = np.asarray(values, dtype=np.int64)
    if a.ndim != 1:
        raise ValidationError(f"{what} must be a flat list of class indices")
    if a.size and (a.min() < 0 or a.max() >= k):
        raise ValidationError(f"{what} contain values outside [0, {k})")
    return a


def confusion_matrix(predictions, truths, num_classes):
    """Counts with rows = true class, columns = predicted class."""
    p = _as_labels(predictions, num_classes, "predictions")
    t = _as_labels(truths, num_classes, "truths")
    if p.shape != t.shape:
        raise ValidationError("predictions and truths differ in length")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def per_class_accuracy(predictions, truths, num_classes):
    m = confusion_matrix(predictions, truths, num_classes)
    support = m.sum(axis=1)
    absent = np.nonzero(support == 0)[0]
    if absent.size:
        raise UndefinedClassError(f"classes {absent.tolist()} have no test samples; macro accuracy is undefined")
    return np.diag(m) / support


def macro_accuracy(predictions, truths, num_classes):
    """Mean per-class recall; every class must occur in ``truths``."""
    if len(truths) == 0:
        raise ValidationError("macro accuracy needs at least one sample")
    return float(np.mean(per_class_accuracy(predictions, truths, num_classes)))


def copy_performance(copycat_acc, reference_acc):
    """Copycat accuracy as a percentage of a reference accuracy (may exceed 100)."""
    if reference_acc == 0:
        raise ZeroDivisionError("reference accuracy is zero")
    if reference_acc < 0 or copycat_acc < 0:
        raise ValidationError("accuracies must be non-negative")
    return copycat_acc / reference_acc * 100.0


def label_distribution_stats(labels, num_classes):
    """Per-class counts, entropy normalized by log K, and class coverage."""
    a = _as_labels(labels, num_classes, "labels")
    if a.size == 0:
        raise ValidationError("label distribution of an empty list")
    counts = np.bincount(a, minlength=num_classes)
    p = counts[counts > 0] / a.size
    entropy = float(-(p * np.log(p)).sum() / math.log(num_classes))
    entropy = min(1.0, max(0.0, entropy))
    coverage = float((counts > 0).sum() / num_classes)
    return counts.tolist(), entropy, coverage


@dataclass
class CopyReport:
    target_accuracy: float
    copycat_accuracy: float
    perf_over_target: float
    per_class_accuracy: list
    confusion: list
    label_distribution: dict
    normalized_entropy: float
    baseline_accuracy: Optional[float] = None
    perf_over_baseline: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "target_accuracy": self.target_accuracy,
            "baseline_accuracy": self.baseline_accuracy,
            "copycat_accuracy": self.copycat_accuracy,
            "perf_over_target": self.perf_over_target,
            "perf_over_baseline": self.perf_over_baseline,
            "per_class_accuracy": list(self.per_class_accuracy),
            "confusion": [list(r) for r in self.confusion],
            "label_distribution": {str(k): v for k, v in self.label_distribution.items()},
            "normalized_entropy": self.normalized_entropy,
            **self.extra,
        }

    def save(self, path, confusion_csv=None):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        if confusion_csv:
            with open(confusion_csv, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["true\\pred"] + list(range(len(self.confusion))))
                for i, row in enumerate(self.confusion):
                    w.writerow([i] + list(row))


def predictions_on(ckpt, manifest):
    """``(predictions, truths)`` of a checkpoint on a labeled manifest."""
    if len(manifest) == 0:
        raise ValidationError("evaluation manifest is empty")
    xs = _images.stack_inputs(manifest.refs, ckpt.model_spec.input_shape)
    return model_zoo.predict_labels(ckpt, xs), np.asarray(manifest.labels, dtype=np.int64)


def accuracy_on(ckpt, manifest):
    preds, truths = predictions_on(ckpt, manifest)
    return macro_accuracy(preds, truths, ckpt.model_spec.num_classes)


def evaluate(ckpt, test_set, target_accuracy, baseline_accuracy=None, label_sample=None):
    """Build a CopyReport for ``ckpt`` on ``test_set``.

    ``label_sample`` is the label stream the copycat was trained from
    (typically its stolen labels); without it the distribution statistics
    describe the copycat's own test-set predictions.
    """
    k = ckpt.model_spec.num_classes
    preds, truths = predictions_on(ckpt, test_set)
    acc_per_class = per_class_accuracy(preds, truths, k)
    acc = float(acc_per_class.mean())
    counts, entropy, coverage = label_distribution_stats(preds if label_sample is None else label_sample, k)
    return CopyReport(
        target_accuracy=float(target_accuracy),
        copycat_accuracy=acc,
        perf_over_target=copy_performance(acc, target_accuracy),
        per_class_accuracy=acc_per_class.tolist(),
        confusion=confusion_matrix(preds, truths, k).tolist(),
        label_distribution={i: c for i, c in enumerate(counts)},
        normalized_entropy=entropy,
        baseline_accuracy=None if baseline_accuracy is None else float(baseline_accuracy),
        perf_over_baseline=None if baseline_accuracy is None else copy_performance(acc, baseline_accuracy),
        extra={"label_coverage": coverage, "num_test_samples": int(len(truths))},
    )


@dataclass
class RobustnessSummary:
    runs: list
    mean: float
    std: float

    def to_dict(self):
        return {"runs": [{"seed": s, "perf_over_target": p} for s, p in self.runs],
                "mean": self.mean, "std": self.std}


def robustness(seeds, runner):
    """Repeat an attack over seeds; ``runner(seed)`` returns a CopyReport or a percentage."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValidationError("robustness needs at least two seeds")
    runs = []
    for s in seeds:
        out = runner(s)
        perf = out.perf_over_target if isinstance(out, CopyReport) else float(out)
        runs.append((s, perf))
    perfs = [p for _, p in runs]
    return RobustnessSummary(runs, statistics.fmean(perfs), statistics.stdev(perfs))
