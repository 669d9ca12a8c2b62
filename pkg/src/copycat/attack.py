"""End-to-end copy attack: steal hard labels, balance them, train a copycat.

Nothing in this module reads an ODD manifest or a probability vector: the
oracle is reached only through ``OracleHandle.query_many`` and surrogate
pools are used for their image references only.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import evaluation, model_zoo
from .data import images as _images
from .data.manifest import DatasetManifest, LabelSource, Split, StolenLabelRecord, save_stolen
from .data.pipeline import balance
from .errors import BudgetExceededError, ValidationError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

STEAL_CHUNK = 2048
DESK_CURVE_SIZES = (1_000, 5_000, 20_000, 60_000)
FULL_CURVE_SIZES = (100_000, 500_000, 1_000_000, 1_500_000, 3_000_000)


def _reject_odd(manifest, what):
    if manifest.split is Split.ODD:
        raise ValidationError(f"{what}: the attack never touches the original-domain dataset")


def default_finetune_config(cfg):
    return cfg.replace(lr=cfg.lr * 0.1, max_epochs=2)


def steal_labels(oracle, pool, count, seed=0):
    """Query ``count`` pool images (seeded order, no replacement) for hard labels."""
    _reject_odd(pool, "steal_labels")
    if count < 0:
        raise ValidationError("count must be >= 0")
    if count > len(pool):
        raise ValidationError(f"pool has {len(pool)} images, {count} requested")
    remaining = oracle.budget.remaining
    if remaining is not None and count > remaining:
        raise BudgetExceededError(f"{count} queries requested, {remaining} left in budget")
    if count == 0:
        return []
    order = np.random.default_rng(seed).permutation(len(pool))[:count]
    refs = pool.refs
    out = []
    for start in range(0, count, STEAL_CHUNK):
        chunk = [refs[i] for i in order[start:start + STEAL_CHUNK]]
        labels = oracle.query_many(_images.load_images(chunk))
        out.extend(StolenLabelRecord(ref, h.class_index, start + j, oracle.oracle_id)
                   for j, (ref, h) in enumerate(zip(chunk, labels)))
    return out


def build_fake_dataset(stolen, num_classes, target_per_class=None, seed=0):
    """Balanced NPDD-SL manifest plus its BalanceReport."""
    return balance(stolen, num_classes, target_per_class, seed)


def _check_sl(manifest, spec, what):
    if manifest.label_source is not LabelSource.SL:
        raise ValidationError(f"{what} needs stolen labels (label_source SL)")
    if manifest.num_classes is not None and manifest.num_classes != spec.num_classes:
        raise ValidationError(
            f"class-space mismatch: data has {manifest.num_classes} classes, model {spec.num_classes}")


def train_copycat(fake, spec, cfg, init_seed=None, workers=None):
    """Train a fresh copycat on stolen labels; no mean-image subtraction."""
    _reject_odd(fake, "train_copycat")
    _check_sl(fake, spec, "train_copycat")
    if spec.has_mean:
        raise ValidationError("copycats are trained without a mean image")
    ckpt = model_zoo.build_model(spec, cfg.seed if init_seed is None else init_seed)
    return model_zoo.train(ckpt, fake, cfg, workers=workers)


def finetune(ckpt, pdd_sl, cfg, workers=None):
    """Continue training a copycat on problem-domain images with stolen labels."""
    _reject_odd(pdd_sl, "finetune")
    _check_sl(pdd_sl, ckpt.model_spec, "finetune")
    if pdd_sl.num_classes is None:
        raise ValidationError("finetune data must declare num_classes")
    return model_zoo.train(ckpt, pdd_sl, cfg, workers=workers)


@dataclass
class AttackPlan:
    oracle: object
    surrogate_pool: DatasetManifest
    query_sizes: list
    copycat_spec: model_zoo.ModelSpec
    train_config: model_zoo.TrainConfig
    test_set: DatasetManifest
    target_accuracy: float
    seed: int = 0
    pdd_pool: Optional[DatasetManifest] = None
    finetune_config: Optional[model_zoo.TrainConfig] = None
    target_per_class: Optional[int] = None
    baseline_accuracy: Optional[float] = None

    def validate(self):
        sizes = list(self.query_sizes)
        if not sizes or any(s <= 0 for s in sizes) or sizes != sorted(set(sizes)):
            raise ValidationError("query_sizes must be strictly ascending positive integers")
        if sizes[-1] > len(self.surrogate_pool):
            raise ValidationError(f"largest query size {sizes[-1]} exceeds pool of {len(self.surrogate_pool)}")
        if self.copycat_spec.num_classes != self.oracle.num_classes:
            raise ValidationError("copycat and oracle class counts differ")
        if self.surrogate_pool.label_source is not LabelSource.NONE:
            raise ValidationError("surrogate pool must be unlabeled (label_source NONE)")
        _reject_odd(self.surrogate_pool, "AttackPlan")
        if self.pdd_pool is not None:
            _reject_odd(self.pdd_pool, "AttackPlan")
        if self.test_set.split is not Split.TDD:
            raise ValidationError("copycats are evaluated on the TDD split")

    def to_dict(self):
        return {
            "oracle": self.oracle.status(),
            "surrogate_pool_size": len(self.surrogate_pool),
            "pdd_pool_size": None if self.pdd_pool is None else len(self.pdd_pool),
            "query_sizes": list(self.query_sizes),
            "copycat_spec": self.copycat_spec.to_dict(),
            "train_config": self.train_config.to_dict(),
            "finetune_config": self.finetune_config.to_dict() if self.finetune_config else None,
            "target_per_class": self.target_per_class,
            "target_accuracy": self.target_accuracy,
            "baseline_accuracy": self.baseline_accuracy,
            "seed": self.seed,
        }


@dataclass
class AttackRun:
    plan: AttackPlan
    stolen: list = field(default_factory=list)
    pdd_stolen: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    balance_reports: dict = field(default_factory=dict)

    def curve(self, finetuned=False):
        """``[(size, macro accuracy)]`` in ascending size order."""
        out = []
        for key, rep in self.reports.items():
            size, tuned = key
            if tuned == finetuned or (finetuned and size == 0):
                out.append((size, rep.copycat_accuracy))
        return sorted(out)


def label_pdd(oracle, pdd_pool, seed=0):
    """Stolen labels for every PDD image (billed like any other query)."""
    return steal_labels(oracle, pdd_pool.unlabeled(split=Split.PDD), len(pdd_pool), seed)


def run_data_curve(plan, workers=None):
    """Copy performance as a function of the number of stolen labels.

    One steal of ``max(query_sizes)`` labels is made; curve point ``s`` trains
    on its first ``s`` records. Point 0 is the untrained copycat.
    """
    plan.validate()
    k = plan.copycat_spec.num_classes
    run = AttackRun(plan)
    run.stolen = steal_labels(plan.oracle, plan.surrogate_pool, max(plan.query_sizes),
                              derive_seed(plan.seed, "steal"))
    pdd_sl = None
    ft_cfg = None
    if plan.pdd_pool is not None:
        run.pdd_stolen = label_pdd(plan.oracle, plan.pdd_pool, derive_seed(plan.seed, "steal-pdd"))
        pdd_sl, rep = balance(run.pdd_stolen, k, None, derive_seed(plan.seed, "balance-pdd"))
        pdd_sl = pdd_sl.replace(split=Split.PDD)
        run.balance_reports["pdd"] = rep
        ft_cfg = plan.finetune_config or default_finetune_config(plan.train_config)

    def record(size, tuned, ckpt, labels):
        run.checkpoints[(size, tuned)] = ckpt
        run.reports[(size, tuned)] = evaluation.evaluate(
            ckpt, plan.test_set, plan.target_accuracy, plan.baseline_accuracy, labels)
        logger.info("curve point %d%s: macro accuracy %.4f", size, " (finetuned)" if tuned else "",
                    run.reports[(size, tuned)].copycat_accuracy)

    init_seed = derive_seed(plan.seed, "init")
    record(0, False, model_zoo.build_model(plan.copycat_spec, init_seed), None)
    for size in plan.query_sizes:
        subset = run.stolen[:size]
        fake, rep = build_fake_dataset(subset, k, plan.target_per_class, derive_seed(plan.seed, "balance", size))
        run.balance_reports[size] = rep
        cfg = plan.train_config.replace(seed=derive_seed(plan.seed, "train", size))
        ckpt = train_copycat(fake, plan.copycat_spec, cfg, init_seed=init_seed, workers=workers)
        record(size, False, ckpt, [r.hard_label for r in subset])
        if pdd_sl is not None:
            tuned = finetune(ckpt, pdd_sl, ft_cfg.replace(seed=derive_seed(plan.seed, "finetune", size)),
                             workers=workers)
            record(size, True, tuned, [r.hard_label for r in subset])
    return run


def _key_name(key):
    size, tuned = key
    return f"{size}.finetuned" if tuned else str(size)


def save_run(run, directory):
    """Persist an AttackRun: plan, stolen labels, balance reports, checkpoints, reports."""
    os.makedirs(os.path.join(directory, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(directory, "reports"), exist_ok=True)
    with open(os.path.join(directory, "plan.json"), "w") as f:
        json.dump(run.plan.to_dict(), f, indent=2, sort_keys=True)
    save_stolen(run.stolen, os.path.join(directory, "stolen_labels.jsonl"))
    if run.pdd_stolen:
        save_stolen(run.pdd_stolen, os.path.join(directory, "pdd_stolen_labels.jsonl"))
    with open(os.path.join(directory, "balance_report.json"), "w") as f:
        json.dump({str(k): v.to_dict() for k, v in run.balance_reports.items()}, f, indent=2, sort_keys=True)
    for key, ckpt in run.checkpoints.items():
        model_zoo.save_checkpoint(ckpt, os.path.join(directory, "checkpoints", _key_name(key) + ".ckpt"))
    for key, rep in run.reports.items():
        rep.save(os.path.join(directory, "reports", _key_name(key) + ".json"))
    return directory
