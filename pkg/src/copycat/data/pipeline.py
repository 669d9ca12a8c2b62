"""Dataset-level operations: dedup, random-pixel pools, balancing, splits."""

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ImageReadError, MissingClassError, StratificationError, ValidationError
from . import images
from .manifest import DatasetManifest, LabelSource, Record, Split


def dedup(pool):
    """Drop records whose decoded pixels duplicate an earlier record."""
    seen = set()
    keep, bad = [], []
    for r in pool.records:
        try:
            d = images.digest(images.load_image(r.ref))
        except ImageReadError:
            bad.append(r.ref)
            continue
        if d not in seen:
            seen.add(d)
            keep.append(r)
    if bad:
        raise ImageReadError(bad)
    return pool.replace(records=keep)


def generate_random_pixels(count, shape, seed):
    """``count`` images of i.i.d. uniform integer pixels in [0, 255]."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    shape = tuple(shape)
    if len(shape) == 2:
        shape = shape + (1,)
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(count,) + shape, dtype=np.uint8)
    refs = [images.put_image(p) for p in pixels]
    return DatasetManifest(Split.NPDD, LabelSource.NONE, [Record(r) for r in refs])


@dataclass
class BalanceReport:
    per_class_before: dict
    per_class_after: dict
    target_per_class: int
    replicated: int
    eliminated: int

    def to_dict(self):
        d = asdict(self)
        d["per_class_before"] = {str(k): v for k, v in self.per_class_before.items()}
        d["per_class_after"] = {str(k): v for k, v in self.per_class_after.items()}
        return d


def balance(records, num_classes, target_per_class=None, seed=0):
    """Equalize per-class counts of stolen-label records.

    Classes above the target lose randomly chosen records; classes below it
    repeat their own records (whole passes first, then a random remainder).
    ``target_per_class`` defaults to the median per-class count.

    Returns:
        ``(manifest, report)``: an ``NPDD``/``SL`` manifest and a ``BalanceReport``.
    """
    groups = {k: [] for k in range(num_classes)}
    for r in records:
        if not 0 <= r.hard_label < num_classes:
            raise ValidationError(f"label {r.hard_label} outside [0, {num_classes})")
        groups[r.hard_label].append(r)
    missing = [k for k, g in groups.items() if not g]
    if missing:
        raise MissingClassError(missing)
    before = {k: len(g) for k, g in groups.items()}
    if target_per_class is None:
        target_per_class = max(1, int(np.median(list(before.values()))))
    if target_per_class < 1:
        raise ValidationError("target_per_class must be >= 1")

    rng = np.random.default_rng(seed)
    out = []
    replicated = eliminated = 0
    for k in range(num_classes):
        g = groups[k]
        n = len(g)
        if n >= target_per_class:
            idx = np.sort(rng.choice(n, size=target_per_class, replace=False))
            eliminated += n - target_per_class
        else:
            extra = target_per_class - n
            idx = np.concatenate([np.tile(np.arange(n), 1 + extra // n),
                                  np.sort(rng.choice(n, size=extra % n, replace=False))])
            replicated += extra
        out.extend(Record(g[i].image_ref, k) for i in idx)
    after = {k: target_per_class for k in range(num_classes)}
    manifest = DatasetManifest(Split.NPDD, LabelSource.SL, out, num_classes)
    return manifest, BalanceReport(before, after, target_per_class, replicated, eliminated)


def _allocate(class_sizes, fractions):
    """Integer (class x split) counts whose column sums hit round(f * N)."""
    sizes = np.asarray(class_sizes, dtype=np.int64)
    f = np.asarray(fractions, dtype=np.float64)
    total = int(sizes.sum())
    ideal = np.outer(sizes, f)
    alloc = np.floor(ideal).astype(np.int64)
    targets = np.floor(f * total).astype(np.int64)
    # largest-remainder rounding of the split totals
    short = int(round(f.sum() * total)) - int(targets.sum())
    for s in np.argsort(-(f * total - targets), kind="stable")[:max(short, 0)]:
        targets[s] += 1
    for s in np.argsort(-(f * total - np.floor(f * total)), kind="stable"):
        need = targets[s] - alloc[:, s].sum()
        order = np.argsort(-(ideal[:, s] - alloc[:, s]), kind="stable")
        while need > 0:
            progressed = False
            for c in order:
                if need == 0:
                    break
                if alloc[c].sum() < sizes[c]:
                    alloc[c, s] += 1
                    need -= 1
                    progressed = True
            if not progressed:
                break
    return alloc


def split_problem(full, fractions=(0.6, 0.2, 0.2), seed=0):
    """Stratified, disjoint ``(ODD, PDD, TDD)`` split of a labeled corpus."""
    fractions = tuple(float(x) for x in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or sum(fractions) > 1 + 1e-12:
        raise ValidationError("fractions must be three positive numbers summing to <= 1")
    labels = full.labels
    if any(y is None for y in labels):
        raise ValidationError("split_problem needs a labeled corpus")
    classes = sorted(set(labels))
    by_class = {c: [i for i, y in enumerate(labels) if y == c] for c in classes}
    alloc = _allocate([len(by_class[c]) for c in classes], fractions)
    empty = [c for c, row in zip(classes, alloc) if row.min() == 0]
    if empty:
        raise StratificationError(f"classes {empty} are too small to appear in every split")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for c, row in zip(classes, alloc):
        idx = rng.permutation(by_class[c])
        pos = 0
        for s in range(3):
            parts[s].extend(idx[pos:pos + row[s]].tolist())
            pos += row[s]
    out = []
    for split, part in zip((Split.ODD, Split.PDD, Split.TDD), parts):
        recs = [full.records[i] for i in sorted(part)]
        out.append(DatasetManifest(split, LabelSource.OL, recs, full.num_classes))
    return tuple(out)
