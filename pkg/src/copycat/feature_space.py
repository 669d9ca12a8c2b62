"""Where stolen-label surrogate images land in the target's feature space.

ODD samples and NPDD-SL samples are pushed through the target up to its
penultimate (post-ReLU) activations. Each set is standardized with its own
statistics. For every ODD point, the nearest not-yet-taken NPDD points of
the same class are then collected for a 2-D projection.
"""

import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import model_zoo
from .data import images as _images
from .errors import PoolExhaustedError, ValidationError

STD_FLOOR = 1e-8


class Origin(str, Enum):
    ODD_OL = "ODD_OL"
    NPDD_SL = "NPDD_SL"


@dataclass
class FeatureSet:
    origin: Origin
    refs: list
    labels: np.ndarray
    vectors: np.ndarray  # standardized
    mean: np.ndarray
    std: np.ndarray

    def __len__(self):
        return len(self.refs)


@dataclass
class NeighborSelection:
    odd_indices: list
    neighbors: dict = field(default_factory=dict)  # odd index -> [npdd indices]
    order: list = field(default_factory=list)

    @property
    def npdd_indices(self):
        return [j for i in self.order for j in self.neighbors.get(i, [])]


def standardize(origin, refs, labels, raw):
    """Standardize ``raw`` by its own per-dimension mean and (floored) std."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or len(raw) != len(refs):
        raise ValidationError("feature matrix must be (N, D) with one row per ref")
    mean = raw.mean(axis=0) if len(raw) else np.zeros(raw.shape[1])
    spread = raw.std(axis=0) if len(raw) else np.ones(raw.shape[1])
    std = np.maximum(spread, STD_FLOOR)
    # (near-)constant dimensions carry only rounding noise; dividing it by the floor would amplify it
    vectors = np.where(spread > STD_FLOOR, (raw - mean) / std, 0.0)
    return FeatureSet(Origin(origin), list(refs), np.asarray(labels, dtype=np.int64), vectors, mean, std)


def featurize(ckpt, origin, refs, labels):
    xs = _images.stack_inputs(refs, ckpt.model_spec.input_shape)
    return standardize(origin, refs, labels, model_zoo.extract_features_batch(ckpt, xs))


def sample_odd(odd, per_class, seed=0):
    """Indices of exactly ``per_class`` random samples of every class."""
    if per_class < 0:
        raise ValidationError("per_class must be >= 0")
    labels = np.asarray(odd.labels)
    k = odd.num_classes if odd.num_classes is not None else int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    out = []
    for c in range(k):
        idx = np.nonzero(labels == c)[0]
        if len(idx) < per_class:
            raise ValidationError(f"class {c} has {len(idx)} samples, {per_class} requested")
        out.extend(sorted(rng.choice(idx, size=per_class, replace=False).tolist()))
    return out


def sample_pool(n_total, pool_size, seed=0):
    """Seeded random subset of NPDD-SL indices used as the neighbor pool."""
    if pool_size >= n_total:
        return list(range(n_total))
    return sorted(np.random.default_rng(seed).choice(n_total, size=pool_size, replace=False).tolist())


def select_neighbors(odd_feats, npdd_feats, k_neighbors, seed=0):
    """Greedy same-class nearest neighbors with a global exclusion set.

    ODD points are visited in a seeded random order. Each takes its
    ``k_neighbors`` closest (Euclidean) same-class NPDD points that no earlier
    point has taken.
    """
    if k_neighbors < 0:
        raise ValidationError("k_neighbors must be >= 0")
    n = len(odd_feats)
    order = np.random.default_rng(seed).permutation(n).tolist()
    sel = NeighborSelection(odd_indices=list(range(n)), order=order)
    if k_neighbors == 0:
        return sel
    taken = np.zeros(len(npdd_feats), dtype=bool)
    by_class = {}
    for c in np.unique(npdd_feats.labels):
        by_class[int(c)] = np.nonzero(npdd_feats.labels == c)[0]
    for i in order:
        c = int(odd_feats.labels[i])
        cand = by_class.get(c, np.zeros(0, dtype=np.int64))
        cand = cand[~taken[cand]]
        if len(cand) < k_neighbors:
            raise PoolExhaustedError(c, f"class {c}: {len(cand)} unselected NPDD points left, {k_neighbors} needed")
        d = np.linalg.norm(npdd_feats.vectors[cand] - odd_feats.vectors[i], axis=1)
        pick = cand[np.argsort(d, kind="stable")[:k_neighbors]]
        taken[pick] = True
        sel.neighbors[i] = pick.tolist()
    return sel


def export_points(odd_feats, npdd_feats, selection, out_path, metadata=None):
    """JSONL rows ``{origin, class, vector}``: ODD points, then their neighbors.

    A ``<out_path>.meta.json`` sidecar records counts, the visiting order and
    any extra ``metadata`` (seed, pool size, checkpoint hash).
    """
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    rows = 0
    with open(out_path, "w") as f:
        for i in selection.odd_indices:
            f.write(json.dumps({"origin": Origin.ODD_OL.value, "class": int(odd_feats.labels[i]),
                                "vector": odd_feats.vectors[i].tolist()}) + "\n")
            rows += 1
        for j in selection.npdd_indices:
            f.write(json.dumps({"origin": Origin.NPDD_SL.value, "class": int(npdd_feats.labels[j]),
                                "vector": npdd_feats.vectors[j].tolist()}) + "\n")
            rows += 1
    meta = {"rows": rows, "odd_rows": len(selection.odd_indices), "npdd_rows": len(selection.npdd_indices),
            "order": [int(i) for i in selection.order],
            "dimension": int(odd_feats.vectors.shape[1]) if odd_feats.vectors.ndim == 2 else None,
            "columns": ["origin", "class", "vector"]}
    meta.update(metadata or {})
    with open(out_path + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return rows


def read_points(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                out.append((row["origin"], row["class"], np.asarray(row["vector"], dtype=np.float64)))
    return out


def pca_2d(vectors):
    """Project rows onto their top-2 principal components."""
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, 2))
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    proj = x @ comps.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj
