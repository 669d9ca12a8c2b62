"""Layer-wise relevance propagation (epsilon rule) for model_zoo networks.

Relevance at a linear layer (dense or conv) with ``z_j = sum_i a_i w_ij + b_j``::

    R_i = sum_j (a_i w_ij + [i eligible] b_j / n_j) / (z_j + eps * sign(z_j)) * R_j

The contribution terms are the plain epsilon rule. The bias share is spread
evenly over the ``n_j`` eligible inputs instead of being absorbed: every
in-bounds pixel at the first layer, the active (non-zero) units deeper in.
The input map then sums to the explained logit up to terms of order
``eps / |z_j|``, also for units over an all-zero patch (image background),
whose output is pure bias. Dead units stay out of the spread, so inactive
paths carry no relevance. A hidden unit with no active input at all has
nowhere to send its share; such shares are spread uniformly over the input
pixels, since conservation has to hold even when the explained logit is
pure bias. ReLU passes relevance through; max-pool routes it entirely to
the window's winner. Propagation runs in float64.
"""

import copy
import json
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import model_zoo
from .errors import UnsupportedLayerError, ValidationError

EPSILON = 1e-6


class Agreement(str, Enum):
    BOTH_CORRECT = "BOTH_CORRECT"
    TARGET_ONLY = "TARGET_ONLY"
    COPYCAT_ONLY = "COPYCAT_ONLY"
    BOTH_WRONG = "BOTH_WRONG"


@dataclass
class Heatmap:
    values: np.ndarray
    source_checkpoint: str
    explained_class: int
    explained_score: float
    image_ref: str = None

    @property
    def total(self):
        return float(self.values.sum())


@dataclass
class HeatmapComparison:
    similarity: float
    agreement: Agreement
    target: Heatmap
    copycat: Heatmap

    def to_dict(self):
        return {"similarity": self.similarity, "agreement": self.agreement.value,
                "target_class": self.target.explained_class, "copycat_class": self.copycat.explained_class}


def _stabilize(s, eps):
    return s + eps * torch.where(s >= 0, torch.ones_like(s), -torch.ones_like(s))


def _relevance_tensor(module, x, class_index, eps):
    """Input relevance ``(C, H, W)``, explained class and logit for one image."""
    layers = [m.double() for m in copy.deepcopy(list(module))]
    acts = [x]
    pool_idx = {}
    a = x
    for i, m in enumerate(layers):
        if isinstance(m, nn.MaxPool2d):
            a, idx = F.max_pool2d(a, m.kernel_size, m.stride, return_indices=True)
            pool_idx[i] = idx
        elif isinstance(m, (nn.Conv2d, nn.Linear, nn.ReLU, nn.Flatten, model_zoo._Mean)):
            a = m(a)
        else:
            raise UnsupportedLayerError(f"no LRP rule for {type(m).__name__}")
        acts.append(a)
    logits = a[0]
    if class_index is None:
        class_index = int(torch.argmax(logits))
    if not 0 <= class_index < logits.numel():
        raise ValidationError(f"class index {class_index} outside [0, {logits.numel()})")
    score = float(logits[class_index])
    r = torch.zeros_like(a)
    r[0, class_index] = logits[class_index]
    orphaned = torch.zeros((), dtype=r.dtype)
    first_param = next(i for i, m in enumerate(layers) if isinstance(m, (nn.Linear, nn.Conv2d)))
    for i in range(len(layers) - 1, -1, -1):
        m, a_in = layers[i], acts[i]
        first = i == first_param
        if isinstance(m, nn.Linear):
            z = F.linear(a_in, m.weight, m.bias)
            q = r / _stabilize(z, eps)
            r_new = a_in * (q @ m.weight)
            if m.bias is not None:
                rb, lost = _spread_bias((q * m.bias).sum(dim=1, keepdim=True), a_in, first,
                                        lambda t: t.sum(dim=1, keepdim=True), lambda t: t.expand_as(a_in))
                r_new, orphaned = r_new + rb, orphaned + lost
            r = r_new
        elif isinstance(m, nn.Conv2d):
            z = F.conv2d(a_in, m.weight, m.bias, m.stride, m.padding)
            q = r / _stabilize(z, eps)
            pad = _output_padding(a_in, z, m)
            r_new = a_in * F.conv_transpose2d(q, m.weight, None, m.stride, m.padding, output_padding=pad)
            if m.bias is not None:
                ones = torch.ones((1, a_in.shape[1]) + m.kernel_size, dtype=z.dtype)
                rb, lost = _spread_bias(
                    (q * m.bias.view(1, -1, 1, 1)).sum(dim=1, keepdim=True), a_in, first,
                    lambda t: F.conv2d(t, ones, None, m.stride, m.padding),
                    lambda t: F.conv_transpose2d(t, ones, None, m.stride, m.padding, output_padding=pad))
                r_new, orphaned = r_new + rb, orphaned + lost
            r = r_new
        elif isinstance(m, nn.MaxPool2d):
            r = F.max_unpool2d(r, pool_idx[i], m.kernel_size, m.stride, output_size=a_in.shape[-2:])
        elif isinstance(m, nn.Flatten):
            r = r.reshape(a_in.shape)
        # ReLU and mean subtraction pass relevance through unchanged
    r = r + orphaned / r[0].numel()
    return r[0], class_index, score


def _spread_bias(share, a_in, first, count, spread):
    """Input relevance from per-position bias shares, plus the orphaned total.

    ``count`` maps an input-shaped mask to per-position input counts and
    ``spread`` sends per-position values back over each receptive field.
    Shares of units without a single eligible input are returned summed.
    """
    eligible = torch.ones_like(a_in) if first else (a_in != 0).to(a_in.dtype)
    n = count(eligible)
    placed = torch.where(n > 0, share / n.clamp(min=1), torch.zeros_like(share))
    orphaned = torch.where(n > 0, torch.zeros_like(share), share).sum()
    return eligible * spread(placed), orphaned


def _output_padding(a_in, z, m):
    h = (z.shape[-2] - 1) * m.stride[0] - 2 * m.padding[0] + m.kernel_size[0]
    w = (z.shape[-1] - 1) * m.stride[1] - 2 * m.padding[1] + m.kernel_size[1]
    return (a_in.shape[-2] - h, a_in.shape[-1] - w)


def relevance(ckpt, image, class_index=None, eps=EPSILON, image_ref=None):
    """Per-pixel relevance map (channels summed) for one image."""
    x = model_zoo._check_input(ckpt.model_spec, image)
    xt = torch.from_numpy(x.transpose(2, 0, 1)[None].astype(np.float64))
    with torch.no_grad():
        r, k, score = _relevance_tensor(ckpt.module(), xt, class_index, eps)
    values = r.sum(dim=0).numpy()
    if not np.all(np.isfinite(values)):
        raise ValidationError("relevance map is not finite")
    return Heatmap(values, ckpt.content_hash, k, score, image_ref)


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def compare(target_ckpt, copycat_ckpt, image, truth):
    """Heatmaps of both models for their own predicted class, and their cosine."""
    if target_ckpt.model_spec.input_shape != copycat_ckpt.model_spec.input_shape:
        raise ValidationError("models disagree on input shape")
    if target_ckpt.model_spec.num_classes != copycat_ckpt.model_spec.num_classes:
        raise ValidationError("models disagree on the number of classes")
    ht = relevance(target_ckpt, image)
    hc = relevance(copycat_ckpt, image)
    t_ok, c_ok = ht.explained_class == truth, hc.explained_class == truth
    agreement = {(True, True): Agreement.BOTH_CORRECT, (True, False): Agreement.TARGET_ONLY,
                 (False, True): Agreement.COPYCAT_ONLY, (False, False): Agreement.BOTH_WRONG}[(t_ok, c_ok)]
    sim = cosine_similarity(ht.values, hc.values)
    return HeatmapComparison(sim, agreement, ht, hc)


def export_heatmap(heatmap, path_stem):
    """Write ``<stem>.f32`` (raw little-endian float32, row-major) and ``<stem>.json``."""
    os.makedirs(os.path.dirname(os.path.abspath(path_stem)), exist_ok=True)
    v = np.ascontiguousarray(heatmap.values, dtype="<f4")
    with open(path_stem + ".f32", "wb") as f:
        f.write(v.tobytes())
    meta = {"shape": list(v.shape), "dtype": "float32", "byte_order": "little", "layout": "row-major",
            "source_checkpoint": heatmap.source_checkpoint, "image_ref": heatmap.image_ref,
            "explained_class": heatmap.explained_class, "explained_score": heatmap.explained_score}
    with open(path_stem + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path_stem + ".f32"


def read_heatmap(path_stem):
    with open(path_stem + ".json") as f:
        meta = json.load(f)
    v = np.fromfile(path_stem + ".f32", dtype="<f4").reshape(meta["shape"])
    return v, meta
