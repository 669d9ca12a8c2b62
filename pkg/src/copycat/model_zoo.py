"""Desk-scale CNN architectures, the SGD training engine and checkpoints.

Two preset architectures stand in for a big and a small network:

* ``LARGE``: four conv(3x3)-ReLU-maxpool(2) blocks, a hidden dense layer
  with ReLU, and the K-way output layer.
* ``SMALL``: two conv-ReLU-maxpool blocks and the output layer.

Checkpoint weight blob layout: layers in ``ModelSpec.layers`` order; for each
layer its tensors in torch layout, row-major, float32 little-endian:
``conv`` weight ``(out, in, k, k)`` then bias ``(out,)``; ``dense`` weight
``(out, in)`` then bias ``(out,)``; ``mean`` image ``(C, H, W)``. Bias
tensors are omitted for layers built with ``bias=False``.
"""

import contextlib
import hashlib
import json
import logging
import math
import struct
import threading
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import images as _images
from .errors import TrainingDivergedError, ValidationError
from .labels import SoftLabel

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CCK1"
DEFAULT_INPUT_SHAPE = (32, 32, 1)
INFERENCE_CHUNK = 1024


class Arch(str, Enum):
    LARGE = "LARGE"
    SMALL = "SMALL"
    CUSTOM = "CUSTOM"


# Layer descriptors ---------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    padding: int = 1
    bias: bool = True
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool:
    size: int = 2
    kind: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class Dense:
    out_features: int
    bias: bool = True
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class MeanSubtract:
    """Subtracts a fixed mean image; filled from the training set, never by SGD."""

    kind: str = field(default="mean", init=False)


_LAYER_TYPES = {"conv": Conv, "relu": ReLU, "maxpool": MaxPool, "dense": Dense, "mean": MeanSubtract}


def layer_to_dict(layer):
    return asdict(layer)


def layer_from_dict(d):
    d = dict(d)
    cls = _LAYER_TYPES.get(d.pop("kind", None))
    if cls is None:
        raise ValidationError(f"unknown layer descriptor {d}")
    return cls(**d)


def preset_layers(arch, num_classes, subtract_mean=False):
    arch = Arch(arch)
    head = [MeanSubtract()] if subtract_mean else []
    if arch is Arch.LARGE:
        body = []
        for c in (16, 32, 64, 64):
            body += [Conv(c), ReLU(), MaxPool(2)]
        # LARGE flattens to H*W/4 features, SMALL to H*W; a hidden width of
        # at least 4K keeps LARGE's first dense layer no smaller than SMALL's
        # only one, so LARGE is bigger for every input shape and K
        body += [Dense(max(128, 4 * num_classes)), ReLU(), Dense(num_classes)]
    elif arch is Arch.SMALL:
        body = [Conv(8), ReLU(), MaxPool(2), Conv(16), ReLU(), MaxPool(2), Dense(num_classes)]
    else:
        raise ValidationError("CUSTOM architectures need an explicit layer list")
    return tuple(head + body)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    arch: Arch
    input_shape: tuple
    num_classes: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(
            layer_from_dict(l) if isinstance(l, dict) else l for l in self.layers))
        self.validate()

    @classmethod
    def create(cls, arch, num_classes=10, input_shape=DEFAULT_INPUT_SHAPE, name=None, subtract_mean=False):
        arch = Arch(arch)
        if num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
        return cls(name or arch.value.lower(), arch, input_shape, num_classes,
                   preset_layers(arch, num_classes, subtract_mean))

    def validate(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1 or self.input_shape[2] not in (1, 3):
            raise ValidationError(f"input_shape must be (H, W, 1|3), got {self.input_shape}")
        h, w, _ = self.input_shape
        if self.arch is not Arch.CUSTOM and (h % 16 or w % 16):
            raise ValidationError("preset architectures need H and W divisible by 16")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValidationError("the final layer must be dense")
        if self.layers[-1].out_features != self.num_classes:
            raise ValidationError("the final layer must output exactly num_classes logits")
        self.shapes()

    def shapes(self):
        """Output shape after every layer; raises on an inconsistent stack."""
        h, w, c = self.input_shape
        cur = (c, h, w)
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MeanSubtract):
                if i != 0:
                    raise ValidationError("mean subtraction must be the first layer")
            elif isinstance(layer, Conv):
                if len(cur) != 3:
                    raise ValidationError("conv layer after dense layer")
                hh = cur[1] + 2 * layer.padding - layer.kernel + 1
                ww = cur[2] + 2 * layer.padding - layer.kernel + 1
                if hh < 1 or ww < 1:
                    raise ValidationError(f"layer {i}: feature map vanished")
                cur = (layer.out_channels, hh, ww)
            elif isinstance(layer, MaxPool):
                if len(cur) != 3 or cur[1] < layer.size or cur[2] < layer.size:
                    raise ValidationError(f"layer {i}: cannot pool {cur}")
                cur = (cur[0], cur[1] // layer.size, cur[2] // layer.size)
            elif isinstance(layer, Dense):
                cur = (layer.out_features,)
            elif not isinstance(layer, ReLU):
                raise ValidationError(f"unknown layer {layer!r}")
            out.append(cur)
        return out

    @property
    def has_mean(self):
        return bool(self.layers) and isinstance(self.layers[0], MeanSubtract)

    def to_dict(self):
        return {
            "name": self.name,
            "arch": self.arch.value,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["arch"], tuple(d["input_shape"]), d["num_classes"],
                   tuple(layer_from_dict(l) for l in d["layers"]))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # step-down policy: lr *= gamma every step_size iterations, or every
    # step_epochs epochs; with neither set, every 2 epochs
    step_size: Optional[int] = None
    gamma: float = 0.1
    max_epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    loss: str = "CROSS_ENTROPY"
    deterministic: bool = True
    step_epochs: Optional[int] = None

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValidationError("learning rate must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValidationError("gamma must be in (0, 1]")
        if self.step_size is not None and self.step_size < 1:
            raise ValidationError("step_size must be >= 1 iteration")
        if self.step_epochs is not None and self.step_epochs < 1:
            raise ValidationError("step_epochs must be >= 1")
        if self.step_size is not None and self.step_epochs is not None:
            raise ValidationError("give step_size or step_epochs, not both")
        if self.loss != "CROSS_ENTROPY":
            raise ValidationError(f"unsupported loss {self.loss}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d) if d is not None else None

    def replace(self, **changes):
        return replace(self, **changes)


# Torch modules -------------------------------------------------------------

class _Mean(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.register_buffer("mean", torch.zeros(shape))

    def forward(self, x):
        return x - self.mean


def build_module(spec):
    """Instantiate an ``nn.Sequential`` for ``spec`` (uninitialized weights)."""
    h, w, c = spec.input_shape
    mods = []
    cur = (c, h, w)
    for layer, out in zip(spec.layers, spec.shapes()):
        if isinstance(layer, MeanSubtract):
            mods.append(_Mean((c, h, w)))
        elif isinstance(layer, Conv):
            mods.append(nn.Conv2d(cur[0], layer.out_channels, layer.kernel, padding=layer.padding, bias=layer.bias))
        elif isinstance(layer, ReLU):
            mods.append(nn.ReLU())
        elif isinstance(layer, MaxPool):
            mods.append(nn.MaxPool2d(layer.size))
        elif isinstance(layer, Dense):
            if len(cur) == 3:
                mods.append(nn.Flatten())
            mods.append(nn.Linear(int(np.prod(cur)), layer.out_features, bias=layer.bias))
        cur = out
    return nn.Sequential(*mods)


def _tensors(module):
    """Serializable tensors in blob order."""
    out = []
    for m in module:
        if isinstance(m, _Mean):
            out.append(m.mean)
        elif isinstance(m, (nn.Conv2d, nn.Linear)):
            out.append(m.weight)
            if m.bias is not None:
                out.append(m.bias)
    return out


def _pack(module):
    parts = [t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes() for t in _tensors(module)]
    return b"".join(parts)


def _unpack_into(module, blob):
    tensors = _tensors(module)
    expected = sum(t.numel() for t in tensors) * 4
    if len(blob) != expected:
        raise ValidationError(f"weight blob has {len(blob)} bytes, spec needs {expected}")
    flat = np.frombuffer(blob, dtype="<f4")
    pos = 0
    with torch.no_grad():
        for t in tensors:
            n = t.numel()
            t.copy_(torch.from_numpy(flat[pos:pos + n].astype(np.float32).reshape(t.shape)))
            pos += n


def parameter_count(spec):
    """Number of trainable parameters (the mean image is not trainable)."""
    return sum(p.numel() for p in build_module(spec).parameters())


# Checkpoints ---------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    model_spec: ModelSpec
    parameters: bytes
    train_config: Optional[TrainConfig] = None
    epochs_completed: int = 0
    content_hash: str = ""
    _module: Optional[nn.Module] = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        digest = hashlib.sha256(self.parameters).hexdigest()
        if self.content_hash and self.content_hash != digest:
            raise ValidationError("content_hash does not match the weight blob")
        self.content_hash = digest

    def module(self):
        """Materialized torch module (cached; treat as read-only)."""
        with self._lock:
            if self._module is None:
                m = build_module(self.model_spec)
                _unpack_into(m, self.parameters)
                m.eval()
                for p in m.parameters():
                    p.requires_grad_(False)
                self._module = m
            return self._module

    def header(self):
        return {
            "model_spec": self.model_spec.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "epochs_completed": self.epochs_completed,
            "content_hash": self.content_hash,
        }


def checkpoint_from_module(spec, module, train_config=None, epochs_completed=0):
    return Checkpoint(spec, _pack(module), train_config, epochs_completed)


def save_checkpoint(ckpt, path):
    """Container: magic ``CCK1``, uint64 LE header length, JSON header, weight blob."""
    header = json.dumps(ckpt.header(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(ckpt.parameters)
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + n])
    blob = data[12 + n:]
    spec = ModelSpec.from_dict(header["model_spec"])
    ckpt = Checkpoint(spec, blob, TrainConfig.from_dict(header["train_config"]),
                      header["epochs_completed"], header["content_hash"])
    ckpt.module()  # validates blob size against the spec
    return ckpt


# Construction and training -------------------------------------------------

def _init_weights(module, generator):
    with torch.no_grad():
        for m in module:
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def build_model(spec, seed):
    """Untrained checkpoint with Kaiming-normal weights drawn from ``seed``."""
    spec.validate()
    module = build_module(spec)
    _init_weights(module, torch.Generator().manual_seed(int(seed)))
    return checkpoint_from_module(spec, module)


@contextlib.contextmanager
def _execution_mode(deterministic, workers=None):
    threads = torch.get_num_threads()
    was_det = torch.are_deterministic_algorithms_enabled()
    try:
        if deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        elif workers:
            torch.set_num_threads(int(workers))
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(was_det)


def _check_input(spec, x):
    x = np.asarray(x)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    shape = tuple(spec.input_shape)
    if x.shape == shape[:2] and shape[2] == 1:
        x = x[:, :, None]
    if x.shape != shape:
        raise ValidationError(f"image shape {x.shape} does not match input shape {shape}")
    return x.astype(np.float32)


def _check_batch(spec, xs):
    xs = np.asarray(xs)
    if xs.dtype == np.uint8:
        xs = xs.astype(np.float32) / 255.0
    expected = tuple(spec.input_shape)
    if xs.ndim == 3 and expected[2] == 1:
        xs = xs[..., None]
    if xs.ndim != 4 or xs.shape[1:] != expected:
        raise ValidationError(f"batch shape {xs.shape} does not match input shape {expected}")
    return xs.astype(np.float32)


def _nchw(xs):
    return torch.from_numpy(np.ascontiguousarray(xs.transpose(0, 3, 1, 2)))


def load_training_arrays(data, spec):
    """Images of ``data`` resized to ``spec.input_shape`` plus validated labels."""
    if len(data) == 0:
        raise ValidationError("training manifest is empty")
    labels = data.labels
    if any(y is None for y in labels):
        raise ValidationError("training manifest has unlabeled records")
    y = np.asarray(labels, dtype=np.int64)
    bad = y[(y < 0) | (y >= spec.num_classes)]
    if bad.size:
        raise ValidationError(f"labels out of range [0, {spec.num_classes}): {sorted(set(bad.tolist()))[:10]}")
    x = _images.stack_inputs(data.refs, spec.input_shape)
    return x, y


def train(ckpt, data, cfg, workers=None, arrays=None):
    """Train with SGD + momentum and a step-down learning-rate policy.

    Args:
        ckpt: starting checkpoint (fresh from ``build_model`` or trained).
        data: labeled ``DatasetManifest``.
        cfg: ``TrainConfig``. In deterministic mode training is single-threaded
            and bit-reproducible.
        workers: thread count for the non-deterministic mode.
        arrays: optional preloaded ``(x, y)`` matching ``data``.

    Returns:
        A new ``Checkpoint``; ``epochs_completed`` grows by ``cfg.max_epochs``.
    """
    spec = ckpt.model_spec
    x, y = arrays if arrays is not None else load_training_arrays(data, spec)
    if len(y) == 0:
        raise ValidationError("training manifest is empty")
    with _execution_mode(cfg.deterministic, workers):
        module = build_module(spec)
        _unpack_into(module, ckpt.parameters)
        xt = _nchw(_check_batch(spec, x))
        yt = torch.from_numpy(np.asarray(y, dtype=np.int64))
        if spec.has_mean and ckpt.epochs_completed == 0:
            with torch.no_grad():
                module[0].mean.copy_(xt.mean(dim=0))
        module.train()
        if cfg.max_epochs > 0:
            _sgd_loop(module, xt, yt, cfg)
    return Checkpoint(spec, _pack(module), cfg, ckpt.epochs_completed + cfg.max_epochs)


def batch_loss(module, xb, yb):
    """Mean cross-entropy of a batch; the objective the SGD loop minimizes."""
    return F.cross_entropy(module(xb), yb)


def _sgd_loop(module, xt, yt, cfg):
    n = len(yt)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    step_size = cfg.step_size or (cfg.step_epochs or 2) * steps_per_epoch
    opt = torch.optim.SGD(module.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=step_size, gamma=cfg.gamma)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    for epoch in range(cfg.max_epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = batch_loss(module, xt[idx], yt[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        logger.debug("epoch %d loss %.4f", epoch, total / n)


# Inference -----------------------------------------------------------------

def _forward(ckpt, xs, upto=None):
    module = ckpt.module()
    layers = module if upto is None else module[:upto]
    if len(xs) == 0:
        xs = np.zeros((1,) + tuple(ckpt.model_spec.input_shape), dtype=np.float32)
        return _forward(ckpt, xs, upto)[:0]
    out = []
    with torch.inference_mode():
        for i in range(0, len(xs), INFERENCE_CHUNK):
            out.append(layers(_nchw(xs[i:i + INFERENCE_CHUNK])).numpy())
    return np.concatenate(out)


def predict_logits_batch(ckpt, xs):
    return _forward(ckpt, _check_batch(ckpt.model_spec, xs)).astype(np.float64)


def predict_soft_batch(ckpt, xs):
    """``(N, K)`` softmax probabilities, computed in float64."""
    z = predict_logits_batch(ckpt, xs)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_soft(ckpt, image):
    return SoftLabel(predict_soft_batch(ckpt, _check_input(ckpt.model_spec, image)[None])[0])


def predict_labels(ckpt, xs):
    return np.argmax(predict_logits_batch(ckpt, xs), axis=1)


def _feature_cut(module):
    # everything before the final Linear, including the Flatten
    return len(module) - 1


def extract_features_batch(ckpt, xs):
    """Input of the final dense layer: the last post-ReLU activations."""
    xs = _check_batch(ckpt.model_spec, xs)
    return _forward(ckpt, xs, upto=_feature_cut(ckpt.module())).reshape(len(xs), -1).astype(np.float64)


def extract_features(ckpt, image):
    return extract_features_batch(ckpt, _check_input(ckpt.model_spec, image)[None])[0]
