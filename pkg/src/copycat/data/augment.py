"""Image augmentation for problem-domain sets.

Each operation takes a float image ``(H, W, C)`` in [0, 1] and a numpy
``Generator`` and returns an image of the same shape. Magnitudes are drawn
from fixed default ranges; a descriptor may override them.
"""

import numpy as np
from scipy import ndimage
from skimage import transform as sktf

from ..errors import ValidationError
from . import images
from .manifest import Record


def _affine(img, matrix):
    h, w = img.shape[:2]
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    to_c = sktf.AffineTransform(translation=-center)
    back = sktf.AffineTransform(translation=center)
    tf = sktf.AffineTransform(matrix=back.params @ matrix @ to_c.params)
    return sktf.warp(img, tf.inverse, order=1, mode="constant", cval=0.0, preserve_range=True)


def add_intensity(img, rng, max_delta=0.1):
    return img + rng.uniform(-max_delta, max_delta)


def contrast_normalization(img, rng, low=0.75, high=1.25):
    m = img.mean()
    return (img - m) * rng.uniform(low, high) + m


def crop(img, rng, max_fraction=0.1):
    h, w = img.shape[:2]
    t, b = (int(rng.integers(0, int(max_fraction * h) + 1)) for _ in range(2))
    l, r = (int(rng.integers(0, int(max_fraction * w) + 1)) for _ in range(2))
    cut = img[t:h - b, l:w - r]
    return sktf.resize(cut, img.shape, order=1, mode="edge", anti_aliasing=False)


def horizontal_flip(img, rng=None):
    return img[:, ::-1]


def gaussian_blur(img, rng, max_sigma=1.5):
    s = rng.uniform(0.0, max_sigma)
    return ndimage.gaussian_filter(img, sigma=(s, s, 0))


def gaussian_noise(img, rng, max_sigma=0.05):
    return img + rng.normal(0.0, rng.uniform(0.0, max_sigma), size=img.shape)


def piecewise_affine(img, rng, grid=4, max_jitter=0.03):
    h, w = img.shape[:2]
    rows, cols = np.meshgrid(np.linspace(0, h - 1, grid), np.linspace(0, w - 1, grid), indexing="ij")
    src = np.stack([cols.ravel(), rows.ravel()], axis=1)
    dst = src + rng.uniform(-max_jitter, max_jitter, size=src.shape) * np.array([w, h])
    tf = sktf.PiecewiseAffineTransform()
    tf.estimate(src, dst)
    return sktf.warp(img, tf.inverse, order=1, mode="constant", cval=0.0, preserve_range=True)


def rotate(img, rng, max_degrees=15.0):
    a = np.deg2rad(rng.uniform(-max_degrees, max_degrees))
    return _affine(img, sktf.AffineTransform(rotation=a).params)


def scale(img, rng, low=0.9, high=1.1):
    return _affine(img, sktf.AffineTransform(scale=rng.uniform(low, high)).params)


def sharpen(img, rng, max_alpha=0.5):
    blurred = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0))
    return img + rng.uniform(0.0, max_alpha) * (img - blurred)


def shear(img, rng, max_degrees=8.0):
    return _affine(img, sktf.AffineTransform(shear=np.deg2rad(rng.uniform(-max_degrees, max_degrees))).params)


def translate(img, rng, max_fraction=0.1):
    h, w = img.shape[:2]
    t = rng.uniform(-max_fraction, max_fraction, size=2) * np.array([w, h])
    return _affine(img, sktf.AffineTransform(translation=t).params)


AUGMENTATIONS = {
    "add_intensity": add_intensity,
    "contrast_normalization": contrast_normalization,
    "crop": crop,
    "horizontal_flip": horizontal_flip,
    "gaussian_blur": gaussian_blur,
    "gaussian_noise": gaussian_noise,
    "piecewise_affine": piecewise_affine,
    "rotate": rotate,
    "scale": scale,
    "sharpen": sharpen,
    "shear": shear,
    "translate": translate,
}


def _parse_op(op):
    if isinstance(op, str):
        op = {"name": op}
    op = dict(op)
    name = op.pop("name", None)
    if name not in AUGMENTATIONS:
        raise ValidationError(f"unknown augmentation {name!r}; choose from {sorted(AUGMENTATIONS)}")
    p = float(op.pop("p", 1.0))
    return AUGMENTATIONS[name], p, op


def apply_ops(array, ops, rng):
    """Run parsed ops in order on a uint8 image; returns uint8."""
    img = images.canonical(array).astype(np.float64) / 255.0
    for fn, p, params in ops:
        if p >= 1.0 or rng.random() < p:
            img = fn(img, rng, **params)
    return images.canonical(np.clip(img, 0.0, 1.0))


def augment(manifest, ops, multiplier, seed):
    """Keep every source record and add ``multiplier - 1`` augmented variants of it.

    ``ops`` entries are op names or dicts ``{"name": ..., "p": prob, **params}``.
    Variant ``j`` of record ``i`` uses a generator seeded by ``(seed, i, j)``.
    """
    if multiplier < 1:
        raise ValidationError("multiplier must be >= 1")
    parsed = [_parse_op(op) for op in ops]
    out = []
    for i, r in enumerate(manifest.records):
        out.append(r)
        if multiplier == 1:
            continue
        src = images.load_image(r.ref)
        for j in range(1, multiplier):
            rng = np.random.default_rng([int(seed), i, j])
            out.append(Record(images.put_image(apply_ops(src, parsed, rng)), r.label))
    return manifest.replace(records=out)
