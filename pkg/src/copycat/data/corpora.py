"""Desk-scale corpora.

* ``digits_corpus``: the 1,797 handwritten digits bundled with scikit-learn
  (10 classes), the problem domain.
* ``letters_corpus``: Latin letters rendered from the fonts bundled with
  matplotlib, a disjoint domain whose labels are discarded before use.

Both pass through the same "sensor" as the scikit-learn digits were made
with: a 32x32 binary bitmap is reduced to 8x8 counts of on-pixels per 4x4
block (0..16). The 8x8 image is then upsampled bilinearly to the model
input size.
"""

import functools
import glob
import os

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .manifest import LabelSource, Split, from_arrays

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
_SKIP_FONTS = ("STIXSiz", "STIXNonUni", "cmex10", "cmsy10", "Display")


def sensor(counts8, size=32):
    """8x8 block counts in 0..16 -> ``(size, size, 1)`` uint8 image."""
    u = np.round(np.asarray(counts8, dtype=np.float64) * 255.0 / 16.0).astype(np.uint8)
    up = Image.fromarray(u).resize((size, size), Image.BILINEAR)
    return np.asarray(up, dtype=np.uint8)[:, :, None]


def bitmap_to_counts(bitmap32):
    b = np.asarray(bitmap32, dtype=np.int64)
    return b.reshape(8, 4, 8, 4).sum(axis=(1, 3))


def digits_corpus(size=32):
    """Labeled 10-class digits manifest (original labels)."""
    from sklearn.datasets import load_digits

    d = load_digits()
    arrays = [sensor(img, size) for img in d.images]
    m = from_arrays(arrays, d.target.tolist(), split=Split.PDD, label_source=LabelSource.OL, num_classes=10)
    return m


def font_paths():
    import matplotlib

    root = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")
    return sorted(p for p in glob.glob(os.path.join(root, "*.ttf"))
                  if not any(s in os.path.basename(p) for s in _SKIP_FONTS))


@functools.lru_cache(maxsize=None)
def _glyphs():
    """Pre-rendered (font x letter x stroke) glyph masks at 48 px."""
    out = []
    for path in font_paths():
        font = ImageFont.truetype(path, 48)
        for ch in LETTERS:
            for stroke in (0, 2, 4):
                im = Image.new("L", (112, 112))
                ImageDraw.Draw(im).text((28, 14), ch, fill=255, font=font, stroke_width=stroke, stroke_fill=255)
                if np.asarray(im).max() > 0:
                    out.append((im, LETTERS.index(ch)))
    return out


def _render(glyph, rng):
    im = glyph.rotate(rng.uniform(-20.0, 20.0), resample=Image.BILINEAR)
    a = np.asarray(im) > 127
    ys, xs = np.nonzero(a)
    if ys.size == 0:
        return None
    a = a[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    h, w = a.shape
    box = int(rng.integers(22, 31))
    s = box / max(h, w)
    gw, gh = max(1, int(round(w * s))), max(1, int(round(h * s)))
    g = np.asarray(Image.fromarray(a.astype(np.uint8) * 255).resize((gw, gh), Image.BILINEAR)) > 127
    canvas = np.zeros((32, 32), dtype=bool)
    oy = int(np.clip((32 - gh) // 2 + rng.integers(-2, 3), 0, 32 - gh))
    ox = int(np.clip((32 - gw) // 2 + rng.integers(-2, 3), 0, 32 - gw))
    canvas[oy:oy + gh, ox:ox + gw] = g
    return canvas


def letters_corpus(count, seed=0, size=32, keep_labels=False):
    """``count`` rendered letters as an NPDD pool.

    With ``keep_labels`` the 52-way letter identities are kept (``split=PDD``,
    ``label_source=OL``); by default they are discarded.
    """
    glyphs = _glyphs()
    rng = np.random.default_rng(seed)
    arrays, labels = [], []
    while len(arrays) < count:
        im, label = glyphs[int(rng.integers(len(glyphs)))]
        canvas = _render(im, rng)
        if canvas is None:
            continue
        arrays.append(sensor(bitmap_to_counts(canvas), size))
        labels.append(label)
    if keep_labels:
        return from_arrays(arrays, labels, split=Split.PDD, label_source=LabelSource.OL, num_classes=len(LETTERS))
    return from_arrays(arrays, split=Split.NPDD)

