"""Image references, decoding and the model-input resize.

An image reference is either a filesystem path to a PNG or ``mem:<digest>``
for an image held in the process-wide in-memory store (generated and
augmented images live there until they are materialized to disk).
"""

import hashlib
import io
import os
import threading

import numpy as np
from PIL import Image

from ..errors import ImageReadError, ValidationError

MEM_PREFIX = "mem:"

_store = {}
_store_lock = threading.Lock()


def canonical(array):
    """Return ``array`` as a contiguous uint8 ``(H, W, C)`` buffer."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValidationError(f"expected an (H, W[, 1|3]) image, got shape {a.shape}")
    if a.dtype != np.uint8:
        if np.issubdtype(a.dtype, np.floating):
            a = np.clip(np.round(a * 255.0), 0, 255)
        a = a.astype(np.uint8)
    return np.ascontiguousarray(a)


def digest(array):
    """SHA-256 of the decoded pixel buffer (shape-prefixed)."""
    a = canonical(array)
    h = hashlib.sha256("{}x{}x{}:".format(*a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def put_image(array):
    a = canonical(array)
    a.setflags(write=False)
    ref = MEM_PREFIX + digest(a)
    with _store_lock:
        _store.setdefault(ref, a)
    return ref


def is_memory_ref(ref):
    return ref.startswith(MEM_PREFIX)


def decode_png(data):
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        return _from_pil(im)


def _from_pil(im):
    if im.mode not in ("L", "RGB"):
        im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "CMYK") else "L")
    return canonical(np.asarray(im))


def encode_png(array):
    a = canonical(array)
    im = Image.fromarray(a[:, :, 0] if a.shape[2] == 1 else a)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def load_image(ref):
    """Decode one reference to a canonical uint8 array."""
    if is_memory_ref(ref):
        try:
            return _store[ref]
        except KeyError:
            raise ImageReadError([ref]) from None
    try:
        with Image.open(ref) as im:
            im.load()
            return _from_pil(im)
    except (OSError, ValueError):
        raise ImageReadError([ref]) from None


def load_images(refs):
    """Decode many references; raises one error listing every bad ref."""
    out, bad = [], []
    for ref in refs:
        try:
            out.append(load_image(ref))
        except ImageReadError:
            bad.append(ref)
    if bad:
        raise ImageReadError(bad)
    return out


def write_png(array, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_png(array))


def to_model_input(array, input_shape):
    """Resize/convert an image to ``input_shape`` (H, W, C), float32 in [0, 1]."""
    h, w, c = input_shape
    a = canonical(array)
    if a.shape[2] != c:
        if c == 1:
            a = np.asarray(Image.fromarray(a).convert("L"))[:, :, None]
        else:
            a = np.repeat(a, 3, axis=2)
    if a.shape[:2] != (h, w):
        im = Image.fromarray(a[:, :, 0] if c == 1 else a)
        a = np.asarray(im.resize((w, h), Image.BILINEAR))
        if c == 1:
            a = a[:, :, None]
    return a.astype(np.float32) / 255.0


def stack_inputs(refs, input_shape):
    """Load, resize and stack references into an ``(N, H, W, C)`` float32 array."""
    images = load_images(refs)
    out = np.empty((len(images),) + tuple(input_shape), dtype=np.float32)
    for i, a in enumerate(images):
        out[i] = to_model_input(a, input_shape)
    return out
