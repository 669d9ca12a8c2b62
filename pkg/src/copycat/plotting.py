"""Report figures, each written next to a CSV holding the plotted numbers.

Figures are rendered with the Agg backend and saved without timestamps so
reruns produce identical files.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "copycat"

_NO_DATE = {"svg": {"Date": None}, "png": {"Software": None}}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    ext = os.path.splitext(path)[1].lstrip(".").lower()
    fig.savefig(path, bbox_inches="tight", dpi=120, metadata=_NO_DATE.get(ext))
    plt.close(fig)
    return path


def _write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def data_curve(points, out_stem, target_accuracy=None, num_classes=None, tuned_points=None):
    """Copycat macro accuracy versus number of stolen labels.

    ``points`` and ``tuned_points`` are ``[(size, accuracy)]``. Writes
    ``<stem>.svg`` and ``<stem>.csv``.
    """
    fig, ax = plt.subplots(figsize=(5, 3.4))
    xs, ys = zip(*points) if points else ((), ())
    ax.plot(xs, ys, "o-", label="NPDD-SL copycat")
    rows = [(s, "npdd", a) for s, a in points]
    if tuned_points:
        tx, ty = zip(*tuned_points)
        ax.plot(tx, ty, "s--", label="NPDD+PDD-SL copycat")
        rows += [(s, "npdd+pdd", a) for s, a in tuned_points]
    if target_accuracy is not None:
        ax.axhline(target_accuracy, color="k", lw=0.8, label="target")
    if num_classes:
        ax.axhline(1.0 / num_classes, color="grey", lw=0.8, ls=":", label="chance")
    ax.set_xlabel("stolen labels")
    ax.set_ylabel("macro accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8, loc="lower right")
    ax.grid(alpha=0.3)
    _write_csv(out_stem + ".csv", ["size", "series", "macro_accuracy"], rows)
    return _save(fig, out_stem + ".svg")


def label_distribution(counts_by_stream, out_stem):
    """Grouped bars of per-class label counts, one group per query stream."""
    names = list(counts_by_stream)
    k = max(len(c) for c in counts_by_stream.values())
    fig, ax = plt.subplots(figsize=(5, 3.4))
    width = 0.8 / max(1, len(names))
    rows = []
    for i, name in enumerate(names):
        counts = list(counts_by_stream[name]) + [0] * (k - len(counts_by_stream[name]))
        total = sum(counts) or 1
        ax.bar(np.arange(k) + i * width, [c / total for c in counts], width, label=name)
        rows += [(name, c, n) for c, n in enumerate(counts)]
    ax.set_xticks(np.arange(k) + width * (len(names) - 1) / 2)
    ax.set_xticklabels([str(c) for c in range(k)])
    ax.set_xlabel("class")
    ax.set_ylabel("fraction of labels")
    ax.legend(fontsize=8)
    _write_csv(out_stem + ".csv", ["stream", "class", "count"], rows)
    return _save(fig, out_stem + ".svg")


def heatmap_png(values, path, image=None):
    """Relevance map on a blue-white-red scale, symmetric around zero."""
    v = np.asarray(values, dtype=np.float64)
    m = float(np.abs(v).max()) or 1.0
    if image is None:
        fig, ax = plt.subplots(figsize=(3, 3))
        axes = [ax]
    else:
        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        img = np.asarray(image)
        axes[0].imshow(img[..., 0] if img.ndim == 3 and img.shape[-1] == 1 else img, cmap="gray")
        axes[0].set_title("input", fontsize=9)
    im = axes[-1].imshow(v, cmap="bwr", vmin=-m, vmax=m)
    axes[-1].set_title("relevance", fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[-1], fraction=0.046, pad=0.04)
    return _save(fig, path)


def feature_scatter(points, out_stem):
    """2-D scatter of ``[(origin, class, (x, y))]``; ODD as dots, NPDD as crosses."""
    fig, ax = plt.subplots(figsize=(5, 5))
    cmap = plt.get_cmap("tab10")
    rows = []
    for origin, marker, size in (("NPDD_SL", "x", 10), ("ODD_OL", "o", 14)):
        sel = [(c, xy) for o, c, xy in points if o == origin]
        if not sel:
            continue
        cls = np.array([c for c, _ in sel])
        xy = np.array([p for _, p in sel], dtype=np.float64)
        ax.scatter(xy[:, 0], xy[:, 1], c=[cmap(c % 10) for c in cls], marker=marker, s=size,
                   linewidths=0.6, label=origin)
        rows += [(origin, int(c), float(p[0]), float(p[1])) for c, p in sel]
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=8)
    _write_csv(out_stem + ".csv", ["origin", "class", "x", "y"], rows)
    return _save(fig, out_stem + ".png")
