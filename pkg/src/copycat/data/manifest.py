"""Dataset manifests and stolen-label records, plus their JSONL files."""

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from ..errors import ValidationError
from . import images


class Split(str, Enum):
    ODD = "ODD"
    PDD = "PDD"
    NPDD = "NPDD"
    TDD = "TDD"


class LabelSource(str, Enum):
    OL = "OL"
    SL = "SL"
    NONE = "NONE"


@dataclass(frozen=True)
class Record:
    ref: str
    label: Optional[int] = None


@dataclass(frozen=True)
class StolenLabelRecord:
    image_ref: str
    hard_label: int
    query_index: int
    oracle_id: str

    def to_dict(self):
        return {
            "ref": self.image_ref,
            "label": self.hard_label,
            "query_index": self.query_index,
            "oracle_id": self.oracle_id,
        }


@dataclass
class DatasetManifest:
    split: Split
    label_source: LabelSource
    records: list = field(default_factory=list)
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.split = Split(self.split)
        self.label_source = LabelSource(self.label_source)
        self.records = [r if isinstance(r, Record) else Record(*r) for r in self.records]
        self.validate()

    def validate(self):
        if self.split in (Split.ODD, Split.TDD) and self.label_source is not LabelSource.OL:
            raise ValidationError(f"{self.split.value} manifests must carry original labels")
        if self.label_source is LabelSource.NONE:
            if any(r.label is not None for r in self.records):
                raise ValidationError("label_source NONE but records carry labels")
        elif any(r.label is None for r in self.records):
            raise ValidationError(f"label_source {self.label_source.value} requires a label on every record")
        if self.num_classes is not None:
            if self.num_classes < 2:
                raise ValidationError("num_classes must be >= 2")
            bad = [r.label for r in self.records if r.label is not None and not 0 <= r.label < self.num_classes]
            if bad:
                raise ValidationError(f"labels out of range [0, {self.num_classes}): {sorted(set(bad))[:10]}")

    def __len__(self):
        return len(self.records)

    @property
    def refs(self):
        return [r.ref for r in self.records]

    @property
    def labels(self):
        return [r.label for r in self.records]

    def replace(self, **changes):
        kw = dict(split=self.split, label_source=self.label_source, records=self.records, num_classes=self.num_classes)
        kw.update(changes)
        return DatasetManifest(**kw)

    def subset(self, indices):
        return self.replace(records=[self.records[i] for i in indices])

    def unlabeled(self, split=Split.NPDD):
        """Copy with labels discarded (how an out-of-domain corpus becomes NPDD)."""
        return DatasetManifest(split, LabelSource.NONE, [Record(r.ref) for r in self.records], self.num_classes)

    def class_counts(self):
        counts = {}
        for r in self.records:
            counts[r.label] = counts.get(r.label, 0) + 1
        return dict(sorted(counts.items()))


def from_arrays(arrays, labels=None, split=Split.NPDD, label_source=None, num_classes=None):
    """Register arrays in the in-memory image store and wrap them in a manifest."""
    if label_source is None:
        label_source = LabelSource.NONE if labels is None else LabelSource.OL
    refs = [images.put_image(a) for a in arrays]
    if labels is None:
        records = [Record(r) for r in refs]
    else:
        records = [Record(r, int(y)) for r, y in zip(refs, labels)]
    return DatasetManifest(split, label_source, records, num_classes)


def _meta_path(path):
    return path + ".meta.json"


def save_manifest(manifest, path, image_dir=None):
    """Write ``manifest`` as JSONL.

    In-memory images are materialized as ``<digest>.png`` under ``image_dir``
    (default: ``<manifest stem>_images`` next to the file). Refs are written
    relative to the manifest's directory. ``num_classes`` goes to a
    ``.meta.json`` sidecar.
    """
    path = os.path.abspath(path)
    base = os.path.dirname(path)
    os.makedirs(base, exist_ok=True)
    if image_dir is None:
        image_dir = os.path.splitext(path)[0] + "_images"
    with open(path, "w") as f:
        for r in manifest.records:
            ref = r.ref
            if images.is_memory_ref(ref):
                target = os.path.join(image_dir, ref[len(images.MEM_PREFIX):] + ".png")
                if not os.path.exists(target):
                    images.write_png(images.load_image(ref), target)
                ref = target
            row = {
                "ref": os.path.relpath(ref, base),
                "label": r.label,
                "split": manifest.split.value,
                "label_source": manifest.label_source.value,
            }
            f.write(json.dumps(row) + "\n")
    with open(_meta_path(path), "w") as f:
        json.dump({"num_classes": manifest.num_classes, "split": manifest.split.value,
                   "label_source": manifest.label_source.value}, f)
    return path


def load_manifest(path, num_classes=None):
    path = os.path.abspath(path)
    base = os.path.dirname(path)
    split = label_source = None
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            if split is None:
                split, label_source = row["split"], row["label_source"]
            elif (row["split"], row["label_source"]) != (split, label_source):
                raise ValidationError(f"{path}:{lineno}: mixed split/label_source in one manifest")
            ref = row["ref"]
            if not os.path.isabs(ref):
                ref = os.path.normpath(os.path.join(base, ref))
            records.append(Record(ref, row.get("label")))
    meta = {}
    if os.path.exists(_meta_path(path)):
        with open(_meta_path(path)) as f:
            meta = json.load(f)
    if num_classes is None:
        num_classes = meta.get("num_classes")
    if split is None:
        split, label_source = meta.get("split"), meta.get("label_source")
    if split is None:
        raise ValidationError(f"{path}: empty manifest has no split; cannot load")
    return DatasetManifest(split, label_source, records, num_classes)


def save_stolen(records, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")


def load_stolen(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                out.append(StolenLabelRecord(row["ref"], int(row["label"]), int(row["query_index"]), row["oracle_id"]))
    return out
