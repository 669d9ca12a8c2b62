"""Dataset splits, image references and surrogate-pool construction."""

from .augment import AUGMENTATIONS, augment
from .manifest import (DatasetManifest, LabelSource, Record, Split, StolenLabelRecord, from_arrays,
                       load_manifest, load_stolen, save_manifest, save_stolen)
from .pipeline import BalanceReport, balance, dedup, generate_random_pixels, split_problem

__all__ = [
    "AUGMENTATIONS", "BalanceReport", "DatasetManifest", "LabelSource", "Record", "Split",
    "StolenLabelRecord", "augment", "balance", "dedup", "from_arrays", "generate_random_pixels",
    "load_manifest", "load_stolen", "save_manifest", "save_stolen", "split_problem",
]
