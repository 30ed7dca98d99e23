"""Writer for the feature-pack directory format.

A pack is a directory holding `manifest.json` plus one raw matrix file per
(layer, split) cell named `layer_<index>_<split>.bin`. Matrix files are raw
row-major float32 little-endian with no header, so a file's byte length is
exactly count * dim * 4. Manifest schema (version 1):

    {
      "version": 1,
      "num_classes": 10,
      "dtype": "f32le",
      "layers": [{"name": "block1", "kind": "features", "dim": 64, "index": 1}, ...],
      "splits": {"calibration": 10000, "test_id": 5000, "ood": 5000},
      "labels_present": {"calibration": false, ...}
    }

Layer indices are contiguous from 1, `kind` is "features" or "logits", and
logits layers carry dim == num_classes. This module writes the format from
scratch so the exporter stands alone; the detector side owns its own reader
and validates everything again on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PackInvariant

PACK_VERSION = 1
MANIFEST_NAME = "manifest.json"
KINDS = ("features", "logits")


@dataclass(frozen=True)
class PackLayer:
    """One layer column of the pack: name, kind, vector dim, 1-based index."""

    name: str
    kind: str
    dim: int
    index: int


def matrix_filename(index: int, split: str) -> str:
    return f"layer_{index}_{split}.bin"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise PackInvariant(message)


def _check_layers(layers: list[PackLayer], num_classes: int) -> None:
    _require(len(layers) > 0, "a pack needs at least one layer")
    _require([s.index for s in layers] == list(range(1, len(layers) + 1)),
             "layer indices must be contiguous from 1 in list order")
    names = [s.name for s in layers]
    _require(len(set(names)) == len(names), "layer names must be unique")
    for spec in layers:
        _require(spec.kind in KINDS, f"layer {spec.name!r} has unknown kind {spec.kind!r}")
        _require(spec.dim >= 1, f"layer {spec.name!r} has non-positive dim")
        if spec.kind == "logits":
            _require(spec.dim == num_classes,
                     f"logits layer {spec.name!r} has dim {spec.dim}, "
                     f"expected num_classes = {num_classes}")


def _check_matrix(arr: np.ndarray, layer: PackLayer, split: str, count: int) -> np.ndarray:
    _require(arr.ndim == 2, f"matrix for ({layer.name!r}, {split!r}) is not 2-D")
    _require(arr.shape == (count, layer.dim),
             f"matrix for ({layer.name!r}, {split!r}) has shape {arr.shape}, "
             f"expected {(count, layer.dim)}")
    if not np.isfinite(arr).all():
        raise PackInvariant(f"matrix for ({layer.name!r}, {split!r}) has non-finite entries")
    return np.ascontiguousarray(arr, dtype="<f4")


def write_pack(out_dir: str | Path, num_classes: int, layers: list[PackLayer],
               matrices: dict[tuple[str, str], np.ndarray]) -> Path:
    """Validate and write a complete pack; returns the pack directory.

    Args:
        out_dir: directory to create (parents included); existing files are
            overwritten but the directory is not cleared first.
        num_classes: classifier class count recorded in the manifest.
        layers: layer columns in index order (index 1 = shallowest).
        matrices: one (count, dim) array per (layer name, split name) cell;
            every layer must cover the same splits with the same counts.

    Raises:
        PackInvariant: on any violation of the format's invariants.
    """
    _check_layers(layers, num_classes)
    splits = sorted({split for _, split in matrices})
    _require(len(splits) > 0, "no matrices given")
    counts: dict[str, int] = {}
    for split in splits:
        rows = {name: arr.shape[0] for (name, sp), arr in matrices.items() if sp == split}
        missing = {s.name for s in layers} - set(rows)
        _require(not missing, f"split {split!r} lacks matrices for layers {sorted(missing)}")
        _require(len(set(rows.values())) == 1,
                 f"split {split!r} has inconsistent row counts {rows}")
        counts[split] = next(iter(rows.values()))
        _require(counts[split] > 0, f"split {split!r} is empty")
    _require(len(matrices) == len(layers) * len(splits),
             "matrices do not cover exactly the (layer, split) grid")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for layer in layers:
        for split in splits:
            arr = _check_matrix(matrices[(layer.name, split)], layer, split, counts[split])
            (root / matrix_filename(layer.index, split)).write_bytes(arr.tobytes())
    manifest = {
        "version": PACK_VERSION,
        "num_classes": num_classes,
        "dtype": "f32le",
        "layers": [
            {"name": s.name, "kind": s.kind, "dim": s.dim, "index": s.index}
            for s in layers
        ],
        "splits": {split: counts[split] for split in splits},
        "labels_present": {split: False for split in splits},
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return root
