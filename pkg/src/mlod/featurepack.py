"""On-disk feature pack: a manifest plus raw float32 matrices.

A pack is a directory holding `manifest.json` and one file per
(layer, split) cell named `layer_<index>_<split>.bin`. Matrix files are raw
row-major float32 little-endian with no header, so their byte length must
equal count * dim * 4 exactly; that check is what catches truncation. The
format is producer-agnostic: anything that writes these files can feed the
detector.

Manifest schema (version 1):

    {
      "version": 1,
      "num_classes": 10,
      "dtype": "f32le",
      "layers": [{"name": "block1", "kind": "features", "dim": 64, "index": 1}, ...],
      "splits": {"calibration": 10000, "test_id": 5000, "ood": 5000},
      "labels_present": {"calibration": false, ...}
    }

Layer indices must be contiguous from 1; `kind` is "features" or "logits",
and logits layers must have dim equal to num_classes. Loaded data must be
finite: NaN or infinite entries are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    IncompleteGrid,
    IoFailure,
    MissingFile,
    NaNInData,
    SchemaError,
    SizeMismatch,
    UnknownSplit,
)

PACK_VERSION = 1
MANIFEST_NAME = "manifest.json"
_KINDS = ("features", "logits")
_BYTES_PER_VALUE = 4  # float32


@dataclass(frozen=True)
class LayerSpec:
    """One tapped layer: name, kind ("features" or "logits"), dim, 1-based index."""

    name: str
    kind: str
    dim: int
    index: int


@dataclass
class PackManifest:
    """Validated description of a pack; `root` is set when read from disk."""

    num_classes: int
    layers: list[LayerSpec]
    splits: dict[str, int]
    labels_present: dict[str, bool] = field(default_factory=dict)
    version: int = PACK_VERSION
    root: Path | None = None

    @property
    def m(self) -> int:
        return len(self.layers)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise SchemaError(f"no layer named {name!r} in manifest")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "num_classes": self.num_classes,
            "dtype": "f32le",
            "layers": [
                {"name": s.name, "kind": s.kind, "dim": s.dim, "index": s.index}
                for s in self.layers
            ],
            "splits": dict(self.splits),
            "labels_present": {k: bool(self.labels_present.get(k, False)) for k in self.splits},
        }


@dataclass
class FeatureMatrix:
    """Float32 matrix of shape (count, dim) for one (layer, split) cell."""

    data: np.ndarray
    layer: LayerSpec
    split: str


@dataclass
class FeaturePack:
    """In-memory pack: manifest plus every (layer name, split) matrix."""

    manifest: PackManifest
    matrices: dict[tuple[str, str], FeatureMatrix]

    def matrix(self, layer_name: str, split: str) -> FeatureMatrix:
        try:
            return self.matrices[(layer_name, split)]
        except KeyError:
            if split not in self.manifest.splits:
                raise UnknownSplit(f"split {split!r} not in pack") from None
            raise SchemaError(f"no matrix for layer {layer_name!r}, split {split!r}") from None

    def save(self, path: str | Path) -> PackManifest:
        return write_pack(list(self.matrices.values()), self.manifest, path)


def _matrix_filename(layer: LayerSpec, split: str) -> str:
    return f"layer_{layer.index}_{split}.bin"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise SchemaError(message)


def validate_manifest(manifest: PackManifest) -> None:
    """Check structural invariants; raises SchemaError on violation."""
    _require(manifest.version == PACK_VERSION,
             f"unsupported pack version {manifest.version!r}")
    _require(isinstance(manifest.num_classes, int) and manifest.num_classes >= 0,
             "num_classes must be a nonnegative integer")
    _require(len(manifest.layers) >= 1, "manifest declares no layers")
    indices = sorted(s.index for s in manifest.layers)
    _require(indices == list(range(1, len(manifest.layers) + 1)),
             f"layer indices must be contiguous from 1, got {indices}")
    names = [s.name for s in manifest.layers]
    _require(len(set(names)) == len(names), "layer names must be unique")
    for spec in manifest.layers:
        _require(bool(spec.name), "layer name must be nonempty")
        _require(spec.kind in _KINDS, f"layer {spec.name!r} has unknown kind {spec.kind!r}")
        _require(isinstance(spec.dim, int) and spec.dim >= 1,
                 f"layer {spec.name!r} must have positive dim")
        if spec.kind == "logits":
            _require(spec.dim == manifest.num_classes,
                     f"logits layer {spec.name!r} has dim {spec.dim}, "
                     f"expected num_classes={manifest.num_classes}")
    _require(isinstance(manifest.splits, dict) and len(manifest.splits) >= 1,
             "manifest declares no splits")
    for split, count in manifest.splits.items():
        _require(bool(split), "split name must be nonempty")
        _require(isinstance(count, int) and count >= 0,
                 f"split {split!r} must have nonnegative integer count")


def _manifest_from_dict(raw: dict, path: Path) -> PackManifest:
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: manifest must be a JSON object")
    for key in ("version", "num_classes", "dtype", "layers", "splits"):
        if key not in raw:
            raise SchemaError(f"{path}: manifest missing key {key!r}")
    if raw["dtype"] != "f32le":
        raise SchemaError(f"{path}: unsupported dtype {raw['dtype']!r}")
    if not isinstance(raw["layers"], list):
        raise SchemaError(f"{path}: 'layers' must be a list")
    layers = []
    for entry in raw["layers"]:
        if not isinstance(entry, dict) or not {"name", "kind", "dim", "index"} <= set(entry):
            raise SchemaError(f"{path}: malformed layer entry {entry!r}")
        layers.append(LayerSpec(name=entry["name"], kind=entry["kind"],
                                dim=entry["dim"], index=entry["index"]))
    labels = raw.get("labels_present", {})
    if not isinstance(labels, dict):
        raise SchemaError(f"{path}: 'labels_present' must be an object")
    manifest = PackManifest(
        num_classes=raw["num_classes"],
        layers=sorted(layers, key=lambda s: s.index),
        splits=raw["splits"],
        labels_present={k: bool(v) for k, v in labels.items()},
        version=raw["version"],
    )
    validate_manifest(manifest)
    return manifest


def _check_file(manifest: PackManifest, layer: LayerSpec, split: str) -> Path:
    assert manifest.root is not None
    fpath = manifest.root / _matrix_filename(layer, split)
    if not fpath.is_file():
        raise MissingFile(f"declared matrix file missing: {fpath}")
    expected = manifest.splits[split] * layer.dim * _BYTES_PER_VALUE
    actual = fpath.stat().st_size
    if actual != expected:
        raise SizeMismatch(
            f"{fpath}: expected {expected} bytes "
            f"({manifest.splits[split]} rows x {layer.dim} dims x 4), found {actual}")
    return fpath


def read_manifest(path: str | Path) -> PackManifest:
    """Read and fully validate a pack directory's manifest.

    Validation covers the JSON schema and the presence and exact byte size of
    every declared matrix file, so a manifest this function accepts will load.
    """
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise MissingFile(f"no {MANIFEST_NAME} in {root}")
    try:
        raw = json.loads(mpath.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {mpath}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{mpath}: invalid JSON: {exc}") from exc
    manifest = _manifest_from_dict(raw, mpath)
    manifest.root = root
    for layer in manifest.layers:
        for split in manifest.splits:
            _check_file(manifest, layer, split)
    return manifest


def load_split(manifest: PackManifest, layer_name: str, split: str) -> FeatureMatrix:
    """Load one (layer, split) matrix as float32, rejecting non-finite data."""
    if manifest.root is None:
        raise IoFailure("manifest has no root directory; read it with read_manifest")
    if split not in manifest.splits:
        raise UnknownSplit(f"split {split!r} not declared; have {sorted(manifest.splits)}")
    layer = manifest.layer(layer_name)
    fpath = _check_file(manifest, layer, split)
    try:
        flat = np.fromfile(fpath, dtype="<f4")
    except OSError as exc:
        raise IoFailure(f"cannot read {fpath}: {exc}") from exc
    data = flat.reshape(manifest.splits[split], layer.dim)
    if data.size and not np.isfinite(data).all():
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise NaNInData(f"{fpath}: {bad} non-finite entries")
    return FeatureMatrix(data=data, layer=layer, split=split)


def write_pack(matrices: list[FeatureMatrix], manifest: PackManifest,
               path: str | Path) -> PackManifest:
    """Write a full pack directory; matrices must cover layers x splits exactly.

    Data is stored as little-endian float32, so reading back what was written
    is bit-identical. Returns the manifest with `root` pointing at the pack.
    """
    validate_manifest(manifest)
    cells = {(m.layer.name, m.split): m for m in matrices}
    if len(cells) != len(matrices):
        raise IncompleteGrid("duplicate (layer, split) matrices passed to write_pack")
    wanted = {(layer.name, split) for layer in manifest.layers for split in manifest.splits}
    if set(cells) != wanted:
        missing = sorted(wanted - set(cells))
        extra = sorted(set(cells) - wanted)
        raise IncompleteGrid(
            f"matrices do not match manifest grid; missing {missing}, unexpected {extra}")
    for (name, split), mat in cells.items():
        layer = manifest.layer(name)
        want_shape = (manifest.splits[split], layer.dim)
        arr = np.asarray(mat.data)
        if arr.shape != want_shape:
            raise SizeMismatch(
                f"matrix for layer {name!r}, split {split!r} has shape {arr.shape}, "
                f"manifest requires {want_shape}")
        if arr.size and not np.isfinite(arr).all():
            raise NaNInData(f"matrix for layer {name!r}, split {split!r} has non-finite entries")
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for (name, split), mat in sorted(cells.items()):
            layer = manifest.layer(name)
            arr = np.ascontiguousarray(np.asarray(mat.data), dtype="<f4")
            (root / _matrix_filename(layer, split)).write_bytes(arr.tobytes())
        (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write pack to {root}: {exc}") from exc
    manifest.root = root
    return manifest


def load_pack(path: str | Path) -> FeaturePack:
    """Read a pack directory eagerly: manifest plus every matrix."""
    manifest = read_manifest(path)
    matrices = {}
    for layer in manifest.layers:
        for split in manifest.splits:
            matrices[(layer.name, split)] = load_split(manifest, layer.name, split)
    return FeaturePack(manifest=manifest, matrices=matrices)
