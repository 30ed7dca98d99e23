"""Forward-hook feature extraction from a torch model over image folders.

The exporter taps named submodules of a trained classifier, runs every image
of every split through the model in eval mode, pools each tapped activation
to a vector, and writes one feature pack: one "features" layer per tap plus
one "logits" layer per classifier exit (networks returning a tuple of logits
get one exit layer each). Feature layers are ordered by the position at
which their module fires during the forward pass, so index 1 is the
shallowest tap regardless of the order taps were listed in.

Models must be eager `nn.Module` objects saved with `torch.save`. TorchScript
archives are rejected: hooks registered from Python on a loaded script
module's submodules do not fire inside the script interpreter, which would
silently produce empty taps.

Images are read with PIL, converted to RGB, and scaled to float32 in [0, 1],
channels-first. No resizing or normalization is applied; all images within a
split must share one size, and whatever preprocessing the checkpoint expects
must be baked into the model itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import nn

from .errors import (
    BadImage,
    BadTapSpec,
    EmptySplit,
    ExitMismatch,
    ModelLoadError,
    ShapeDrift,
    TapNotFound,
    TapRefired,
    UnsupportedShape,
)
from .packio import PackLayer, write_pack

POOLINGS = ("global_average", "flatten")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
_SPLIT_NAME = re.compile(r"[A-Za-z0-9_\-]+\Z")


@dataclass(frozen=True)
class OdinPerturbation:
    """Input nudge applied before re-extraction.

    Each pixel moves epsilon against the sign of the gradient of the
    temperature-scaled top-class cross-entropy, sharpening the score gap
    between in-distribution and outlier inputs. The gradient is taken at the
    deepest exit.
    """

    epsilon: float
    temperature: float = 1000.0


@dataclass(frozen=True)
class TapSpec:
    """Everything one export run needs.

    Attributes:
        model: path to an eager module saved with `torch.save`.
        taps: named submodules whose outputs become feature layers.
        splits: split name -> image folder path.
        pooling: "global_average" (mean over spatial dims) or "flatten".
        batch_size: images per forward pass.
        odin: optional input perturbation; None leaves inputs untouched.
    """

    model: str
    taps: tuple[str, ...]
    splits: dict[str, str]
    pooling: str = "global_average"
    batch_size: int = 64
    odin: OdinPerturbation | None = None


def validate_spec(spec: TapSpec) -> None:
    if not spec.taps:
        raise BadTapSpec("at least one tap is required")
    if len(set(spec.taps)) != len(spec.taps):
        raise BadTapSpec("tap names must be unique")
    if spec.pooling not in POOLINGS:
        raise BadTapSpec(f"pooling must be one of {POOLINGS}, got {spec.pooling!r}")
    if spec.batch_size < 1:
        raise BadTapSpec("batch_size must be >= 1")
    if not spec.splits:
        raise BadTapSpec("at least one split is required")
    for name in spec.splits:
        if not _SPLIT_NAME.match(name):
            raise BadTapSpec(f"split name {name!r} is not filename-safe")
    if spec.odin is not None:
        if spec.odin.epsilon < 0:
            raise BadTapSpec("odin epsilon must be >= 0")
        if spec.odin.temperature <= 0:
            raise BadTapSpec("odin temperature must be > 0")


def load_model(path: str | Path) -> nn.Module:
    """Load an eager pickled module, reject everything else."""
    try:
        obj = torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise ModelLoadError(f"cannot read model file {path}: {exc}") from exc
    except Exception as exc:  # torch wraps unpickling failures many ways
        raise ModelLoadError(f"{path} did not unpickle as a torch object: {exc}") from exc
    if isinstance(obj, torch.jit.ScriptModule):
        raise ModelLoadError(
            "TorchScript archives are not supported: Python hooks on script "
            "submodules do not fire; export from the eager module instead")
    if not isinstance(obj, nn.Module):
        raise ModelLoadError(f"{path} holds a {type(obj).__name__}, not a torch module")
    obj.eval()
    return obj


def list_images(folder: str | Path) -> list[Path]:
    root = Path(folder)
    if not root.is_dir():
        raise EmptySplit(f"{folder} is not a directory")
    paths = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise EmptySplit(f"{folder} holds no image files ({', '.join(IMAGE_SUFFIXES)})")
    return paths


def _load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise BadImage(f"cannot decode {path}: {exc}") from exc


def _load_batch(paths: list[Path], expect_hw: tuple[int, int] | None) -> torch.Tensor:
    """Stack images into an (N, 3, H, W) float tensor in [0, 1]."""
    rows = []
    for path in paths:
        arr = _load_image(path)
        if expect_hw is None:
            expect_hw = arr.shape[:2]
        elif arr.shape[:2] != expect_hw:
            raise ShapeDrift(f"{path} is {arr.shape[:2]}, split started at {expect_hw}")
        rows.append(arr)
    stacked = np.stack(rows).astype(np.float32) / 255.0
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


class _TapRecorder:
    """Forward hooks that capture each tapped module's output once per pass."""

    def __init__(self, model: nn.Module, taps: tuple[str, ...]):
        named = dict(model.named_modules())
        missing = [t for t in taps if t not in named]
        if missing:
            sample = ", ".join(sorted(n for n in named if n)[:8])
            raise TapNotFound(f"no submodule named {missing[0]!r}; names start: {sample}")
        self.order: list[str] = []
        self.outputs: dict[str, torch.Tensor] = {}
        self._handles = [named[t].register_forward_hook(self._hook(t)) for t in taps]

    def _hook(self, tap: str):
        def record(module, args, output):
            if tap in self.outputs:
                raise TapRefired(f"tap {tap!r} ran twice in one forward pass")
            if not isinstance(output, torch.Tensor):
                raise UnsupportedShape(f"tap {tap!r} returned {type(output).__name__}, "
                                       "not a tensor")
            self.order.append(tap)
            self.outputs[tap] = output.detach()
        return record

    def reset(self) -> None:
        self.order = []
        self.outputs = {}

    def close(self) -> None:
        for h in self._handles:
            h.remove()


def _pool(t: torch.Tensor, pooling: str, tap: str) -> torch.Tensor:
    if t.ndim == 2:
        return t
    if t.ndim < 2:
        raise UnsupportedShape(f"tap {tap!r} produced a rank-{t.ndim} tensor")
    if pooling == "global_average":
        return t.mean(dim=tuple(range(2, t.ndim)))
    return t.reshape(t.shape[0], -1)


def _exits(output, detach: bool = True) -> list[torch.Tensor]:
    outs = list(output) if isinstance(output, (tuple, list)) else [output]
    if not outs or not all(isinstance(o, torch.Tensor) for o in outs):
        raise UnsupportedShape("model output is not a tensor or tuple of tensors")
    for o in outs:
        if o.ndim != 2:
            raise UnsupportedShape(f"classifier exit has shape {tuple(o.shape)}, "
                                   "expected (batch, classes)")
    classes = {o.shape[1] for o in outs}
    if len(classes) != 1:
        raise ExitMismatch(f"exits disagree on class count: {sorted(classes)}")
    return [o.detach() if detach else o for o in outs]


def _perturb(model: nn.Module, x: torch.Tensor, odin: OdinPerturbation) -> torch.Tensor:
    """Move inputs epsilon against the top-class cross-entropy gradient."""
    x = x.clone().requires_grad_(True)
    logits = _exits(model(x), detach=False)[-1]  # gradient at the deepest exit
    scaled = logits / odin.temperature
    labels = scaled.detach().argmax(dim=1)
    loss = torch.nn.functional.cross_entropy(scaled, labels)
    (grad,) = torch.autograd.grad(loss, x)
    return (x - odin.epsilon * grad.sign()).detach()


def export(spec: TapSpec, out_path: str | Path) -> Path:
    """Run every split through the model and write one feature pack.

    Returns the pack directory. Raises the module's typed errors on bad
    specs, missing taps, unreadable folders, or shape drift between batches;
    partially written output may remain on failure.
    """
    validate_spec(spec)
    model = load_model(spec.model)
    recorder = _TapRecorder(model, spec.taps)

    tap_order: list[str] = []     # firing order from the first batch
    exit_names: list[str] = []
    dims: dict[str, int] = {}
    num_classes = 0
    chunks: dict[tuple[str, str], list[np.ndarray]] = {}

    try:
        for split, folder in spec.splits.items():
            paths = list_images(folder)
            hw: tuple[int, int] | None = None
            for start in range(0, len(paths), spec.batch_size):
                batch_paths = paths[start:start + spec.batch_size]
                x = _load_batch(batch_paths, hw)
                hw = tuple(x.shape[2:])
                if spec.odin is not None:
                    recorder.reset()  # the perturbation pass fires the hooks too
                    x = _perturb(model, x, spec.odin)
                recorder.reset()
                with torch.no_grad():
                    exits = _exits(model(x))
                never_ran = [t for t in spec.taps if t not in recorder.outputs]
                if never_ran:
                    raise TapNotFound(f"tap {never_ran[0]!r} exists but never ran "
                                      "in the forward pass")
                if not tap_order:
                    tap_order = list(recorder.order)
                    exit_names = (["exit"] if len(exits) == 1 else
                                  [f"exit{i}" for i in range(1, len(exits) + 1)])
                    num_classes = exits[0].shape[1]
                if len(exits) != len(exit_names) or exits[0].shape[1] != num_classes:
                    raise ShapeDrift(f"classifier exits changed between batches "
                                     f"({len(exit_names)} x {num_classes} before)")
                columns = [(t, _pool(recorder.outputs[t], spec.pooling, t))
                           for t in tap_order] + list(zip(exit_names, exits))
                for name, tensor in columns:
                    arr = tensor.cpu().numpy().astype(np.float32, copy=False)
                    if name in dims and arr.shape[1] != dims[name]:
                        raise ShapeDrift(f"layer {name!r} drifted from dim {dims[name]} "
                                         f"to {arr.shape[1]}")
                    dims[name] = arr.shape[1]
                    chunks.setdefault((name, split), []).append(arr)
    finally:
        recorder.close()

    layers = [PackLayer(name=t, kind="features", dim=dims[t], index=i)
              for i, t in enumerate(tap_order, start=1)]
    layers += [PackLayer(name=e, kind="logits", dim=num_classes, index=len(layers) + i)
               for i, e in enumerate(exit_names, start=1)]
    matrices = {key: np.concatenate(parts) for key, parts in chunks.items()}
    return write_pack(out_path, num_classes, layers, matrices)
