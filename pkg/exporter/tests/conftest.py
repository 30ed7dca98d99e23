"""Shared fixtures: tiny torch models and synthetic image folders.

The single-exit model is a named `nn.Sequential` built only from stock torch
modules, so its pickle loads in any process (the CLI subprocess test needs
that). The special-case models used by error-path tests are defined here and
only ever loaded in-process.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

CLASSES = 5
SPLIT_COUNTS = {"calibration": 24, "test_id": 10, "ood": 10}
IMAGE_HW = (16, 16)


def make_single_exit() -> nn.Sequential:
    # conv1 -> relu -> pool -> conv2 -> relu -> GAP -> head; taps by name
    torch.manual_seed(0)
    return nn.Sequential(OrderedDict([
        ("conv1", nn.Conv2d(3, 4, 3, padding=1)),
        ("relu1", nn.ReLU()),
        ("pool", nn.AvgPool2d(2)),
        ("conv2", nn.Conv2d(4, 8, 3, padding=1)),
        ("relu2", nn.ReLU()),
        ("gap", nn.AdaptiveAvgPool2d(1)),
        ("flat", nn.Flatten()),
        ("head", nn.Linear(8, CLASSES)),
    ]))


class TwoExitNet(nn.Module):
    """Same trunk with an early linear exit; forward returns (early, final)."""

    def __init__(self):
        super().__init__()
        torch.manual_seed(1)
        self.conv1 = nn.Conv2d(3, 4, 3, padding=1)
        self.conv2 = nn.Conv2d(4, 8, 3, padding=1)
        self.early = nn.Linear(4, CLASSES)
        self.final = nn.Linear(8, CLASSES)

    def forward(self, x):
        h1 = torch.relu(self.conv1(x))
        h2 = torch.relu(self.conv2(torch.nn.functional.avg_pool2d(h1, 2)))
        return self.early(h1.mean(dim=(2, 3))), self.final(h2.mean(dim=(2, 3)))


class UnevenExitNet(TwoExitNet):
    """Exits disagree on the class count."""

    def __init__(self):
        super().__init__()
        self.early = nn.Linear(4, CLASSES + 2)


class NetWithSpare(nn.Module):
    """Holds a submodule that the forward pass never runs."""

    def __init__(self):
        super().__init__()
        torch.manual_seed(2)
        self.conv1 = nn.Conv2d(3, 4, 3, padding=1)
        self.head = nn.Linear(4, CLASSES)
        self.spare = nn.Linear(2, 2)

    def forward(self, x):
        return self.head(torch.relu(self.conv1(x)).mean(dim=(2, 3)))


class ReuseNet(NetWithSpare):
    """Runs one activation module twice per forward pass."""

    def __init__(self):
        super().__init__()
        self.act = nn.ReLU()

    def forward(self, x):
        h = self.act(self.conv1(x))
        return self.head(self.act(h).mean(dim=(2, 3)))


class PairTap(nn.Module):
    """A submodule whose output is a tuple, which taps cannot pool."""

    def forward(self, x):
        return x, x


class PairNet(NetWithSpare):
    def __init__(self):
        super().__init__()
        self.pair = PairTap()

    def forward(self, x):
        h, _ = self.pair(torch.relu(self.conv1(x)))
        return self.head(h.mean(dim=(2, 3)))


class NoHeadNet(NetWithSpare):
    """Returns a 4-D map instead of (batch, classes) logits."""

    def forward(self, x):
        return self.conv1(x)


def save_model(module: nn.Module, path: Path) -> str:
    torch.save(module, path)
    return str(path)


def image_array(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(*IMAGE_HW, 3), dtype=np.uint8)


def write_images(folder: Path, count: int, seed0: int) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        Image.fromarray(image_array(seed0 + i)).save(folder / f"img_{i:03d}.png")


@pytest.fixture(scope="session")
def model_path(tmp_path_factory) -> str:
    return save_model(make_single_exit(), tmp_path_factory.mktemp("model") / "net.pt")


@pytest.fixture(scope="session")
def folders(tmp_path_factory) -> dict[str, str]:
    root = tmp_path_factory.mktemp("images")
    out = {}
    for j, (split, count) in enumerate(SPLIT_COUNTS.items()):
        write_images(root / split, count, seed0=1000 * j)
        out[split] = str(root / split)
    return out
