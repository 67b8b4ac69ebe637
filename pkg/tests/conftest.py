import os
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from crackbench import model as M
from crackbench.dataset import CLASS_DIRS, ImagePatch, NEGATIVE, POSITIVE

ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    return record_criterion


# -- data helpers ---------------------------------------------------------------

def uniform_patch(value, size=8, label=None, path=None):
    px = np.full((size, size, 3), value, dtype=np.uint8)
    return ImagePatch(px, label=label, path=path)


def write_image(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


@pytest.fixture
def make_corpus(tmp_path):
    """Write Positive/Negative dirs of random-noise patches; returns the root."""

    def _make(n_pos, n_neg, size=16, extra=None, seed=0):
        rng = np.random.default_rng(seed)
        root = tmp_path / f"corpus_{n_pos}_{n_neg}_{size}_{seed}"
        for label, n in ((POSITIVE, n_pos), (NEGATIVE, n_neg)):
            d = root / CLASS_DIRS[label]
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                write_image(d / f"{i:04d}.png", rng.integers(0, 256, (size, size, 3)))
        for rel, arr in (extra or {}).items():
            write_image(root / rel, arr)
        return root

    return _make


# -- stub models ----------------------------------------------------------------

class ConstModel:
    normalization = "unit_range"
    decision_threshold = 0.5

    def __init__(self, value):
        self.value = value
        self.calls = 0

    def predict(self, batch):
        batch = list(batch)
        self.calls += len(batch)
        return [self.value] * len(batch)


class MeanModel:
    """Scores a patch by its mean normalized intensity."""
    normalization = "unit_range"
    decision_threshold = 0.5

    def predict(self, batch):
        return [float(np.mean(a)) for a in batch]


class MarkerModel:
    """Fires iff the window contains a pure-red pixel."""
    normalization = "unit_range"
    decision_threshold = 0.5

    def predict(self, batch):
        out = []
        for a in batch:
            red = (a[..., 0] == 1.0) & (a[..., 1] == 0.0) & (a[..., 2] == 0.0)
            out.append(1.0 if red.any() else 0.0)
        return out


class MeanRG(nn.Module):
    """Identity-style stub backbone: features are the mean red and green levels."""

    def forward(self, x):
        return x.mean(dim=(2, 3))[:, :2]


STUB_DESC = M.BackboneDescriptor("Stub", 0, 0, 8, "unit_range", build=None, strip=None)


def stub_classifier(mode=M.FINE_TUNE, seed=0, backbone=None, dim=2):
    return M.ClassifierModel(STUB_DESC, backbone or MeanRG(), dim, mode, seed)


class TinyConv(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.bn = nn.BatchNorm2d(4)

    def forward(self, x):
        return torch.relu(self.bn(self.conv(x))).mean(dim=(2, 3))


@pytest.fixture
def fake_builder(monkeypatch):
    """Replace build_classifier with tiny conv models so experiment bookkeeping runs fast."""

    def build(name, mode=M.FINE_TUNE, seed=0, weight_store=None, **kw):
        torch.manual_seed(1234)
        desc = M.BackboneDescriptor(name, 0, 0, 8, "unit_range", build=None, strip=None)
        m = M.ClassifierModel(desc, TinyConv(), 4, mode, seed)
        m.pretrained_checksum = m.backbone_checksum()
        return m

    monkeypatch.setattr(M, "build_classifier", build)
    return build


# -- weight store ---------------------------------------------------------------

@pytest.fixture(scope="session")
def weight_store(tmp_path_factory):
    """Random-initialized checkpoints for all four backbones (no network access needed).

    Set CRACKBENCH_WEIGHTS to use an existing store instead.
    """
    env = os.environ.get(M.WEIGHTS_ENV)
    if env and all((Path(env) / f"{d.name}.pth").is_file() for d in M.list_backbones()):
        return Path(env)
    store = tmp_path_factory.mktemp("weights")
    M.create_weight_store(store, seed=0, source="random")
    return store


@pytest.fixture(scope="session")
def effnet_store(tmp_path_factory):
    """Store with only the cheapest backbone, for tests that train real networks."""
    env = os.environ.get(M.WEIGHTS_ENV)
    if env and (Path(env) / "EfficientNetV2.pth").is_file():
        return Path(env)
    store = tmp_path_factory.mktemp("weights_effnet")
    M.create_weight_store(store, ["EfficientNetV2"], seed=0, source="random")
    return store
