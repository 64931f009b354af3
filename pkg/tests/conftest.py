import numpy as np
import pytest
import torch

from strokex import generate_dataset
from strokex.configfile import RunConfig
from strokex.data import ReferenceLayout, StrokeKind, StrokePrimitive
from strokex.data.raster import JitterConfig
from strokex.files import Paths


@pytest.fixture(autouse=True)
def runs_root(tmp_path, monkeypatch):

    root = tmp_path / "runs"
    monkeypatch.setenv("STROKEX_RUNS", str(root))
    return root


@pytest.fixture
def cross_layout():
    """A horizontal stroke crossed by a vertical one"""

    return ReferenceLayout(
        layout_id=0,
        strokes=(
            StrokePrimitive(StrokeKind.HORIZONTAL, ((60.0, 128.0), (196.0, 128.0)), 10.0),
            StrokePrimitive(StrokeKind.VERTICAL, ((128.0, 60.0), (128.0, 196.0)), 10.0),
        ),
        char_class=0,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 samples over 3 layouts, a quarter held out"""

    root = tmp_path_factory.mktemp("data")
    return generate_dataset(12, seed=1, out=root, split=0.25, layouts=3)


@pytest.fixture(scope="session")
def zero_jitter_dataset(tmp_path_factory):

    root = tmp_path_factory.mktemp("data_zero")
    return generate_dataset(6, seed=2, out=root, split=0.5, layouts=2, jitter=JitterConfig.zero())


@pytest.fixture
def tiny_config(tiny_dataset):
    """One epoch per stage at the smallest widths, on the CPU"""

    config = RunConfig(channel_scale=0.125, device="cpu", data_dir=str(tiny_dataset.root_dir))
    for name in ("content", "recognizer", "sdnet", "segnet", "extractnet"):
        stage = getattr(config, name)
        stage.epochs = 1
        stage.batch_size = 2
    config.extractnet.crop_size = 64
    return config


@pytest.fixture
def paths(runs_root):

    return Paths("test-run")


@pytest.fixture
def rng():

    return np.random.default_rng(1234)


def random_affine_field(rng, size, dtype=torch.float64, strength=0.05):
    """Affine displacement c + G (p - P) with random parameters"""

    height, width = size
    G = torch.tensor(rng.uniform(-strength, strength, size=(2, 2)), dtype=dtype)
    c = torch.tensor(rng.uniform(-5, 5, size=2), dtype=dtype)
    P = torch.tensor(rng.uniform(0, min(size), size=2), dtype=dtype)

    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    rel = torch.stack((xs - P[0], ys - P[1]))
    return c[:, None, None] + torch.einsum("ij,jhw->ihw", G, rel), (G, c, P)


def disk(size, center, radius):

    ys, xs = np.mgrid[:size, :size]
    return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius**2
