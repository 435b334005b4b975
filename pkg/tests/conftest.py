import numpy as np
import pytest
import torch

from clearsky.embedding import FrozenEncoders, init_prompts
from clearsky.prompts import Stage1Config, train_prompts
from clearsky.weathergen import DatasetManifest, make_dataset

# desk-scale stage-1 settings that reach the accuracy the spec requires;
# the paper-mirroring CLI defaults (lr 5e-6) assume full-size pretrained
# encoders and stay as defaults only
STAGE1_KW = dict(lr=2e-2, batch_size=64, image_size=None, temperature=0.05, n_augment=4)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory) -> DatasetManifest:
    """60 pairs/class at 64x64; shared by everything non-acceptance."""
    root = tmp_path_factory.mktemp("data") / "ds"
    return make_dataset(root, per_class=60, size=64, seed=7)


@pytest.fixture(scope="session")
def encoders() -> FrozenEncoders:
    return FrozenEncoders(seed=0)


@pytest.fixture(scope="session")
def train_pairs(small_manifest):
    return [(small_manifest.load_pair(r)[1], r["label"]) for r in small_manifest.split("train")]


@pytest.fixture(scope="session")
def test_pairs(small_manifest):
    return [(small_manifest.load_pair(r)[1], r["label"]) for r in small_manifest.split("test")]


@pytest.fixture(scope="session")
def trained_bank(encoders, train_pairs):
    """A bank trained enough for selection/classification tests."""
    cfg = Stage1Config(iterations=600, seed=3, **STAGE1_KW)
    bank, _ = train_prompts(cfg, encoders, init_prompts(seed=1), train_pairs)
    return bank


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_threads():
    # tests share the box with training calibration runs
    torch.set_num_threads(2)
    yield
