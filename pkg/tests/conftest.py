"""
Shared fixtures: a tiny synthetic world and the gradient-check model size.
"""

import hashlib
from pathlib import Path

import pytest

from lmr.model import ModelConfig
from lmr.synthetic_world import WorldConfig, generate_dataset

DATA_DIR = Path(__file__).parent / "data"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow acceptance reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped unless --runslow is given")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_world_cfg() -> WorldConfig:
    return WorldConfig(
        seed=3,
        episodes=8,
        heldout_episodes=4,
        clip_count=8,
        visual_dim=8,
        text_dim=8,
        distractors_per_episode=1,
        segment_len_range=(1, 3),
    )


@pytest.fixture
def tiny_bundles(tiny_world_cfg):
    return generate_dataset(tiny_world_cfg)


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(hidden_dim=8, heads=2, k_moment_queries=2, visual_dim=8, text_dim=8, dropout=0.0)


def directory_digest(root: Path) -> str:
    """SHA-256 over relative paths and bytes of every file, log files excluded."""
    h = hashlib.sha256()
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        rel = path.relative_to(root)
        if rel.parts[0] == "logs":
            continue
        h.update(str(rel).encode("utf-8"))
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture
def digest():
    return directory_digest
