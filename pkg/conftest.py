"""pytest 공통 설정: 디버그 검사 활성화, 느린 테스트 옵션, 작은 설정 fixture"""
import os
import sys
from pathlib import Path

import numpy as np
import pytest

# 프로젝트 루트를 path에 추가
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

# every reconstruction checks |A xbar - y| in the test suite
os.environ["CSRECON_DEBUG"] = "1"

from csrecon.config import build_config  # noqa: E402
from csrecon.engine import Rng  # noqa: E402

TINY = {
    "steps": 2,
    "block_size": 4,
    "ratio": 0.5,
    "channels": "4,8",
    "blocks_per_group": 1,
    "expansion": 1,
    "patch_size": 8,
    "batch_size": 2,
    "iterations": 3,
    "lr": 0.001,
    "train_images": 2,
    "val_patches": 1,
    "val_every": 1,
    "log_every": 1,
    "precision": "float64",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: toy training runs, enabled with CSRECON_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CSRECON_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set CSRECON_SLOW=1 to run toy training")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_values(tmp_path):
    return {**TINY, "out_dir": str(tmp_path / "run")}


@pytest.fixture
def tiny_config(tiny_values):
    return build_config(tiny_values, "tiny")


@pytest.fixture
def texture():
    """8x8 흑백 테스트 이미지"""
    yy, xx = np.mgrid[0:8, 0:8] / 8.0
    return (0.5 + 0.4 * np.sin(3 * xx) * np.cos(2 * yy))[None].astype(np.float64)
