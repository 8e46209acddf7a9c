from pathlib import Path

import numpy as np
import pytest

import config
from logic.linalg import make_rng
from logic.models import BankConfig, SmoothingKernel


@pytest.fixture(autouse=True)
def _isolated_env(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(config, "LOG_FILE_PATH", str(tmp_path / "log.txt"))
    monkeypatch.setattr(config, "PQ_SEED", None)
    monkeypatch.setattr(config, "PQ_THREADS", 1)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def frozen_bank_config() -> BankConfig:
    """Calibration that must leave every prototype where it is."""
    return BankConfig(kernel=SmoothingKernel(kind="delta"), ema_momentum=1.0, lam=0.0)


@pytest.fixture
def tiny_config() -> dict:
    """Small enough for a whole train run in well under a second."""
    return {
        "stream": {
            "base_classes": 4,
            "sessions": 2,
            "n_way": 3,
            "k_shot": 5,
            "input_dim": 6,
            "separation": 6.0,
            "base_train_per_class": 12,
            "test_per_class": 5,
        },
        "network": {"hidden": [8], "embedding_dim": 5},
        "plan": {
            "base_epochs": 2,
            "incremental_epochs": 2,
            "episodes_per_epoch": 2,
            "batch_size": 16,
            "seed": 3,
        },
    }
