from pathlib import Path

import numpy as np
import pytest

from kvshare.model import ModelConfig, Transformer, init_weights

ROOT = Path(__file__).resolve().parents[1]
ASSETS = ROOT / "assets"
TOY_CHECKPOINT = ASSETS / "toy" / "model.bin"
CORPUS = ASSETS / "corpus"


def small_config(**overrides) -> ModelConfig:
    cfg = dict(n_layers=4, d_model=32, n_heads=4, n_kv_heads=2, d_head=8, d_ff=64,
               vocab_size=258, max_seq=128)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def random_model(seed: int = 0, std: float = 0.3, **overrides) -> Transformer:
    # a large init std makes layers genuinely different, so sharing is visible
    cfg = small_config(**overrides)
    return Transformer(cfg, init_weights(cfg, seed=seed, std=std))


@pytest.fixture
def toy4():
    return random_model(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained():
    if not TOY_CHECKPOINT.exists():
        pytest.skip("toy checkpoint missing; run scripts/train_toy.py")
    from kvshare.io import load_model
    return load_model(TOY_CHECKPOINT)
