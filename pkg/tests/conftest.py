import numpy as np
import pytest
import torch
from config import ModelConfig, TrainConfig
from datasets import generate_moving_mnist
from glyphs import fallback_glyph_bank

ENV_VARS = (
    "VVP_DETERMINISTIC",
    "VVP_DEVICE",
    "VVP_GLYPHS",
    "VVP_DATA_PATH",
    "VVP_RUNS_PATH",
    "LOG_FILE",
)

TINY_MODEL = dict(
    window=2,
    horizon=2,
    frame_height=16,
    frame_width=16,
    channels=1,
    stem_channels=4,
    block_channels=(4, 8),
    lstm_layers=2,
    lstm_hidden=8,
    latent_channels=4,
    head_channels=4,
)


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("VVP_DEVICE", "cpu")
    monkeypatch.setenv("VVP_DATA_PATH", str(tmp_path / "data"))
    monkeypatch.setenv("VVP_RUNS_PATH", str(tmp_path / "runs"))


@pytest.fixture(scope="session")
def glyph_bank() -> np.ndarray:
    return fallback_glyph_bank()


@pytest.fixture
def tiny_model_config():
    def make(**overrides) -> ModelConfig:
        return ModelConfig(**{**TINY_MODEL, **overrides})

    return make


@pytest.fixture
def tiny_train_config(tmp_path):
    def make(**overrides) -> TrainConfig:
        values = dict(
            TINY_MODEL,
            batch_size=4,
            epochs=1,
            ss_start_epoch=0,
            ss_end_epoch=2,
            context_frames=4,
            predict_frames=4,
            eval_samples=2,
            out_dir=str(tmp_path / "run"),
            data_dir=str(tmp_path / "data"),
        )
        values.pop("channels")
        values.update(overrides)
        return TrainConfig(**values)

    return make


@pytest.fixture
def tiny_sequences(glyph_bank):
    """8 single-digit 16x16 sequences of 8 frames."""
    return generate_moving_mnist(
        8, n_frames=8, n_digits=1, seed=3, glyph_bank=glyph_bank, canvas=(16, 16)
    )


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    np.random.seed(0)
