import os
import random

import numpy as np
import torch
from __version__ import version
from config import TrainConfig
from errors import CheckpointError
from network import VRNN
from semver import Version
from variants import build_variant

CHECKPOINT_FORMAT = "1.0.0"


def is_compatible(found: str, expected: str = CHECKPOINT_FORMAT) -> bool:
    """Checkpoints are readable across minor/patch versions of the same major."""
    try:
        return Version.parse(found).major == Version.parse(expected).major
    except (TypeError, ValueError):
        return False


###
# RNG STATE
###


def capture_rng_state() -> dict:
    state = {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }
    if torch.cuda.is_available():
        state["cuda"] = torch.cuda.get_rng_state_all()
    return state


def restore_rng_state(state: dict) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])
    if "cuda" in state and torch.cuda.is_available():
        torch.cuda.set_rng_state_all(state["cuda"])


###
# SAVE / LOAD
###


def save_checkpoint(
    path: str,
    model: VRNN,
    train_cfg: TrainConfig,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    best_val_mse: float | None = None,
    extra: dict | None = None,
) -> str:
    """Write a checkpoint atomically; epoch is the number of completed epochs."""
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "code_version": version,
        "train_config": train_cfg._asdict(),
        "model_config": model.cfg._asdict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "best_val_mse": best_val_mse,
        "rng_state": capture_rng_state(),
        "extra": extra or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    return path


def read_checkpoint(path: str, map_location: str | torch.device = "cpu") -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        # payload holds numpy and python RNG states next to the tensors
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a vvp checkpoint")
    if not is_compatible(payload["format_version"]):
        raise CheckpointError(
            f"Checkpoint format {payload['format_version']} is incompatible "
            f"with {CHECKPOINT_FORMAT}"
        )
    return payload


def _config_mismatch(saved: dict, current: dict) -> list[str]:
    keys = sorted(set(saved) | set(current))
    return [
        key
        for key in keys
        if _normalize(saved.get(key)) != _normalize(current.get(key))
    ]


def _normalize(value):
    return list(value) if isinstance(value, (tuple, list)) else value


def load_checkpoint(
    path: str,
    model: VRNN,
    optimizer: torch.optim.Optimizer | None = None,
    restore_rng: bool = False,
    map_location: str | torch.device = "cpu",
) -> dict:
    """Load parameters (and optionally optimizer/RNG state) into an existing model."""
    payload = read_checkpoint(path, map_location)
    mismatched = _config_mismatch(payload["model_config"], model.cfg._asdict())
    if mismatched:
        raise CheckpointError(
            f"Checkpoint {path} was saved with a different model config: "
            f"{', '.join(mismatched)}"
        )
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not fit the model: {e}") from e

    if optimizer is not None:
        if payload["optimizer_state"] is None:
            raise CheckpointError(f"Checkpoint {path} has no optimizer state")
        optimizer.load_state_dict(payload["optimizer_state"])
    if restore_rng:
        restore_rng_state(payload["rng_state"])
    return payload


def load_model(
    path: str, map_location: str | torch.device = "cpu"
) -> tuple[VRNN, TrainConfig, dict]:
    """Rebuild the model a checkpoint was trained with and load its weights."""
    payload = read_checkpoint(path, map_location)
    fields = TrainConfig._fields
    saved = {k: v for k, v in payload["train_config"].items() if k in fields}
    train_cfg = TrainConfig(**saved)._replace(
        block_channels=tuple(saved.get("block_channels", TrainConfig().block_channels))
    )
    model = build_variant(train_cfg)
    load_checkpoint(path, model, map_location=map_location)
    model.to(map_location)
    model.eval()
    return model, train_cfg, payload
