import os
from typing import NamedTuple

import torch
from dotenv import dotenv_values
from errors import ContractError, UsageError

VARIANT_NAMES = ("v3d_ll", "v3d_kl", "v2d_kl", "det_2d")
LATENT_SOURCES = ("posterior", "prior")


class ModelConfig(NamedTuple):
    window: int = 2
    horizon: int = 2
    frame_height: int = 64
    frame_width: int = 64
    channels: int = 1
    stem_channels: int = 64
    block_channels: tuple[int, int] = (64, 128)
    lstm_layers: int = 2
    lstm_hidden: int = 128
    latent_channels: int = 16
    head_channels: int = 64
    kernel_size: int = 3
    conv_dims: int = 3
    latent: bool = True
    train_latent_source: str = "posterior"
    log_sigma_min: float = -7.0
    log_sigma_max: float = 7.0


class TrainConfig(NamedTuple):
    lr: float = 1e-3
    batch_size: int = 6
    epochs: int = 20
    warmup_fraction: float = 0.2
    ss_start_epoch: int = 2
    ss_end_epoch: int = 12
    lambda_rec: float = 1.0
    lambda_latent: float = 1.0
    variant: str = "v3d_ll"
    seed: int = 0
    grad_clip: float = 5.0
    window: int = 2
    horizon: int = 2
    frame_height: int = 64
    frame_width: int = 64
    channels: int = 1
    stem_channels: int = 64
    block_channels: tuple[int, int] = (64, 128)
    lstm_layers: int = 2
    lstm_hidden: int = 128
    latent_channels: int = 16
    head_channels: int = 64
    train_latent_source: str = "posterior"
    context_frames: int = 10
    predict_frames: int = 10
    eval_samples: int = 50
    data_dir: str = "mnist"
    out_dir: str = "default"
    num_workers: int = 0


def _check_block_channels(block_channels) -> None:
    if len(block_channels) != 2 or min(block_channels) < 1:
        raise ContractError(f"block_channels needs two positive widths, got {block_channels}")


def validate_model_config(cfg: ModelConfig) -> ModelConfig:
    if cfg.conv_dims not in (2, 3):
        raise ContractError(f"conv_dims must be 2 or 3, got {cfg.conv_dims}")
    if cfg.conv_dims == 3 and (cfg.window < 2 or cfg.window % 2):
        raise ContractError(f"window must be an even int >= 2, got {cfg.window}")
    if cfg.conv_dims == 2 and cfg.window != 1:
        raise ContractError("2D variants use single-frame windows (window=1)")
    if not 1 <= cfg.horizon <= cfg.window:
        raise ContractError(
            f"horizon must lie in [1, window={cfg.window}], got {cfg.horizon}"
        )
    if cfg.frame_height % 4 or cfg.frame_width % 4:
        raise ContractError("frame height and width must be divisible by 4")
    if cfg.lstm_layers < 1:
        raise ContractError("lstm_layers must be >= 1")
    _check_block_channels(cfg.block_channels)
    if cfg.train_latent_source not in LATENT_SOURCES:
        raise ContractError(f"Unknown latent source: {cfg.train_latent_source}")
    return cfg


def validate_train_config(cfg: TrainConfig) -> TrainConfig:
    if cfg.lr <= 0:
        raise ContractError("lr must be > 0")
    if not 0 < cfg.warmup_fraction <= 1:
        raise ContractError("warmup_fraction must lie in (0, 1]")
    if cfg.ss_end_epoch < cfg.ss_start_epoch or cfg.ss_start_epoch < 0:
        raise ContractError("ss_start_epoch <= ss_end_epoch required")
    if cfg.variant not in VARIANT_NAMES:
        raise ContractError(f"Unknown variant: {cfg.variant}")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ContractError("batch_size and epochs must be >= 1")
    _check_block_channels(cfg.block_channels)
    return cfg


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    try:
        if isinstance(default, tuple):
            value = tuple(int(item.strip()) for item in raw.split(",") if item.strip())
            if len(value) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return value
        return type(default)(raw.strip())
    except ValueError as e:
        raise UsageError(f"Invalid value for {name}: {raw!r}") from e


def parse_train_config(values: dict[str, str | None]) -> TrainConfig:
    defaults = TrainConfig()._asdict()
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise UsageError(f"Unknown config keys: {', '.join(unknown)}")
    parsed = {
        key: _coerce(key, raw, defaults[key])
        for key, raw in values.items()
        if raw is not None
    }
    return validate_train_config(TrainConfig(**parsed))


def load_train_config(path: str) -> TrainConfig:
    """Read a flat key=value config file whose keys are TrainConfig fields."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    return parse_train_config(dict(dotenv_values(path)))


def save_train_config(cfg: TrainConfig, path: str) -> None:
    lines = []
    for key, value in cfg._asdict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}\n")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.writelines(lines)


###
# ENVIRONMENT SWITCHES
###


def is_deterministic() -> bool:
    return os.getenv("VVP_DETERMINISTIC", "0").strip().lower() in ("1", "true")


def get_device() -> torch.device:
    requested = os.getenv("VVP_DEVICE", "").strip().lower()
    if requested:
        return torch.device(requested)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def set_reproducible_mode(enabled: bool) -> None:
    """Switch deterministic kernels on or off; nothing else in the process is touched."""
    torch.backends.cudnn.deterministic = enabled
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if enabled:
        torch.backends.cudnn.benchmark = False
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
