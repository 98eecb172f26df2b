from collections import namedtuple

import torch
from config import ModelConfig, TrainConfig, validate_train_config
from errors import UsageError
from network import VRNN

Variant = namedtuple("Variant", ["label", "conv_dims", "latent", "ll_weight"])

# Ablation variants, in the order the comparison table lists them
VARIANTS = {
    "v3d_ll": Variant("Variational 3D ConvLSTM + LL", 3, True, 1.0),
    "v3d_kl": Variant("Variational 3D ConvLSTM", 3, True, 0.0),
    "v2d_kl": Variant("Variational 2D ConvLSTM", 2, True, 0.0),
    "det_2d": Variant("2D ConvLSTM", 2, False, 0.0),
}

VARIANT_ORDER = tuple(VARIANTS.keys())


def get_variant(name: str) -> Variant:
    variant = VARIANTS.get(name)
    if variant is None:
        raise UsageError(
            f"Unknown variant: {name} (expected one of {', '.join(VARIANT_ORDER)})"
        )
    return variant


def model_config_for(cfg: TrainConfig) -> ModelConfig:
    """ModelConfig for cfg.variant; 2D variants use single-frame windows."""
    variant = get_variant(cfg.variant)
    window, horizon = (cfg.window, cfg.horizon) if variant.conv_dims == 3 else (1, 1)
    return ModelConfig(
        window=window,
        horizon=horizon,
        frame_height=cfg.frame_height,
        frame_width=cfg.frame_width,
        channels=cfg.channels,
        stem_channels=cfg.stem_channels,
        block_channels=tuple(cfg.block_channels),
        lstm_layers=cfg.lstm_layers,
        lstm_hidden=cfg.lstm_hidden,
        latent_channels=cfg.latent_channels,
        head_channels=cfg.head_channels,
        conv_dims=variant.conv_dims,
        latent=variant.latent,
        train_latent_source=cfg.train_latent_source,
    )


def build_variant(cfg: TrainConfig) -> VRNN:
    """Fresh model for cfg.variant; initial weights depend on cfg.seed only."""
    validate_train_config(cfg)
    torch.manual_seed(cfg.seed)
    return VRNN(model_config_for(cfg))


def ll_weight_for(name: str) -> float:
    return get_variant(name).ll_weight
