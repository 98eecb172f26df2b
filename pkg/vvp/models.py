from collections import namedtuple
from typing import NamedTuple

import torch


class GaussianField(NamedTuple):
    """Diagonal Gaussian over a latent grid; sigma = exp(log_sigma)."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()


class LossBreakdown(NamedTuple):
    rec_l1: torch.Tensor
    rec_l2: torch.Tensor
    kl: torch.Tensor
    neg_ll: torch.Tensor
    latent: torch.Tensor
    total: torch.Tensor
    beta: float
    ll_weight: float = 1.0

    def as_floats(self) -> dict[str, float]:
        return {
            "rec_l1": float(self.rec_l1),
            "rec_l2": float(self.rec_l2),
            "kl": float(self.kl),
            "neg_ll": float(self.neg_ll),
            "latent": float(self.latent),
            "total": float(self.total),
            "beta": float(self.beta),
            "ll_weight": float(self.ll_weight),
        }


# frames: float32 ndarray [T, H, W, C] in [0, 1]
VideoSequence = namedtuple("VideoSequence", ["frames", "source_id"])

# glyph: 28x28 float array; position: top-left (x, y); velocity: (vx, vy) px/frame
DigitState = namedtuple("DigitState", ["glyph", "position", "velocity"])

DatasetManifest = namedtuple(
    "DatasetManifest",
    [
        "version",
        "dtype",
        "shape_order",
        "count",
        "frame_size",
        "seed",
        "offsets",
        "lengths",
        "source_ids",
        "sha256",
        "params",
    ],
)

LatentSample = namedtuple("LatentSample", ["z", "source"])

# layers: tuple of (hidden, cell) pairs, one per ConvLSTM layer
RecurrentState = namedtuple("RecurrentState", ["layers"])

TrainForward = namedtuple(
    "TrainForward", ["inputs", "predictions", "targets", "priors", "posteriors"]
)

MetricReport = namedtuple(
    "MetricReport",
    [
        "per_frame_mse",
        "per_frame_mse_sum",
        "per_frame_ssim",
        "per_frame_psnr",
        "mse_mean",
        "mse_sum",
        "ssim_mean",
        "psnr_mean",
        "n_samples",
        "samples",
    ],
)

CommandResult = namedtuple("CommandResult", ["exit_code", "artifacts", "summary"])

# history: one validation record per epoch run in this call
TrainSummary = namedtuple(
    "TrainSummary",
    ["epochs_completed", "checkpoints", "best_checkpoint", "best_val_mse", "history"],
)
