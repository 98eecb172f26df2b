"""Framewise metrics, the multi-sample stochastic protocol and the copy-last-frame baseline.

Metric functions take frames in the stored layout [T, H, W, C] (numpy or
torch), compute in float64 and return numpy arrays of length T.
"""

import numpy as np
import torch
import torch.nn.functional as F
from datasets import frames_to_tensor, tensor_to_frames
from errors import ContractError
from models import MetricReport, VideoSequence
from network import VRNN

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_frames(x) -> torch.Tensor:
    if isinstance(x, VideoSequence):
        x = x.frames
    if not isinstance(x, torch.Tensor):
        x = torch.from_numpy(np.asarray(x))
    x = x.detach().to("cpu", torch.float64)
    if x.dim() == 3:
        x = x.unsqueeze(-1)
    if x.dim() != 4:
        raise ContractError(f"Expected frames [T, H, W, C], got {tuple(x.shape)}")
    return x


def _pair(pred, truth) -> tuple[torch.Tensor, torch.Tensor]:
    pred, truth = _as_frames(pred), _as_frames(truth)
    if pred.shape != truth.shape:
        raise ContractError(
            f"pred {tuple(pred.shape)} and truth {tuple(truth.shape)} differ"
        )
    return pred, truth


def mse_framewise(pred, truth) -> np.ndarray:
    pred, truth = _pair(pred, truth)
    return (pred - truth).pow(2).mean(dim=(1, 2, 3)).numpy()


def mse_sum_framewise(pred, truth) -> np.ndarray:
    """Per-image sum of squared error (the scale MNIST prediction results are usually quoted in)."""
    pred, truth = _pair(pred, truth)
    return (pred - truth).pow(2).sum(dim=(1, 2, 3)).numpy()


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    kernel = torch.exp(-coords.pow(2) / (2 * sigma**2))
    kernel = kernel / kernel.sum()
    return torch.outer(kernel, kernel).view(1, 1, size, size)


def ssim_framewise(pred, truth, data_range: float = 1.0) -> np.ndarray:
    """Gaussian-window SSIM over the valid region, averaged over channels."""
    pred, truth = _pair(pred, truth)
    n_frames, height, width, channels = pred.shape
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise ContractError(
            f"Frames of {height}x{width} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    window = _gaussian_window()

    def planes(x: torch.Tensor) -> torch.Tensor:
        return x.permute(0, 3, 1, 2).reshape(n_frames * channels, 1, height, width)

    a, b = planes(pred), planes(truth)
    mu_a = F.conv2d(a, window)
    mu_b = F.conv2d(b, window)
    var_a = F.conv2d(a * a, window) - mu_a.pow(2)
    var_b = F.conv2d(b * b, window) - mu_b.pow(2)
    cov = F.conv2d(a * b, window) - mu_a * mu_b

    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a.pow(2) + mu_b.pow(2) + c1) * (var_a + var_b + c2)
    )
    per_plane = ssim_map.mean(dim=(1, 2, 3)).view(n_frames, channels)
    return per_plane.mean(dim=1).numpy()


def psnr_framewise(pred, truth, data_range: float = 1.0, cap: float = PSNR_CAP) -> np.ndarray:
    mse = mse_framewise(pred, truth)
    with np.errstate(divide="ignore"):
        psnr = 10.0 * np.log10(data_range**2 / mse)
    return np.minimum(psnr, cap)


def copy_last_frame_baseline(context, pred_len: int):
    """Repeat the final context frame pred_len times, keeping the input's type."""
    if pred_len < 0:
        raise ContractError(f"pred_len must be >= 0, got {pred_len}")
    if isinstance(context, torch.Tensor):
        return context[-1:].repeat(pred_len, *([1] * (context.dim() - 1)))
    context = np.asarray(context)
    return np.repeat(context[-1:], pred_len, axis=0)


###
# REPORTS
###


def frame_report(pred, truth) -> MetricReport:
    """Single-sample report for one predicted clip against its ground truth."""
    per_frame_mse = mse_framewise(pred, truth)
    per_frame_mse_sum = mse_sum_framewise(pred, truth)
    per_frame_ssim = ssim_framewise(pred, truth)
    per_frame_psnr = psnr_framewise(pred, truth)
    return _report(per_frame_mse, per_frame_mse_sum, per_frame_ssim, per_frame_psnr, 1, [])


def _report(mse, mse_sum, ssim, psnr, n_samples: int, samples: list) -> MetricReport:
    return MetricReport(
        per_frame_mse=mse,
        per_frame_mse_sum=mse_sum,
        per_frame_ssim=ssim,
        per_frame_psnr=psnr,
        mse_mean=float(np.mean(mse)) if len(mse) else 0.0,
        mse_sum=float(np.mean(mse_sum)) if len(mse_sum) else 0.0,
        ssim_mean=float(np.mean(ssim)) if len(ssim) else 0.0,
        psnr_mean=float(np.mean(psnr)) if len(psnr) else 0.0,
        n_samples=n_samples,
        samples=samples,
    )


def average_reports(reports: list[MetricReport], samples: list | None = None) -> MetricReport:
    if not reports:
        raise ContractError("No reports to average")

    def mean_of(field: str) -> np.ndarray:
        return np.mean(np.stack([getattr(r, field) for r in reports]), axis=0)

    n_samples = len(samples) if samples else reports[0].n_samples
    return _report(
        mean_of("per_frame_mse"),
        mean_of("per_frame_mse_sum"),
        mean_of("per_frame_ssim"),
        mean_of("per_frame_psnr"),
        n_samples,
        samples or [],
    )


def report_to_dict(report: MetricReport) -> dict:
    return {
        "per_frame_mse": np.asarray(report.per_frame_mse).tolist(),
        "per_frame_mse_sum": np.asarray(report.per_frame_mse_sum).tolist(),
        "per_frame_ssim": np.asarray(report.per_frame_ssim).tolist(),
        "per_frame_psnr": np.asarray(report.per_frame_psnr).tolist(),
        "mse_mean": report.mse_mean,
        "mse_sum": report.mse_sum,
        "ssim_mean": report.ssim_mean,
        "psnr_mean": report.psnr_mean,
        "n_samples": report.n_samples,
        "samples": [report_to_dict(sample) for sample in report.samples],
    }


def report_from_dict(data: dict) -> MetricReport:
    try:
        return MetricReport(
            per_frame_mse=np.asarray(data["per_frame_mse"], dtype=np.float64),
            per_frame_mse_sum=np.asarray(data["per_frame_mse_sum"], dtype=np.float64),
            per_frame_ssim=np.asarray(data["per_frame_ssim"], dtype=np.float64),
            per_frame_psnr=np.asarray(data["per_frame_psnr"], dtype=np.float64),
            mse_mean=float(data["mse_mean"]),
            mse_sum=float(data["mse_sum"]),
            ssim_mean=float(data["ssim_mean"]),
            psnr_mean=float(data["psnr_mean"]),
            n_samples=int(data["n_samples"]),
            samples=[report_from_dict(s) for s in data.get("samples", [])],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ContractError(f"Not a metric report: {e}") from e


###
# PROTOCOL
###


def derived_seed(seed: int, sequence_index: int, sample_index: int) -> int:
    """Seed for one rollout; independent of how many samples are drawn."""
    sequence = np.random.SeedSequence([seed, sequence_index, sample_index])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _clip_of(item) -> torch.Tensor:
    """A dataset item as a [C, T, H, W] float32 tensor."""
    if isinstance(item, VideoSequence):
        return frames_to_tensor(item.frames)
    if isinstance(item, torch.Tensor):
        return item.float()
    return frames_to_tensor(np.asarray(item, dtype=np.float32))


def _check_length(clip: torch.Tensor, index: int, context_len: int, pred_len: int) -> None:
    if clip.shape[1] < context_len + pred_len:
        raise ContractError(
            f"Sequence {index} has {clip.shape[1]} frames; "
            f"context {context_len} + prediction {pred_len} needed"
        )


def evaluate_stochastic(
    model: VRNN,
    testset,
    n_samples: int = 50,
    context_len: int = 10,
    pred_len: int = 10,
    seed: int = 0,
) -> MetricReport:
    """Average framewise metrics over n_samples prior rollouts per test sequence.

    samples[s] holds the test-set report of rollout s; the aggregate is the
    mean of those per-sample reports. Every rollout draws from its own
    generator, so global RNG state is left alone.
    """
    if n_samples < 1:
        raise ContractError(f"n_samples must be >= 1, got {n_samples}")
    if len(testset) == 0:
        raise ContractError("Empty test set")
    device = next(model.parameters()).device

    per_sample: list[list[MetricReport]] = [[] for _ in range(n_samples)]
    for index in range(len(testset)):
        clip = _clip_of(testset[index])
        _check_length(clip, index, context_len, pred_len)
        context = clip[:, :context_len].unsqueeze(0).to(device)
        truth = tensor_to_frames(clip[:, context_len : context_len + pred_len])

        seeds = [derived_seed(seed, index, s) for s in range(n_samples)]
        predictions = model.rollout(context.expand(n_samples, -1, -1, -1, -1), pred_len, seeds)
        for s in range(n_samples):
            per_sample[s].append(frame_report(tensor_to_frames(predictions[s]), truth))

    samples = [average_reports(reports) for reports in per_sample]
    return average_reports(samples, samples=samples)


def evaluate_baseline(testset, context_len: int = 10, pred_len: int = 10) -> MetricReport:
    if len(testset) == 0:
        raise ContractError("Empty test set")
    reports = []
    for index in range(len(testset)):
        clip = _clip_of(testset[index])
        _check_length(clip, index, context_len, pred_len)
        frames = tensor_to_frames(clip)
        prediction = copy_last_frame_baseline(frames[:context_len], pred_len)
        reports.append(frame_report(prediction, frames[context_len : context_len + pred_len]))
    return average_reports(reports)
