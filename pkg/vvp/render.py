# trunk-ignore-all(ruff/E402)
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from errors import ContractError
from models import MetricReport
from PIL import Image, ImageDraw, ImageFont

LABEL_WIDTH = 160
HEADER_HEIGHT = 20
CELL_PADDING = 2

color_grid_bg = "#141414"
color_text = "#ffffff"

CURVE_FIELDS = {
    "ssim": ("per_frame_ssim", "SSIM"),
    "mse": ("per_frame_mse", "MSE"),
    "psnr": ("per_frame_psnr", "PSNR (dB)"),
}


def _font() -> ImageFont.ImageFont | ImageFont.FreeTypeFont:
    try:
        return ImageFont.load_default(size=12)
    except TypeError:
        return ImageFont.load_default()


def frame_to_image(frame: np.ndarray, scale: int = 1) -> Image.Image:
    """[H, W, C] float frame in [0, 1] to an 8-bit grayscale or RGB image."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        frame = frame[..., None]
    pixels = (np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if pixels.shape[-1] == 1:
        image = Image.fromarray(pixels[..., 0])
    elif pixels.shape[-1] == 3:
        image = Image.fromarray(pixels)
    else:
        raise ContractError(f"Cannot render {pixels.shape[-1]}-channel frames")
    if scale != 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    return image


def grid_shape(sequences: list[tuple[str, np.ndarray]], stride: int = 1) -> tuple[int, int]:
    """(rows, columns) of the grid render_grid draws."""
    if not sequences:
        raise ContractError("Nothing to render")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    lengths = {len(frames) for _, frames in sequences}
    if len(lengths) != 1:
        raise ContractError(f"Sequences differ in length: {sorted(lengths)}")
    n_frames = lengths.pop()
    if n_frames == 0:
        raise ContractError("Sequences have no frames")
    return len(sequences), len(range(0, n_frames, stride))


def render_grid(
    sequences: list[tuple[str, np.ndarray]],
    out_path: str,
    stride: int = 1,
    scale: int = 2,
) -> str:
    """One labeled row per sequence, one column per kept frame index."""
    rows, columns = grid_shape(sequences, stride)
    _, first = sequences[0]
    frame_height, frame_width = first.shape[1] * scale, first.shape[2] * scale
    cell_width = frame_width + CELL_PADDING
    cell_height = frame_height + CELL_PADDING

    image = Image.new(
        "RGB",
        (LABEL_WIDTH + columns * cell_width, HEADER_HEIGHT + rows * cell_height),
        color=color_grid_bg,
    )
    draw = ImageDraw.Draw(image)
    font = _font()

    for column in range(columns):
        draw.text(
            (LABEL_WIDTH + column * cell_width + 2, 4),
            str(column * stride + 1),
            font=font,
            fill=color_text,
        )
    for row, (label, frames) in enumerate(sequences):
        top = HEADER_HEIGHT + row * cell_height
        draw.text(
            (6, top + frame_height // 2 - 6),
            label if len(label) <= 24 else label[:24] + "...",
            font=font,
            fill=color_text,
        )
        for column, frame in enumerate(frames[::stride]):
            tile = frame_to_image(frame, scale).convert("RGB")
            image.paste(tile, (LABEL_WIDTH + column * cell_width, top))

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    image.save(out_path)
    return out_path


def save_frames(frames: np.ndarray, out_dir: str, prefix: str = "frame") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for index, frame in enumerate(frames):
        path = os.path.join(out_dir, f"{prefix}_{index:03d}.png")
        frame_to_image(frame).save(path)
        paths.append(path)
    return paths


def plot_curves(
    reports: dict[str, MetricReport],
    out_path: str,
    metrics: tuple[str, ...] = ("ssim", "mse", "psnr"),
) -> str:
    """Per-frame metric-versus-time lines, one panel per metric, one line per label."""
    if not reports:
        raise ContractError("No reports to plot")
    unknown = [m for m in metrics if m not in CURVE_FIELDS]
    if unknown:
        raise ContractError(f"Unknown metrics: {', '.join(unknown)}")

    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.4))
    axes = np.atleast_1d(axes)
    for ax, metric in zip(axes, metrics):
        field, title = CURVE_FIELDS[metric]
        for label, report in reports.items():
            values = np.asarray(getattr(report, field))
            ax.plot(np.arange(1, len(values) + 1), values, marker="o", markersize=3, label=label)
        ax.set_xlabel("Predicted frame")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


SWEEP_FIELDS = {"ssim": ("ssim_mean", "SSIM"), "mse": ("mse_mean", "MSE"), "psnr": ("psnr_mean", "PSNR (dB)")}


def plot_sweep(
    records: list[dict],
    out_path: str,
    metrics: tuple[str, ...] = ("ssim", "mse", "psnr"),
) -> str:
    """Mean metric against window size, one line per output horizon.

    records carry "window", "horizon" and the *_mean metric keys.
    """
    if not records:
        raise ContractError("No sweep records to plot")
    unknown = [m for m in metrics if m not in SWEEP_FIELDS]
    if unknown:
        raise ContractError(f"Unknown metrics: {', '.join(unknown)}")

    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.4))
    axes = np.atleast_1d(axes)
    horizons = sorted({r["horizon"] for r in records})
    for ax, metric in zip(axes, metrics):
        field, title = SWEEP_FIELDS[metric]
        for horizon in horizons:
            points = sorted((r["window"], r[field]) for r in records if r["horizon"] == horizon)
            ax.plot(*zip(*points), marker="o", markersize=4, label=f"H={horizon}")
        ax.set_xlabel("Window size M")
        ax.set_xticks(sorted({r["window"] for r in records}))
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
