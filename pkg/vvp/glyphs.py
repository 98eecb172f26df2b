import gzip
import os

import numpy as np
from errors import ContractError
from PIL import Image, ImageDraw, ImageFilter, ImageFont

GLYPH_SIZE = 28
IDX_IMAGES_MAGIC = 2051

# (rotation degrees, stroke width, font size) per fallback variation
_FALLBACK_VARIATIONS = [
    (0, 0, 22),
    (-12, 0, 22),
    (12, 0, 22),
    (0, 1, 20),
    (-8, 1, 20),
    (8, 1, 20),
    (-18, 0, 24),
    (18, 0, 24),
    (5, 1, 18),
    (-5, 1, 18),
]


def _load_font(size: int) -> ImageFont.ImageFont | ImageFont.FreeTypeFont:
    try:
        return ImageFont.load_default(size=size)
    except (TypeError, OSError, AttributeError):
        return ImageFont.load_default()


def _render_digit(digit: int, rotation: int, stroke: int, size: int) -> np.ndarray:
    canvas = Image.new("L", (GLYPH_SIZE * 2, GLYPH_SIZE * 2), color=0)
    draw = ImageDraw.Draw(canvas)
    font = _load_font(size)
    text = str(digit)
    left, top, right, bottom = draw.textbbox((0, 0), text, font=font, stroke_width=stroke)
    position = (
        (canvas.width - (right - left)) / 2 - left,
        (canvas.height - (bottom - top)) / 2 - top,
    )
    draw.text(position, text, fill=255, font=font, stroke_width=stroke, stroke_fill=255)
    canvas = canvas.rotate(rotation, resample=Image.Resampling.BILINEAR)
    canvas = canvas.filter(ImageFilter.GaussianBlur(0.6))
    offset = GLYPH_SIZE // 2
    glyph = canvas.crop((offset, offset, offset + GLYPH_SIZE, offset + GLYPH_SIZE))

    pixels = np.asarray(glyph, dtype=np.float32) / 255.0
    peak = pixels.max()
    return pixels / peak if peak > 0 else pixels


def fallback_glyph_bank() -> np.ndarray:
    """100 procedurally drawn 28x28 digit glyphs (10 variations of 0-9)."""
    glyphs = [
        _render_digit(digit, rotation, stroke, size)
        for rotation, stroke, size in _FALLBACK_VARIATIONS
        for digit in range(10)
    ]
    return np.stack(glyphs).astype(np.float32)


def _read_idx_images(path: str) -> np.ndarray:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        data = f.read()
    header = np.frombuffer(data[:16], dtype=">i4")
    if header[0] != IDX_IMAGES_MAGIC:
        raise ContractError(f"{path} is not an idx image file")
    count, rows, cols = (int(v) for v in header[1:])
    return np.frombuffer(data[16:], dtype=np.uint8).reshape(count, rows, cols)


def load_glyph_bank(path: str | None = None) -> np.ndarray:
    """Load digit images as float32 [N, 28, 28] in [0, 1].

    Reads MNIST idx files (optionally gzipped), .npy arrays or .npz archives
    (key "x_train" or the first array). Without a path, VVP_GLYPHS is used,
    then the bundled fallback bank.
    """
    path = path or os.getenv("VVP_GLYPHS")
    if not path:
        return fallback_glyph_bank()
    if not os.path.exists(path):
        raise FileNotFoundError(f"Glyph bank not found: {path}")

    if path.endswith(".npz"):
        with np.load(path) as archive:
            key = "x_train" if "x_train" in archive.files else archive.files[0]
            images = archive[key]
    elif path.endswith(".npy"):
        images = np.load(path)
    else:
        images = _read_idx_images(path)

    if images.ndim != 3 or images.shape[0] == 0:
        raise ContractError(f"Glyph bank {path} must be a nonempty [N, H, W] array")
    images = images.astype(np.float32)
    if images.max() > 1.0:
        images /= 255.0
    print(f"Loaded {images.shape[0]} glyphs from {path}")
    return images


def resize_glyphs(bank: np.ndarray, size: int) -> np.ndarray:
    if bank.shape[1:] == (size, size):
        return bank
    resized = [
        np.asarray(
            Image.fromarray(glyph.astype(np.float32)).resize(
                (size, size), Image.Resampling.BILINEAR
            ),
            dtype=np.float32,
        )
        for glyph in bank
    ]
    return np.clip(np.stack(resized), 0.0, 1.0)
