import hashlib
import json
import math
import os
import re
from itertools import accumulate

import numpy as np
import torch
from errors import ContractError, CorruptDatasetError
from glyphs import GLYPH_SIZE, load_glyph_bank, resize_glyphs
from models import DatasetManifest, DigitState, VideoSequence
from PIL import Image, UnidentifiedImageError
from semver import Version
from torch.utils.data import Dataset

STORE_VERSION = "1.0.0"
MANIFEST_FILE = "manifest.json"
DATA_FILE = "data.bin"
FRAME_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")

DEFAULT_SPLITS = {"train": 10000, "val": 1000, "test": 1000}
KTH_TRAIN_PERSONS = frozenset(range(1, 17))
KTH_TEST_PERSONS = frozenset(range(17, 26))


def make_sequence(frames: np.ndarray, source_id: str) -> VideoSequence:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4:
        raise ContractError(f"{source_id}: frames must be [T, H, W, C]")
    if frames.shape[0] < 2:
        raise ContractError(f"{source_id}: at least 2 frames required")
    if frames.shape[1] % 4 or frames.shape[2] % 4:
        raise ContractError(f"{source_id}: frame height/width must be divisible by 4")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ContractError(f"{source_id}: frame values must lie in [0, 1]")
    return VideoSequence(frames=frames, source_id=source_id)


###
# MOVING MNIST
###


def step_digit(state: DigitState, canvas: tuple[int, int]) -> DigitState:
    """Advance one frame; bounce off the canvas edges without losing speed."""
    height, width = canvas
    glyph_h, glyph_w = state.glyph.shape
    limits = (width - glyph_w, height - glyph_h)

    position = list(state.position)
    velocity = list(state.velocity)
    for axis in (0, 1):
        value = position[axis] + velocity[axis]
        upper = limits[axis]
        if upper <= 0:
            # glyph spans the canvas on this axis
            position[axis], velocity[axis] = 0, 0
            continue
        while value < 0 or value > upper:
            if value < 0:
                value = -value
            else:
                value = 2 * upper - value
            velocity[axis] = -velocity[axis]
        position[axis] = value

    return state._replace(position=tuple(position), velocity=tuple(velocity))


def _paste(frame: np.ndarray, glyph: np.ndarray, position: tuple[float, float]) -> None:
    x = int(round(position[0]))
    y = int(round(position[1]))
    h, w = glyph.shape
    region = frame[y : y + h, x : x + w]
    np.maximum(region, glyph, out=region)


def _derived_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _generate_one(
    rng: np.random.Generator,
    bank: np.ndarray,
    n_frames: int,
    n_digits: int,
    canvas: tuple[int, int],
    speed_range: tuple[float, float],
) -> np.ndarray:
    height, width = canvas
    glyph_h, glyph_w = bank.shape[1:]
    digits = []
    for _ in range(n_digits):
        glyph = bank[rng.integers(len(bank))]
        position = (
            rng.uniform(0, width - glyph_w),
            rng.uniform(0, height - glyph_h),
        )
        theta = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(*speed_range)
        velocity = (speed * math.cos(theta), speed * math.sin(theta))
        digits.append(DigitState(glyph=glyph, position=position, velocity=velocity))

    frames = np.zeros((n_frames, height, width, 1), dtype=np.float32)
    for t in range(n_frames):
        for digit in digits:
            _paste(frames[t, :, :, 0], digit.glyph, digit.position)
        digits = [step_digit(digit, canvas) for digit in digits]
    return frames


def generate_moving_mnist(
    n_sequences: int,
    n_frames: int = 20,
    n_digits: int = 2,
    seed: int = 0,
    glyph_bank: np.ndarray | None = None,
    canvas: tuple[int, int] = (64, 64),
    speed_range: tuple[float, float] = (2.0, 5.0),
    glyph_size: int | None = None,
) -> list[VideoSequence]:
    """Bouncing-digit sequences; sequence k draws from the RNG seeded by (seed, k).

    Overlapping digits are composited with an elementwise max. glyph_size
    defaults to 28 on a 64-pixel canvas and scales with smaller canvases.
    """
    if glyph_bank is None or len(glyph_bank) == 0:
        raise ContractError("Glyph bank is empty")
    if n_frames < 2:
        raise ContractError("n_frames must be >= 2")
    if speed_range[0] < 0 or speed_range[1] < speed_range[0]:
        raise ContractError(f"Invalid speed range {speed_range}")
    if glyph_size is None:
        glyph_size = min(GLYPH_SIZE, round(GLYPH_SIZE * min(canvas) / 64))
    if glyph_size > min(canvas):
        raise ContractError(f"{glyph_size}px glyphs do not fit a {canvas} canvas")

    bank = resize_glyphs(np.asarray(glyph_bank, dtype=np.float32), glyph_size)
    return [
        make_sequence(
            _generate_one(
                _derived_rng(seed, k), bank, n_frames, n_digits, canvas, speed_range
            ),
            source_id=f"mnist-{seed}-{k:06d}",
        )
        for k in range(n_sequences)
    ]


###
# VIDEO FOLDERS
###


def _frame_files(folder: str) -> list[str]:
    return sorted(
        os.path.join(folder, name)
        for name in os.listdir(folder)
        if name.lower().endswith(FRAME_EXTENSIONS)
    )


def _read_frame(path: str, target_size: tuple[int, int], grayscale: bool) -> np.ndarray:
    try:
        with Image.open(path) as image:
            image = image.convert("L" if grayscale else "RGB")
            image = image.resize(
                (target_size[1], target_size[0]), Image.Resampling.BILINEAR
            )
            pixels = np.asarray(image, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise ContractError(f"Unreadable frame {path}: {e}") from e
    return pixels[..., None] if grayscale else pixels


def _person_id(name: str) -> int | None:
    match = re.match(r"person(\d+)", name, re.IGNORECASE)
    return int(match.group(1)) if match else None


def load_video_folder(
    path: str,
    target_size: tuple[int, int] = (64, 64),
    grayscale: bool = True,
    persons: frozenset[int] | set[int] | None = None,
) -> list[VideoSequence]:
    """Frame-image folders as sequences, frames ordered by filename.

    A folder of frames yields one sequence; a folder of sub-folders yields one
    sequence per sub-folder. persons keeps only KTH-style personNN_* folders.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(f"Video folder not found: {path}")

    subfolders = sorted(
        name for name in os.listdir(path) if os.path.isdir(os.path.join(path, name))
    )
    if subfolders:
        folders = [(name, os.path.join(path, name)) for name in subfolders]
    else:
        folders = [(os.path.basename(os.path.normpath(path)), path)]

    sequences = []
    for name, folder in folders:
        if persons is not None and _person_id(name) not in persons:
            continue
        files = _frame_files(folder)
        if not files:
            continue
        frames = np.stack([_read_frame(f, target_size, grayscale) for f in files])
        sequences.append(make_sequence(frames, source_id=name))

    if not sequences:
        raise ContractError(f"No frames found under {path}")
    print(f"Loaded {len(sequences)} sequences from {path}")
    return sequences


###
# BINARY STORE
###


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(
    seqs: list[VideoSequence],
    path: str,
    seed: int | None = None,
    params: dict | None = None,
) -> DatasetManifest:
    """Write `<path>/data.bin` (uint8 THWC, little-endian) and `<path>/manifest.json`."""
    if not seqs:
        raise ContractError("Nothing to write")
    frame_size = list(seqs[0].frames.shape[1:])
    os.makedirs(path, exist_ok=True)

    offsets, lengths = [], []
    offset = 0
    with open(os.path.join(path, DATA_FILE), "wb") as f:
        for seq in seqs:
            if list(seq.frames.shape[1:]) != frame_size:
                raise ContractError(f"{seq.source_id}: frame size differs from {frame_size}")
            data = quantize(seq.frames).tobytes(order="C")
            offsets.append(offset)
            lengths.append(int(seq.frames.shape[0]))
            f.write(data)
            offset += len(data)

    manifest = DatasetManifest(
        version=STORE_VERSION,
        dtype="u8",
        shape_order="THWC",
        count=len(seqs),
        frame_size=frame_size,
        seed=seed,
        offsets=offsets,
        lengths=lengths,
        source_ids=[seq.source_id for seq in seqs],
        sha256=_sha256(os.path.join(path, DATA_FILE)),
        params=params or {},
    )
    with open(os.path.join(path, MANIFEST_FILE), "w") as f:
        json.dump(manifest._asdict(), f, indent=2)
    return manifest


def read_manifest(path: str) -> DatasetManifest:
    """Load and validate a store manifest against its data file."""
    manifest_path = os.path.join(path, MANIFEST_FILE)
    data_path = os.path.join(path, DATA_FILE)
    if not os.path.exists(manifest_path) or not os.path.exists(data_path):
        raise FileNotFoundError(f"No dataset store at {path}")

    try:
        with open(manifest_path, "r") as f:
            raw = json.load(f)
        manifest = DatasetManifest(**raw)
    except (json.JSONDecodeError, TypeError) as e:
        raise CorruptDatasetError(f"Invalid manifest in {path}: {e}") from e

    try:
        major = Version.parse(manifest.version).major
    except (TypeError, ValueError) as e:
        raise CorruptDatasetError(f"Invalid store version {manifest.version!r}") from e
    if major != Version.parse(STORE_VERSION).major:
        raise CorruptDatasetError(f"Unsupported store version {manifest.version}")
    if manifest.dtype != "u8" or manifest.shape_order != "THWC":
        raise CorruptDatasetError(f"Unsupported layout {manifest.dtype}/{manifest.shape_order}")
    if not (manifest.count == len(manifest.offsets) == len(manifest.lengths)):
        raise CorruptDatasetError(
            f"Manifest count {manifest.count} does not match "
            f"{len(manifest.offsets)} stored sequences"
        )
    if any(b <= a for a, b in zip(manifest.offsets, manifest.offsets[1:])):
        raise CorruptDatasetError("Manifest offsets are not strictly increasing")

    frame_bytes = int(np.prod(manifest.frame_size))
    sizes = [length * frame_bytes for length in manifest.lengths]
    if list(manifest.offsets) != [0, *accumulate(sizes)][:-1]:
        raise CorruptDatasetError("Manifest offsets do not match sequence lengths")
    expected = sum(sizes)
    actual = os.path.getsize(data_path)
    if actual != expected:
        raise CorruptDatasetError(f"{data_path} holds {actual} bytes, expected {expected}")
    if _sha256(data_path) != manifest.sha256:
        raise CorruptDatasetError(f"Checksum mismatch for {data_path}")
    return manifest


def read_dataset(path: str) -> list[VideoSequence]:
    manifest = read_manifest(path)
    shape = tuple(manifest.frame_size)
    frame_bytes = int(np.prod(shape))
    data = np.fromfile(os.path.join(path, DATA_FILE), dtype=np.uint8)

    seqs = []
    for offset, length, source_id in zip(
        manifest.offsets, manifest.lengths, manifest.source_ids
    ):
        raw = data[offset : offset + length * frame_bytes].reshape(length, *shape)
        seqs.append(
            VideoSequence(frames=raw.astype(np.float32) / 255.0, source_id=source_id)
        )
    return seqs


def write_splits(
    out: str,
    sizes: dict[str, int] | None = None,
    n_frames: int = 20,
    n_digits: int = 2,
    seed: int = 0,
    glyph_bank: np.ndarray | None = None,
    canvas: tuple[int, int] = (64, 64),
    speed_range: tuple[float, float] = (2.0, 5.0),
) -> dict[str, DatasetManifest]:
    """Generate and store train/val/test splits, each with its own derived seed."""
    sizes = sizes or DEFAULT_SPLITS
    if glyph_bank is None:
        glyph_bank = load_glyph_bank()
    manifests = {}
    for index, (split, count) in enumerate(sizes.items()):
        split_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        seqs = generate_moving_mnist(
            count,
            n_frames=n_frames,
            n_digits=n_digits,
            seed=split_seed,
            glyph_bank=glyph_bank,
            canvas=canvas,
            speed_range=speed_range,
        )
        params = {
            "split": split,
            "base_seed": seed,
            "n_frames": n_frames,
            "n_digits": n_digits,
            "canvas": list(canvas),
            "speed_range": list(speed_range),
        }
        manifests[split] = write_dataset(
            seqs, os.path.join(out, split), seed=split_seed, params=params
        )
        print(f"Wrote {count} {split} sequences to {os.path.join(out, split)}")
    return manifests


###
# TORCH ADAPTER
###


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """[T, H, W, C] array to a [C, T, H, W] tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(3, 0, 1, 2).contiguous()


def tensor_to_frames(clip: torch.Tensor) -> np.ndarray:
    """[C, T, H, W] tensor to a [T, H, W, C] array."""
    return clip.detach().cpu().permute(1, 2, 3, 0).numpy()


class SequenceDataset(Dataset):
    def __init__(self, seqs: list[VideoSequence], n_frames: int | None = None) -> None:
        self.seqs = seqs
        self.n_frames = n_frames

    def __len__(self) -> int:
        return len(self.seqs)

    def __getitem__(self, idx: int) -> torch.Tensor:
        frames = self.seqs[idx].frames
        if self.n_frames is not None:
            frames = frames[: self.n_frames]
        return frames_to_tensor(frames)
