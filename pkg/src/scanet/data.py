"""Dataset ingestion, augmentation, SWPT patch extraction, synthetic sky images."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MASK_THRESHOLD = 128
NIGHT_PREFIX = "n"
GT_SUFFIXES = ("_GT", "_gt")

POSITIVE, NEGATIVE = "positive", "negative"
POS_RATE, NEG_RATE = 0.8, 0.2


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: Tensor  # 1x3xHxW in [-0.5, 0.5]
    mask: Tensor  # 1x1xHxW in {0, 1}
    source_id: str
    subset: str = "day"


@dataclass
class PatchSample:
    patch: Tensor
    label: str
    rate: float


@dataclass
class DatasetIndex:
    train: list[tuple[Path, Path]]
    test: list[tuple[Path, Path]]
    seed: int
    root: Path | None = None
    night_prefix: str = NIGHT_PREFIX

    def subset_of(self, pair: tuple[Path, Path]) -> str:
        return "night" if pair[0].stem.startswith(self.night_prefix) else "day"


def _mask_stem(path: Path) -> str:
    stem = path.stem
    for suf in GT_SUFFIXES:
        if stem.endswith(suf):
            return stem[: -len(suf)]
    return stem


def load_dataset(root, seed: int = 0, night_prefix: str = NIGHT_PREFIX) -> DatasetIndex:
    """Pair ``images/`` with ``GTmaps/`` by stem, shuffle by seed, split 9:1.

    A mask named ``<stem>_GT`` also matches image ``<stem>``. The test set
    gets ``floor(total / 10)`` pairs.
    """
    root = Path(root)
    img_dir, gt_dir = root / "images", root / "GTmaps"
    if not img_dir.is_dir() or not gt_dir.is_dir():
        raise DataError(f"{root} must contain images/ and GTmaps/ directories")
    masks = {}
    for p in sorted(gt_dir.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            masks[_mask_stem(p)] = p
    pairs = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem not in masks:
            raise DataError(f"no ground-truth mask for image {p.stem!r} in {gt_dir}")
        pairs.append((p, masks[p.stem]))
    if not pairs:
        raise DataError(f"no images found under {img_dir}")
    random.Random(seed).shuffle(pairs)
    n_test = len(pairs) // 10
    return DatasetIndex(pairs[n_test:], pairs[:n_test], seed, root, night_prefix)


def normalize(rgb01: np.ndarray) -> np.ndarray:
    return rgb01 - 0.5


def flip(image: np.ndarray, mask: np.ndarray, horizontal: bool, vertical: bool):
    """Flip NCHW image and mask together."""
    if horizontal:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if vertical:
        image, mask = image[..., ::-1, :], mask[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def _open(path: Path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert(mode)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def prepare(pair: tuple[Path, Path], target_size: int, augment: bool = False, rng=None, subset: str = "day") -> Sample:
    """Decode, resize, optionally flip, normalize one image/mask pair."""
    img_path, mask_path = Path(pair[0]), Path(pair[1])
    img = _open(img_path, "RGB").resize((target_size, target_size), Image.BILINEAR)
    gt = _open(mask_path, "L").resize((target_size, target_size), Image.NEAREST)
    image = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)[None] / 255.0
    mask = (np.asarray(gt) >= MASK_THRESHOLD).astype(np.float32)[None, None]
    if augment:
        rng = rng if rng is not None else np.random.default_rng()
        hflip, vflip = rng.random() < 0.5, rng.random() < 0.5
        image, mask = flip(image, mask, hflip, vflip)
    return Sample(Tensor(normalize(image)), Tensor(mask), img_path.stem, subset)


def augment_sample(sample: Sample, rng) -> Sample:
    """Independent 50% horizontal and vertical flips of an in-memory sample."""
    hflip, vflip = rng.random() < 0.5, rng.random() < 0.5
    image, mask = flip(sample.image.data, sample.mask.data, hflip, vflip)
    return Sample(Tensor(image), Tensor(mask), sample.source_id, sample.subset)


def tile_cloud_counts(mask: Tensor, grid: int = 4) -> np.ndarray:
    """Cloud pixel count of each tile in a ``grid`` x ``grid`` tiling, shape ``(grid, grid)``."""
    h, w = mask.shape[2:]
    if h % grid or w % grid:
        raise DataError(f"mask size {h}x{w} is not divisible by {grid}")
    tiles = (mask.data[0, 0] > 0.5).reshape(grid, h // grid, grid, w // grid)
    return tiles.sum(axis=(1, 3), dtype=np.int64)


def swpt_extract(image: Tensor, mask: Tensor, grid: int = 4) -> list[PatchSample]:
    """Split into a grid x grid tiling; keep tiles with cloud rate > 0.8 or < 0.2."""
    counts = tile_cloud_counts(mask, grid)
    ph, pw = mask.shape[2] // grid, mask.shape[3] // grid
    out = []
    for r in range(grid):
        for c in range(grid):
            rate = int(counts[r, c]) / (ph * pw)
            if rate > POS_RATE:
                label = POSITIVE
            elif rate < NEG_RATE:
                label = NEGATIVE
            else:
                continue
            patch = image.data[:, :, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw]
            out.append(PatchSample(Tensor(patch.copy()), label, rate))
    return out


@dataclass
class PatchSummary:
    positive: int = 0
    negative: int = 0
    ignored: int = 0
    patches: list[PatchSample] = field(default_factory=list)


def build_patch_set(samples: Sequence[Sample], grid: int = 4) -> PatchSummary:
    summary = PatchSummary()
    for s in samples:
        found = swpt_extract(s.image, s.mask, grid)
        summary.patches.extend(found)
        summary.positive += sum(p.label == POSITIVE for p in found)
        summary.negative += sum(p.label == NEGATIVE for p in found)
        summary.ignored += grid * grid - len(found)
    return summary


# ---------------------------------------------------------------------------
# synthetic sky images


def _value_noise(rng, size: int, octaves: int = 4, base_cells: int = 3) -> np.ndarray:
    total = np.zeros((size, size))
    amp = 1.0
    for o in range(octaves):
        cells = base_cells * 2**o
        grid = rng.random((cells + 1, cells + 1))
        pos = np.linspace(0, cells, size, endpoint=False)
        i0 = pos.astype(int)
        t = pos - i0
        t = t * t * (3 - 2 * t)  # smoothstep
        rows = grid[i0] * (1 - t)[:, None] + grid[i0 + 1] * t[:, None]
        layer = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
        total += amp * layer
        amp *= 0.5
    return total


def synth_image(rng, size: int, night: bool = False, cover: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One (3xHxW image in [0,1], HxW binary mask) pair.

    Cloud cover is drawn from [0.25, 0.75] unless ``cover`` fixes it.
    """
    noise = _value_noise(rng, size)
    drawn = rng.uniform(0.25, 0.75)
    cover = drawn if cover is None else cover
    thr = np.quantile(noise, 1 - cover)
    mask = noise >= thr if cover >= 1 else noise > thr
    y = np.linspace(0, 1, size)[:, None]
    sky_top = rng.uniform(0.15, 0.35), rng.uniform(0.35, 0.55), rng.uniform(0.7, 0.95)
    sky = np.stack([np.broadcast_to(c + 0.15 * y, (size, size)) for c in sky_top])
    depth = (noise - thr) / max(noise.max() - thr, 1e-6)
    shade = rng.uniform(0.75, 0.95) - 0.2 * depth
    cloud = np.stack([shade, shade, shade + 0.03])
    img = np.where(mask[None], cloud, sky)
    if night:
        img = img * 0.35
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1), mask


def synth_generate(
    count: int, size: int, seed: int, night_fraction: float = 0.0, cover: float | None = None
) -> list[Sample]:
    """Deterministic procedural sky/cloud samples; masks are exact."""
    if count <= 0:
        raise ValueError("count must be positive")
    if size % 16:
        raise ValueError(f"size must be divisible by 16, got {size}")
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        night = i < round(count * night_fraction)
        img, mask = synth_image(rng, size, night, cover)
        # quantize to 8 bits so exported files reload identically
        img = np.round(img * 255) / 255
        prefix = NIGHT_PREFIX if night else "d"
        out.append(
            Sample(
                Tensor(normalize(img[None])),
                Tensor(mask[None, None].astype(np.float32)),
                f"{prefix}synth{i:04d}",
                "night" if night else "day",
            )
        )
    return out


def export_dataset(samples: Sequence[Sample], root) -> Path:
    """Write samples as ``root/images/<id>.png`` + ``root/GTmaps/<id>.png``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "GTmaps").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round((s.image.data[0] + 0.5) * 255).clip(0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb).save(root / "images" / f"{s.source_id}.png")
        gt = (s.mask.data[0, 0] > 0.5).astype(np.uint8) * 255
        Image.fromarray(gt).save(root / "GTmaps" / f"{s.source_id}.png")
    return root


def stack(samples: Sequence[Sample]) -> tuple[Tensor, Tensor]:
    """Batch samples into (n,3,H,W) images and (n,1,H,W) masks."""
    return (
        Tensor(np.concatenate([s.image.data for s in samples])),
        Tensor(np.concatenate([s.mask.data for s in samples])),
    )
