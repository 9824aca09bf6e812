"""Image/mask ingestion, dataset splits and synthetic chest phantoms.

On disk a dataset is two directories of PNG files matched by filename stem::

    root/images/<id>.png
    root/masks/<id>.png
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .tensor import Tensor

__all__ = [
    "SamplePair",
    "DatasetSplit",
    "read_png",
    "load_pair",
    "load_directory",
    "split_dataset",
    "read_manifest",
    "write_manifest",
    "synth_phantoms",
    "write_dataset",
    "save_mask_png",
    "save_image_png",
    "save_overlay_png",
    "stack_batch",
]

logger = logging.getLogger(__name__)


@dataclass
class SamplePair:
    image: Tensor
    mask: Tensor
    id: str

    def __post_init__(self):
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ in size")


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: Optional[int] = None

    def __post_init__(self):
        sets = [set(self.train), set(self.validation), set(self.test)]
        if sum(map(len, sets)) != len(sets[0] | sets[1] | sets[2]):
            raise ValueError("train, validation and test ids must be pairwise disjoint")


def _parse_size(target) -> tuple[int, int]:
    if isinstance(target, int):
        return target, target
    h, w = target
    return int(h), int(w)


def read_png(path) -> np.ndarray:
    """Read a PNG as a float32 (H, W) array scaled to [0, 1].

    8- and 16-bit grayscale are scaled by their full range; colour images are
    converted to luminance first.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if img.width == 0 or img.height == 0:
        raise ValueError(f"{path} has zero size")
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif img.mode == "F":
        arr = np.asarray(img, dtype=np.float64)
    else:
        if img.mode != "L":
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _resize(arr: np.ndarray, size: tuple[int, int], resample) -> np.ndarray:
    h, w = size
    if arr.shape == (h, w):
        return arr
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(img.resize((w, h), resample=resample), dtype=np.float32)


def load_pair(image_path, mask_path, target=(256, 256), id: Optional[str] = None) -> SamplePair:
    """Load an image and its mask resized to ``target`` (H, W).

    The image is resized bilinearly; the mask by nearest neighbour and then
    thresholded at 0.5.
    """
    h, w = _parse_size(target)
    image = _resize(read_png(image_path), (h, w), Image.BILINEAR)
    raw = read_png(mask_path)
    levels = np.unique(raw)
    if levels.size > 2:
        logger.warning("mask %s has %d gray levels; thresholding at 0.5", mask_path, levels.size)
    mask = (_resize(raw, (h, w), Image.NEAREST) >= 0.5).astype(np.float32)
    return SamplePair(
        image=Tensor(image[None, None]),
        mask=Tensor(mask[None, None]),
        id=id if id is not None else Path(image_path).stem,
    )


def load_directory(root, target=(256, 256), ids: Optional[Iterable[str]] = None) -> dict:
    """Load every stem-matched pair under ``root/images`` and ``root/masks``."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and masks/ directories")
    images = {p.stem: p for p in sorted(img_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    wanted = sorted(images.keys() & masks.keys()) if ids is None else list(ids)
    unmatched = sorted(images.keys() ^ masks.keys())
    if unmatched:
        logger.warning("%d files without a partner ignored (e.g. %s)", len(unmatched), unmatched[0])
    missing = [i for i in wanted if i not in images or i not in masks]
    if missing:
        raise FileNotFoundError(f"no image/mask pair for ids {missing[:5]}")
    return {i: load_pair(images[i], masks[i], target, id=i) for i in wanted}


def split_dataset(ids: Sequence[str], counts: tuple, seed: int = 0) -> DatasetSplit:
    """Shuffle ``ids`` with ``seed`` and cut consecutive train/val/test runs."""
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split counts must be non-negative")
    need = n_train + n_val + n_test
    ids = list(ids)
    if need > len(ids):
        raise ValueError(f"split needs {need} ids but only {len(ids)} are available (short by {need - len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:need],
        seed=seed,
    )


_MANIFEST_FILES = (("train", "train.txt"), ("validation", "val.txt"), ("test", "test.txt"))


def read_manifest(directory) -> DatasetSplit:
    """Read a pinned split: ``train.txt``, ``val.txt``, ``test.txt``, one id per line."""
    directory = Path(directory)
    parts = {}
    for field, fname in _MANIFEST_FILES:
        path = directory / fname
        lines = path.read_text().splitlines() if path.exists() else []
        parts[field] = [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]
    return DatasetSplit(**parts)


def write_manifest(split: DatasetSplit, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for field, fname in _MANIFEST_FILES:
        (directory / fname).write_text("".join(f"{i}\n" for i in getattr(split, field)))


def _phantom(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx / (w - 1), yy / (h - 1)  # [0, 1] coordinates

    # body silhouette and a smooth background ramp
    body = ((u - 0.5) / 0.46) ** 2 + ((v - 0.55) / 0.52) ** 2 <= 1.0
    ramp = rng.uniform(-0.08, 0.08) * u + rng.uniform(-0.08, 0.08) * v
    image = np.where(body, 0.58, 0.12) + ramp

    # bright central band (mediastinum / spine)
    half = rng.uniform(0.07, 0.09)
    band = np.abs(u - 0.5) <= half
    image = np.where(band & body, 0.86, image)

    mask = np.zeros((h, w), dtype=bool)
    for side in (-1.0, 1.0):
        cx = 0.5 + side * rng.uniform(0.25, 0.28)
        cy = rng.uniform(0.46, 0.52)
        ax = rng.uniform(0.13, 0.16)
        ay = rng.uniform(0.26, 0.32)
        th = np.deg2rad(rng.uniform(-12, 12)) * side
        du, dv = u - cx, v - cy
        ru = du * np.cos(th) + dv * np.sin(th)
        rv = -du * np.sin(th) + dv * np.cos(th)
        lobe = (ru / ax) ** 2 + (rv / ay) ** 2 <= 1.0
        mask |= lobe & ~band
    shade = 0.28 + 0.06 * np.cos(2 * np.pi * (v + rng.uniform())) * np.sin(np.pi * u)
    image = np.where(mask, shade, image)
    image = image + rng.normal(0.0, 0.025, size=(h, w))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def synth_phantoms(n: int, size=(64, 64), seed: int = 0, prefix: str = "phantom") -> list:
    """Generate ``n`` lung-like image/mask pairs with exact labels.

    Each image has a body silhouette on a dark ramped background, a bright
    vertical band in the middle and two dark lateral lobes. The mask is exactly
    the lobe support, which never overlaps the band.
    """
    h, w = _parse_size(size)
    if h < 32 or w < 32:
        raise ValueError(f"phantoms need at least 32x32 pixels, got {h}x{w}")
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        image, mask = _phantom(np.random.default_rng(child), h, w)
        out.append(SamplePair(Tensor(image[None, None]), Tensor(mask[None, None].astype(np.float32)),
                              f"{prefix}_{i:04d}"))
    return out


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _plane(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.reshape(arr.shape[-2:])


def save_mask_png(mask, path) -> None:
    """Write a binary mask as an 8-bit {0, 255} PNG."""
    arr = _plane(mask)
    Image.fromarray(np.where(arr >= 0.5, 255, 0).astype(np.uint8), mode="L").save(path)


def save_image_png(image, path) -> None:
    Image.fromarray(_to_uint8(_plane(image)), mode="L").save(path)


def _boundary(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def save_overlay_png(image, mask, path, color=(255, 0, 0)) -> None:
    """Draw the boundary of ``mask`` over the grayscale ``image``."""
    gray = _to_uint8(_plane(image))
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[_boundary(_plane(mask) >= 0.5)] = color
    Image.fromarray(rgb, mode="RGB").save(path)


def write_dataset(samples: Iterable[SamplePair], root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image_png(s.image, root / "images" / f"{s.id}.png")
        save_mask_png(s.mask, root / "masks" / f"{s.id}.png")
    return root


def stack_batch(samples: Sequence[SamplePair]) -> tuple[Tensor, Tensor]:
    """Concatenate samples along the batch axis into (images, masks)."""
    images = np.concatenate([s.image.data for s in samples], axis=0)
    masks = np.concatenate([s.mask.data for s in samples], axis=0)
    return Tensor(images, dtype=images.dtype), Tensor(masks, dtype=masks.dtype)
