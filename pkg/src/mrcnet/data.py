"""DRIVE / STARE / CHASE_DB1 loading, resize + z-score preprocessing, augmentation.

Expected layouts (paths relative to the dataset root)::

    drive:  training/images, training/1st_manual, training/mask, test/... (same three)
    stare:  images/, labels-ah/            (optional masks/)
    chase:  images/, labels-1st/           (optional masks/)

A split file is plain text, one ``<image id> <train|test>`` pair per line;
``#`` starts a comment.
"""

from __future__ import annotations

import gzip
import io
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, DatasetError, DimensionMismatchError, MissingFileError, UnreadableImageError

log = logging.getLogger(__name__)

DATASETS = ("drive", "stare", "chase")
IMAGE_EXTENSIONS = {".ppm", ".png", ".tif", ".tiff", ".jpg", ".jpeg", ".gif", ".bmp", ".gz"}
STARE_TRAIN_COUNT = 16
CHASE_TRAIN_COUNT = 20


@dataclass
class FundusSample:
    id: str
    image: np.ndarray  # H x W x 3 float64
    gt: np.ndarray  # H x W bool
    fov: np.ndarray | None = None
    native_shape: tuple[int, int] | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DimensionMismatchError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.gt.shape != self.image.shape[:2]:
            raise DimensionMismatchError(f"{self.id}: gt {self.gt.shape} vs image {self.image.shape[:2]}")
        if self.fov is not None and self.fov.shape != self.gt.shape:
            raise DimensionMismatchError(f"{self.id}: fov {self.fov.shape} vs image {self.image.shape[:2]}")
        if self.gt.dtype != bool:
            self.gt = self.gt.astype(bool)
        if self.native_shape is None:
            self.native_shape = tuple(self.gt.shape)


@dataclass
class DatasetSplit:
    name: str
    train: list[FundusSample]
    test: list[FundusSample]

    def __post_init__(self) -> None:
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise DatasetError(f"samples in both train and test: {sorted(overlap)}")

    def map(self, fn) -> "DatasetSplit":
        return DatasetSplit(self.name, [fn(s) for s in self.train], [fn(s) for s in self.test])


# ---------------------------------------------------------------- file reading

def read_image(path: Path, mode: str | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    try:
        if path.suffix.lower() == ".gz":
            with gzip.open(path, "rb") as fh:
                img = Image.open(io.BytesIO(fh.read()))
                img.load()
        else:
            img = Image.open(path)
            img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImageError(f"cannot read {path}: {exc}") from exc
    if mode is not None:
        img = img.convert(mode)
    return np.asarray(img)


def read_rgb(path: Path) -> np.ndarray:
    return read_image(path, "RGB").astype(np.float64)


def read_binary(path: Path) -> np.ndarray:
    """Grayscale label or mask image thresholded at 50% gray."""
    arr = read_image(path, "L")
    return arr >= 128


def _stem(path: Path) -> str:
    name = path.name
    if name.lower().endswith(".gz"):
        name = name[:-3]
    return name.rsplit(".", 1)[0] if "." in name else name


def _image_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise MissingFileError(f"missing directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise MissingFileError(f"no images found in {directory}")
    return files


def _match(key: str, candidates: Sequence[Path], what: str, image: Path) -> Path:
    hits = [p for p in candidates if _stem(p) == key or _stem(p).startswith((key + "_", key + "."))]
    if not hits:
        raise MissingFileError(f"no {what} file for {image} in {candidates[0].parent if candidates else '?'}")
    if len(hits) > 1:
        raise DatasetError(f"ambiguous {what} files for {image}: {[h.name for h in hits]}")
    return hits[0]


def _load_pairs(image_dir: Path, label_dir: Path, mask_dir: Path | None, key_fn) -> list[FundusSample]:
    labels = _image_files(label_dir)
    masks = _image_files(mask_dir) if mask_dir is not None and mask_dir.is_dir() else None
    samples = []
    for img_path in _image_files(image_dir):
        key = key_fn(img_path)
        image = read_rgb(img_path)
        gt = read_binary(_match(key, labels, "label", img_path))
        if gt.shape != image.shape[:2]:
            raise DimensionMismatchError(f"{img_path.name}: label {gt.shape} vs image {image.shape[:2]}")
        fov = None
        if masks is not None:
            fov = read_binary(_match(key, masks, "mask", img_path))
            if fov.shape != image.shape[:2]:
                raise DimensionMismatchError(f"{img_path.name}: mask {fov.shape} vs image {image.shape[:2]}")
        samples.append(FundusSample(id=_stem(img_path), image=image, gt=gt, fov=fov))
    return samples


def read_split_file(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing split file: {path}")
    split = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise DatasetError(f"{path}:{lineno}: expected '<id> train|test', got {line!r}")
        if parts[0] in split:
            raise DatasetError(f"{path}:{lineno}: id {parts[0]} listed twice")
        split[parts[0]] = parts[1]
    return split


def write_split_file(path: Path, train_ids: Sequence[str], test_ids: Sequence[str]) -> None:
    lines = [f"{i} train" for i in train_ids] + [f"{i} test" for i in test_ids]
    Path(path).write_text("\n".join(lines) + "\n")


def _apply_split(name: str, samples: list[FundusSample], split: dict[str, str]) -> DatasetSplit:
    by_id = {s.id: s for s in samples}
    unknown = sorted(set(split) - set(by_id))
    if unknown:
        raise MissingFileError(f"split file lists ids with no image: {unknown}")
    train = [s for s in samples if split.get(s.id) == "train"]
    test = [s for s in samples if split.get(s.id) == "test"]
    return DatasetSplit(name, train, test)


def _order_split(name: str, samples: list[FundusSample], n_train: int) -> DatasetSplit:
    if len(samples) <= n_train:
        raise DatasetError(f"{name}: need more than {n_train} images for the default split, found {len(samples)}")
    return DatasetSplit(name, samples[:n_train], samples[n_train:])


def load_dataset(root, name: str, split_file=None) -> DatasetSplit:
    """Load one of the three fundus datasets, ordered lexicographically by filename.

    DRIVE uses its shipped training/test folders; CHASE takes the first 20 images
    for training; STARE takes the first 16. A split file overrides the default.
    """
    root = Path(root)
    name = name.lower()
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if not root.is_dir():
        raise MissingFileError(f"dataset root does not exist: {root}")

    if name == "drive":
        drive_key = lambda p: _stem(p).split("_")[0]
        train = _load_pairs(root / "training" / "images", root / "training" / "1st_manual",
                            root / "training" / "mask", drive_key)
        test = _load_pairs(root / "test" / "images", root / "test" / "1st_manual",
                           root / "test" / "mask", drive_key)
        if split_file is not None:
            return _apply_split(name, train + test, read_split_file(split_file))
        return DatasetSplit(name, train, test)

    label_dir = root / ("labels-ah" if name == "stare" else "labels-1st")
    mask_dir = next((root / d for d in ("masks", "mask") if (root / d).is_dir()), None)
    samples = _load_pairs(root / "images", label_dir, mask_dir, _stem)
    if split_file is not None:
        return _apply_split(name, samples, read_split_file(split_file))
    return _order_split(name, samples, STARE_TRAIN_COUNT if name == "stare" else CHASE_TRAIN_COUNT)


# ---------------------------------------------------------------- preprocessing

def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[:2] == tuple(size):
        return image.astype(np.float64, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64).transpose(2, 0, 1))[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0).copy()


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(size):
        return mask.astype(bool, copy=True)
    t = torch.from_numpy(mask.astype(np.float64))[None, None]
    out = F.interpolate(t, size=tuple(size), mode="nearest-exact")
    return out[0, 0].numpy() >= 0.5


def resize_prob(prob: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return resize_image(prob[..., None], size)[..., 0].clip(0.0, 1.0)


def zscore(image: np.ndarray) -> tuple[np.ndarray, list[str]]:
    out = image.astype(np.float64, copy=True)
    notes = []
    for ch in range(out.shape[2]):
        mean = out[..., ch].mean()
        std = out[..., ch].std()
        out[..., ch] -= mean
        if std > 1e-12:
            out[..., ch] /= std
        else:
            notes.append(f"channel {ch} has zero variance; scaling skipped")
    return out, notes


def preprocess(sample: FundusSample, target_size: int = 640) -> FundusSample:
    """Square bilinear resize of the image (nearest for gt/fov) then per-channel z-score."""
    size = (target_size, target_size)
    image, notes = zscore(resize_image(sample.image, size))
    for note in notes:
        warnings.warn(f"{sample.id}: {note}", RuntimeWarning, stacklevel=2)
    return FundusSample(
        id=sample.id,
        image=image,
        gt=resize_mask(sample.gt, size),
        fov=None if sample.fov is None else resize_mask(sample.fov, size),
        native_shape=sample.native_shape,
        warnings=[*sample.warnings, *notes],
    )


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    contrast: float | None = None
    hflip: bool = False
    vflip: bool = False
    angle: float | None = None  # degrees, counter-clockwise


def draw_augmentation(rng: np.random.Generator, p: float = 0.5) -> AugmentParams:
    # draw every variate unconditionally so the stream length never depends on the coins
    coins = rng.random(4) < p
    factor = float(rng.uniform(0.8, 1.25))
    angle = float(rng.uniform(1.0, 360.0))
    return AugmentParams(
        contrast=factor if coins[0] else None,
        hflip=bool(coins[1]),
        vflip=bool(coins[2]),
        angle=angle if coins[3] else None,
    )


def _rotate(arr: np.ndarray, angle: float, order: int) -> np.ndarray:
    quarter = angle / 90.0
    if float(quarter).is_integer():
        return np.rot90(arr, k=int(quarter) % 4, axes=(0, 1)).copy()
    return ndimage.rotate(arr, angle, axes=(1, 0), reshape=False, order=order, mode="constant", cval=0.0)


def _geometric(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    if params.hflip:
        arr = arr[:, ::-1]
    if params.vflip:
        arr = arr[::-1, :]
    if params.angle is not None:
        arr = _rotate(arr, params.angle, order)
    return np.ascontiguousarray(arr)


def transform_map(arr: np.ndarray, params: AugmentParams, binary: bool = False) -> np.ndarray:
    """Apply only the geometric part of ``params`` to a 2-D or H x W x C array."""
    if binary:
        return _geometric(arr.astype(np.uint8), params, order=0).astype(bool)
    return _geometric(arr, params, order=1)


def apply_augmentation(sample: FundusSample, params: AugmentParams) -> FundusSample:
    image = sample.image
    if params.contrast is not None:
        mean = image.mean(axis=(0, 1), keepdims=True)
        image = (image - mean) * params.contrast + mean
    return FundusSample(
        id=sample.id,
        image=transform_map(image, params),
        gt=transform_map(sample.gt, params, binary=True),
        fov=None if sample.fov is None else transform_map(sample.fov, params, binary=True),
        native_shape=sample.native_shape,
        warnings=list(sample.warnings),
    )


def augment(sample: FundusSample, rng: np.random.Generator) -> FundusSample:
    return apply_augmentation(sample, draw_augmentation(rng))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (epoch, sample) so prefetch order cannot change draws."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def iter_batches(samples: Sequence[FundusSample], batch_size: int, seed: int, epoch: int,
                 augment_data: bool = True, shuffle: bool = True) -> Iterator[list[FundusSample]]:
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng([int(seed), int(epoch), 2**31 - 1]).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        batch = []
        for idx in order[start:start + batch_size]:
            s = samples[idx]
            batch.append(augment(s, sample_rng(seed, epoch, idx)) if augment_data else s)
        yield batch


def to_tensors(batch: Sequence[FundusSample], dtype=torch.float32, device="cpu"):
    images = np.stack([s.image.transpose(2, 0, 1) for s in batch])
    gts = np.stack([s.gt[None] for s in batch]).astype(np.float64)
    return (torch.as_tensor(images, dtype=dtype, device=device),
            torch.as_tensor(gts, dtype=dtype, device=device))
