"""Procedural fundus-like images with known vessel maps.

Used by the test suite and for offline smoke runs: the real datasets cannot be
redistributed, so these write files in the exact on-disk layouts the loaders
expect.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

NATIVE_SHAPES = {"drive": (584, 565), "stare": (605, 700), "chase": (960, 999)}


def _grow_tree(draw: ImageDraw.ImageDraw, rng, x, y, angle, width, length, depth):
    segments = int(rng.integers(6, 12))
    step = length / segments
    for _ in range(segments):
        angle += rng.normal(0.0, 0.18)
        nx, ny = x + step * np.cos(angle), y + step * np.sin(angle)
        draw.line([(x, y), (nx, ny)], fill=255, width=max(1, int(round(width))))
        x, y = nx, ny
        if depth > 0 and rng.random() < 0.25:
            side = rng.choice((-1.0, 1.0))
            _grow_tree(draw, rng, x, y, angle + side * rng.uniform(0.4, 1.0),
                       width * 0.7, length * 0.55, depth - 1)
        width *= 0.96


def synthetic_fundus(shape=(584, 565), seed: int = 0):
    """Return (rgb uint8 image, vessel bool map, fov bool mask) of the given (H, W)."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = h / 2.0, w / 2.0
    radius = 0.46 * min(h, w)
    fov = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2

    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    disc_x = cx + rng.choice((-1, 1)) * 0.25 * radius
    disc_y = cy + rng.uniform(-0.1, 0.1) * radius
    base_width = max(2.0, min(h, w) / 90.0)
    for k in range(int(rng.integers(5, 8))):
        angle = 2 * np.pi * k / 6 + rng.normal(0, 0.3)
        _grow_tree(draw, rng, disc_x, disc_y, angle, base_width, 0.9 * radius, depth=3)
    vessels = (np.asarray(canvas) > 127) & fov

    # background: warm retina with illumination falloff, darker vessels, mild blur + noise
    falloff = 1.0 - 0.35 * ((yy - cy) ** 2 + (xx - cx) ** 2) / radius ** 2
    disc = np.exp(-((yy - disc_y) ** 2 + (xx - disc_x) ** 2) / (2 * (0.08 * radius) ** 2))
    base = np.stack([190 * falloff, 90 * falloff, 40 * falloff], axis=-1)
    base += 60 * disc[..., None]
    vessel_soft = np.asarray(
        Image.fromarray((vessels * 255).astype(np.uint8)).filter(ImageFilter.GaussianBlur(0.8)),
        dtype=np.float64,
    ) / 255.0
    base *= 1.0 - np.array([0.35, 0.55, 0.45]) * vessel_soft[..., None]
    base += rng.normal(0.0, 4.0, size=base.shape)
    base *= fov[..., None]
    image = np.clip(base, 0, 255).astype(np.uint8)
    return image, vessels, fov


def _save_gray(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def write_drive_layout(root, n_train: int = 20, n_test: int = 20, shape=None, seed: int = 0) -> Path:
    """DRIVE-style tree: ``{training,test}/{images,1st_manual,mask}``."""
    root = Path(root)
    shape = shape or NATIVE_SHAPES["drive"]
    parts = [("training", range(21, 21 + n_train), "training"), ("test", range(1, 1 + n_test), "test")]
    for folder, ids, tag in parts:
        for sub in ("images", "1st_manual", "mask"):
            (root / folder / sub).mkdir(parents=True, exist_ok=True)
        for i in ids:
            image, gt, fov = synthetic_fundus(shape, seed=seed * 1000 + i)
            Image.fromarray(image).save(root / folder / "images" / f"{i:02d}_{tag}.tif")
            _save_gray(gt, root / folder / "1st_manual" / f"{i:02d}_manual1.gif")
            _save_gray(fov, root / folder / "mask" / f"{i:02d}_{tag}_mask.gif")
    return root


def write_stare_layout(root, n: int = 20, shape=None, seed: int = 0) -> Path:
    root = Path(root)
    shape = shape or NATIVE_SHAPES["stare"]
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels-ah").mkdir(parents=True, exist_ok=True)
    for i in range(1, n + 1):
        image, gt, _ = synthetic_fundus(shape, seed=seed * 1000 + i)
        Image.fromarray(image).save(root / "images" / f"im{i:04d}.ppm")
        _save_gray(gt, root / "labels-ah" / f"im{i:04d}.ah.ppm")
    return root


def write_chase_layout(root, n: int = 28, shape=None, seed: int = 0) -> Path:
    root = Path(root)
    shape = shape or NATIVE_SHAPES["chase"]
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels-1st").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        stem = f"Image_{i // 2 + 1:02d}{'LR'[i % 2]}"
        image, gt, _ = synthetic_fundus(shape, seed=seed * 1000 + i)
        Image.fromarray(image).save(root / "images" / f"{stem}.jpg", quality=95)
        _save_gray(gt, root / "labels-1st" / f"{stem}_1stHO.png")
    return root


def stripe_task(n: int = 8, size: int = 8, seed: int = 0):
    """Toy pairs where the vessel is a fixed vertical stripe that is visible in the image.

    Returns float64 arrays: images (n, 3, size, size), vessel maps (n, 1, size, size).
    """
    rng = np.random.default_rng(seed)
    stripe = np.zeros((size, size))
    stripe[:, size // 2 - 1: size // 2 + 1] = 1.0
    images = rng.normal(0.0, 0.3, size=(n, 3, size, size)) + 2.0 * stripe
    maps = np.broadcast_to(stripe, (n, 1, size, size)).copy()
    return images, maps
