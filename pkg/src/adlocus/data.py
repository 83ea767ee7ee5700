"""Image/mask pairs, CSV manifests and a synthetic billboard-scene generator."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError

log = logging.getLogger(__name__)

MODEL_SIZE = (200, 200)
MASK_THRESHOLD = 128


@dataclass
class SamplePair:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    mask: np.ndarray  # (1, H, W) float64 in {0, 1}
    source_id: str


@dataclass
class DatasetManifest:
    entries: list[tuple[Path, Path]]
    split_name: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, start: int, stop: int | None = None, split_name: str | None = None) -> "DatasetManifest":
        return DatasetManifest(self.entries[start:stop], split_name or self.split_name)


def load_image(path, size: tuple[int, int] = MODEL_SIZE) -> tuple[np.ndarray, tuple[int, int]]:
    """Bilinearly resized RGB image as ``(3, H, W)`` in [0, 1], plus its original (width, height)."""
    height, width = size
    with Image.open(path) as img:
        img = img.convert("RGB")
        original = img.size
        img = img.resize((width, height), Image.BILINEAR)
        image = np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0
    return np.ascontiguousarray(image), original


def load_mask(path, size: tuple[int, int] = MODEL_SIZE) -> tuple[np.ndarray, tuple[int, int]]:
    """Nearest-resized mask as ``(1, H, W)`` in {0, 1} (luminance >= 128), plus its original size."""
    height, width = size
    with Image.open(path) as msk:
        msk = msk.convert("L")
        original = msk.size
        msk = msk.resize((width, height), Image.NEAREST)
        mask = (np.asarray(msk) >= MASK_THRESHOLD).astype(np.float64)[None]
    return mask, original


def load_sample(image_path, mask_path, size: tuple[int, int] = MODEL_SIZE) -> SamplePair:
    """Decode a pair and bring both halves to model space independently."""
    image_path, mask_path = Path(image_path), Path(mask_path)
    image, img_size = load_image(image_path, size)
    mask, mask_size = load_mask(mask_path, size)
    if mask_size != img_size:
        log.warning("size mismatch: image %s is %s, mask %s is %s", image_path, img_size, mask_path, mask_size)
    return SamplePair(image, mask, image_path.stem)


def load_arrays(manifest: DatasetManifest, size: tuple[int, int] = MODEL_SIZE) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Every sample of a manifest stacked as ``(N,3,H,W)`` images and ``(N,1,H,W)`` masks."""
    samples = [load_sample(i, m, size) for i, m in manifest.entries]
    if not samples:
        raise ManifestError("manifest has no entries")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks, [s.source_id for s in samples]


def load_manifest(path, split_name: str | None = None, check_exists: bool = True) -> DatasetManifest:
    """Read an ``image,mask`` CSV; relative paths resolve against the CSV's folder."""
    path = Path(path)
    base = path.resolve().parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    header = [c.strip() for c in rows[0]]
    if header != ["image", "mask"]:
        raise ManifestError(f"{path}: header must be 'image,mask', got {','.join(rows[0])!r}")
    entries = []
    seen = set()
    for lineno, row in enumerate(rows[1:], 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
        image, mask = (_resolve(base, c.strip()) for c in row)
        if image in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image path {image}")
        seen.add(image)
        if check_exists:
            for p in (image, mask):
                if not p.is_file():
                    raise ManifestError(f"{path}:{lineno}: missing file {p}")
        entries.append((image, mask))
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    return DatasetManifest(entries, split_name if split_name is not None else path.stem)


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return Path(os.path.normpath(p if p.is_absolute() else base / p))


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest CSV, storing paths relative to its folder where possible."""
    path = Path(path)
    base = path.resolve().parent
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "mask"])
        for image, mask in manifest.entries:
            writer.writerow([_relative(base, Path(image)), _relative(base, Path(mask))])


def _relative(base: Path, p: Path) -> str:
    p = Path(os.path.normpath(p.resolve()))
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return str(p)


@dataclass(frozen=True)
class SynthConfig:
    count: int = 100
    image_size: tuple[int, int] = MODEL_SIZE
    rect_count_range: tuple[int, int] = (1, 3)
    rect_area_fraction: tuple[float, float] = (0.02, 0.25)
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        lo, hi = self.rect_area_fraction
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"rect_area_fraction must satisfy 0 < lo <= hi < 1, got {self.rect_area_fraction}")
        rmin, rmax = self.rect_count_range
        if not 1 <= rmin <= rmax:
            raise ConfigError(f"bad rect_count_range {self.rect_count_range}")
        if min(self.image_size) < 8:
            raise ConfigError(f"image_size too small: {self.image_size}")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth colour gradient plus blocky and fine noise, values in [0, 170]."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    start = rng.uniform(20, 110, size=3)
    slope = rng.uniform(-50, 50, size=(2, 3))
    base = start + yy[..., None] * slope[0] + xx[..., None] * slope[1]
    cell = int(rng.integers(4, 16))
    coarse = rng.normal(0, 18, size=(-(-h // cell), -(-w // cell), 3))
    coarse = coarse.repeat(cell, 0).repeat(cell, 1)[:h, :w]
    fine = rng.normal(0, 10, size=(h, w, 3))
    return np.clip(base + coarse + fine, 0, 170)


def _rect(rng: np.random.Generator, h: int, w: int, lo: float, hi: float) -> tuple[int, int, int, int]:
    total = h * w
    for _ in range(100):
        area = rng.uniform(lo, hi) * total
        aspect = rng.uniform(0.4, 2.5)  # width / height
        rh = int(round(np.sqrt(area / aspect)))
        rw = int(round(area / max(rh, 1)))
        if 1 <= rh <= h and 1 <= rw <= w and lo <= rh * rw / total <= hi:
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            return y0, x0, rh, rw
    raise ConfigError(f"cannot place a rectangle with area fraction in [{lo}, {hi}] on {h}x{w}")


def render_scene(rng: np.random.Generator, config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """One RGB uint8 scene and its uint8 mask (255 = billboard)."""
    h, w = config.image_size
    img = _background(rng, h, w)
    mask = np.zeros((h, w), dtype=bool)
    n_rects = int(rng.integers(config.rect_count_range[0], config.rect_count_range[1] + 1))
    for _ in range(n_rects):
        y0, x0, rh, rw = _rect(rng, h, w, *config.rect_area_fraction)
        fill = rng.uniform(170, 255, size=3)
        border = rng.uniform(200, 255, size=3) * rng.uniform(0.85, 1.0)
        img[y0:y0 + rh, x0:x0 + rw] = fill + rng.normal(0, 6, size=(rh, rw, 3))
        b = min(2, rh // 4, rw // 4)
        if b:
            frame = np.zeros((rh, rw), dtype=bool)
            frame[:b], frame[-b:], frame[:, :b], frame[:, -b:] = True, True, True, True
            img[y0:y0 + rh, x0:x0 + rw][frame] = border
        mask[y0:y0 + rh, x0:x0 + rw] = True
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img, mask.astype(np.uint8) * 255


def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write ``config.count`` PNG scene/mask pairs plus ``manifest.csv`` into ``out_dir``."""
    config.validate()
    out_dir = Path(out_dir)
    img_dir, msk_dir = out_dir / "images", out_dir / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    msk_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    entries = []
    for i in range(config.count):
        img, mask = render_scene(rng, config)
        name = f"synth_{i:05d}.png"
        Image.fromarray(img, "RGB").save(img_dir / name)
        Image.fromarray(mask, "L").save(msk_dir / name)
        entries.append(((img_dir / name).resolve(), (msk_dir / name).resolve()))
    manifest = DatasetManifest(entries, "synthetic")
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
