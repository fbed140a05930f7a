"""Dataset ingestion and the synthetic defect corpus used for desk-scale runs.

Directory convention (MVTec-AD style):

    root/<category>/train/good/*.png
    root/<category>/test/<defect-or-good>/*.png
    root/<category>/ground_truth/<defect>/<stem>_mask.png

The synthetic generator writes the same layout. Every defective image's
mask marks exactly the pixels that differ from its clean source image
after 8-bit quantization.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# --------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    category: str
    split: str  # "train" or "test"
    defect_type: str  # "good" for defect-free images
    mask_path: Optional[str] = None


@dataclass
class DatasetManifest:
    categories: list[str]
    entries: list[ManifestEntry]
    image_size: tuple[int, int]  # (H, W) of the stored images

    def select(self, split: Optional[str] = None, category: Optional[str] = None) -> list[ManifestEntry]:
        out = self.entries
        if split is not None:
            out = [e for e in out if e.split == split]
        if category is not None:
            out = [e for e in out if e.category == category]
        return out

    def to_csv(self, path, relative_to=None) -> None:
        """Write the manifest; with relative_to set, paths are rebased (portable)."""

        def rel(p):
            if p and relative_to is not None:
                return str(Path(p).relative_to(relative_to))
            return p or ""

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "category", "split", "defect_type", "mask_path"])
            for e in self.entries:
                writer.writerow([rel(e.path), e.category, e.split, e.defect_type, rel(e.mask_path)])


def _read_image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def scan_mvtec_layout(root) -> DatasetManifest:
    """Enumerate an MVTec-layout tree into a manifest, lexicographically ordered."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    categories = sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "train").is_dir())
    if not categories:
        raise ValueError(f"no categories with a train/ split under {root}")
    entries: list[ManifestEntry] = []
    for cat in categories:
        cat_dir = root / cat
        train_dirs = sorted(p for p in (cat_dir / "train").iterdir() if p.is_dir())
        for d in train_dirs:
            if d.name != "good":
                raise ValueError(f"train split of {cat} contains non-good directory {d.name}")
            for img in sorted(d.iterdir()):
                if img.suffix.lower() in IMAGE_EXTENSIONS:
                    entries.append(ManifestEntry(str(img), cat, "train", "good"))
        test_dir = cat_dir / "test"
        if not test_dir.is_dir():
            raise ValueError(f"category {cat} has no test directory")
        test_images = 0
        for d in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for img in sorted(d.iterdir()):
                if img.suffix.lower() not in IMAGE_EXTENSIONS:
                    continue
                test_images += 1
                if d.name == "good":
                    entries.append(ManifestEntry(str(img), cat, "test", "good"))
                else:
                    mask = cat_dir / "ground_truth" / d.name / f"{img.stem}_mask.png"
                    if not mask.is_file():
                        raise FileNotFoundError(
                            f"defective test image {img} has no ground-truth mask at {mask}"
                        )
                    entries.append(ManifestEntry(str(img), cat, "test", d.name, str(mask)))
        if test_images == 0:
            raise ValueError(f"category {cat} has an empty test split")
    size = _read_image_size(Path(entries[0].path))
    return DatasetManifest(categories=categories, entries=entries, image_size=size)


# --------------------------------------------------------------- loading


def resize_image(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (C, H, W) float tensor (no antialiasing)."""
    if img.shape[-2:] == tuple(size):
        return img
    out = F.interpolate(img.unsqueeze(0), size=size, mode="bilinear", align_corners=False)
    return out.squeeze(0)


def resize_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resize of an (H, W) mask, re-binarized to {0, 1}."""
    if mask.shape != tuple(size):
        mask = F.interpolate(
            mask.float().unsqueeze(0).unsqueeze(0), size=size, mode="nearest"
        ).squeeze(0).squeeze(0)
    return (mask > 0.5).to(torch.float32)


def load_image(path, target_size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """Decode an image to a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    img = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if target_size is not None:
        img = resize_image(img, target_size)
    return img


def load_mask(path, target_size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    mask = (torch.from_numpy(arr) > 0.5).to(torch.float32)
    if target_size is not None:
        mask = resize_mask(mask, target_size)
    return mask


def load_batch(
    manifest: DatasetManifest,
    indices: Sequence[int],
    target_size: tuple[int, int],
) -> tuple[torch.Tensor, list[Optional[torch.Tensor]], list[ManifestEntry]]:
    """Load, resize and scale a batch; masks are returned where present."""
    images = []
    masks: list[Optional[torch.Tensor]] = []
    entries = []
    for i in indices:
        if not 0 <= i < len(manifest.entries):
            raise IndexError(f"index {i} out of range for manifest of {len(manifest.entries)}")
        e = manifest.entries[i]
        images.append(load_image(e.path, target_size))
        masks.append(load_mask(e.mask_path, target_size) if e.mask_path else None)
        entries.append(e)
    return torch.stack(images), masks, entries


# --------------------------------------------------------- float grid IO

GRID_MAGIC = b"FGRD"
_GRID_DTYPES = {1: np.float32}


def write_float_grid(path, grid: np.ndarray) -> None:
    """Write an H x W float32 grid with a 16-byte header (magic, dtype, H, W)."""
    grid = np.ascontiguousarray(grid, dtype=np.float32)
    if grid.ndim != 2:
        raise ValueError(f"grid must be rank 2, got shape {grid.shape}")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", 1, grid.shape[0], grid.shape[1]))
        fh.write(grid.tobytes())


def read_float_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != GRID_MAGIC:
            raise ValueError(f"{path} is not a float-grid file")
        dtype_code, h, w = struct.unpack("<III", header[4:])
        if dtype_code not in _GRID_DTYPES:
            raise ValueError(f"unsupported dtype code {dtype_code}")
        data = np.frombuffer(fh.read(), dtype=_GRID_DTYPES[dtype_code])
    if data.size != h * w:
        raise ValueError(f"truncated grid file {path}")
    return data.reshape(h, w).copy()


# --------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    """Parameters of the generated defect corpus.

    Texture families cycle over categories; every defective test image is
    derived from a clean render of the same (category, index) key, so the
    clean source can be re-derived deterministically.
    """

    num_categories: int = 3
    train_good: int = 30
    test_good: int = 8
    test_per_defect: int = 4
    image_size: int = 64
    textures: tuple[str, ...] = ("stripes", "checker", "blobs")
    defects: tuple[str, ...] = ("rect", "stain", "scratch")
    min_intensity_delta: float = 0.25
    rect_area_range: tuple[float, float] = (0.15, 0.30)
    stain_radius_range: tuple[int, int] = (4, 9)
    scratch_width_range: tuple[int, int] = (1, 2)
    seed: int = 0

    def __post_init__(self):
        if self.num_categories < 1:
            raise ValueError("num_categories must be positive")
        if not 0 < self.min_intensity_delta < 1:
            raise ValueError("min_intensity_delta must be in (0, 1)")
        for t in self.textures:
            if t not in ("stripes", "checker", "blobs"):
                raise ValueError(f"unknown texture family {t!r}")
        for d in self.defects:
            if d not in ("rect", "stain", "scratch"):
                raise ValueError(f"unknown defect injector {d!r}")

    def category_names(self) -> list[str]:
        return [f"{self.textures[i % len(self.textures)]}{i}" for i in range(self.num_categories)]


def _category_rng(spec: SyntheticSpec, cat: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 1000 + cat])


def _image_rng(spec: SyntheticSpec, cat: int, split: str, defect: str, index: int) -> np.random.Generator:
    defect_code = zlib.crc32(defect.encode())  # stable across processes, unlike hash()
    key = [spec.seed, cat, {"train": 0, "test": 1}[split], defect_code, index]
    return np.random.default_rng(key)


def _palette(spec: SyntheticSpec, cat: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _category_rng(spec, cat)
    c1 = rng.uniform(0.15, 0.45, size=3)
    c2 = rng.uniform(0.55, 0.9, size=3)
    return c1, c2


def render_clean(spec: SyntheticSpec, cat: int, split: str, defect: str, index: int) -> np.ndarray:
    """Render the clean (defect-free) source image as float64 HWC in [0, 1]."""
    s = spec.image_size
    family = spec.textures[cat % len(spec.textures)]
    c1, c2 = _palette(spec, cat)
    cat_rng = _category_rng(spec, cat)
    rng = _image_rng(spec, cat, split, defect, index)
    yy, xx = np.mgrid[0:s, 0:s]
    if family == "stripes":
        fx, fy = cat_rng.uniform(2.0, 5.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) / s + phase)
    elif family == "checker":
        # cell size comfortably above the autoencoder's compression factor,
        # rendered 4x oversampled and box-filtered for camera-like soft edges
        cell = 4 * int(cat_rng.integers(10, 17))
        ox, oy = 4 * rng.integers(0, cell // 4, size=2)
        yy4, xx4 = np.mgrid[0 : 4 * s, 0 : 4 * s]
        hi = (((xx4 + ox) // cell + (yy4 + oy) // cell) % 2).astype(np.float64)
        pattern = hi.reshape(s, 4, s, 4).mean(axis=(1, 3))
    else:  # blobs
        coarse = s // 8
        base = cat_rng.normal(size=(coarse, coarse))
        roll = rng.integers(0, coarse, size=2)
        noise = np.roll(base, shift=tuple(roll), axis=(0, 1)) + 0.1 * rng.normal(size=(coarse, coarse))
        t = torch.from_numpy(noise).unsqueeze(0).unsqueeze(0)
        up = F.interpolate(t, size=(s, s), mode="bilinear", align_corners=False).squeeze().numpy()
        lo, hi = up.min(), up.max()
        pattern = (up - lo) / (hi - lo + 1e-12)
    img = c1[None, None, :] + pattern[..., None] * (c2 - c1)[None, None, :]
    img = img + rng.uniform(-0.02, 0.02)  # global brightness jitter
    img = img + rng.normal(0, 0.01, size=img.shape)  # sensor-style grain
    return np.clip(img, 0.0, 1.0)


def _inject_defect(
    spec: SyntheticSpec, img: np.ndarray, defect: str, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Return (defective image, boolean mask of intended defect pixels)."""
    s = spec.image_size
    out = img.copy()
    mask = np.zeros((s, s), dtype=bool)
    if defect == "rect":
        frac = rng.uniform(*spec.rect_area_range)
        aspect = rng.uniform(0.6, 1.6)
        h = int(np.clip(round(np.sqrt(frac * s * s * aspect)), 4, s - 2))
        w = int(np.clip(round(frac * s * s / h), 4, s - 2))
        i = int(rng.integers(1, s - h))
        j = int(rng.integers(1, s - w))
        color = rng.uniform(0, 1, size=3)
        out[i : i + h, j : j + w] = color
        mask[i : i + h, j : j + w] = True
    elif defect == "stain":
        r = int(rng.integers(spec.stain_radius_range[0], spec.stain_radius_range[1] + 1))
        ci = int(rng.integers(r, s - r))
        cj = int(rng.integers(r, s - r))
        yy, xx = np.mgrid[0:s, 0:s]
        mask = (yy - ci) ** 2 + (xx - cj) ** 2 <= r * r
        shift = rng.choice([-1, 1]) * rng.uniform(0.35, 0.6)
        out[mask] = np.clip(out[mask] + shift, 0, 1)
    elif defect == "scratch":
        width = int(rng.integers(spec.scratch_width_range[0], spec.scratch_width_range[1] + 1))
        p0 = rng.uniform(0.1 * s, 0.9 * s, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.4 * s, 0.9 * s)
        p1 = p0 + length * np.array([np.sin(angle), np.cos(angle)])
        n_samples = int(4 * length)
        for t in np.linspace(0, 1, n_samples):
            pt = p0 + t * (p1 - p0)
            i, j = int(round(pt[0])), int(round(pt[1]))
            for di in range(width):
                for dj in range(width):
                    a, b = i + di, j + dj
                    if 0 <= a < s and 0 <= b < s:
                        mask[a, b] = True
        value = 1.0 if rng.random() < 0.5 else 0.0
        out[mask] = value
    else:
        raise ValueError(f"unknown defect {defect!r}")
    return out, mask


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synth_image_pair(
    spec: SyntheticSpec, cat: int, split: str, defect: str, index: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic (clean u8, defective u8, mask) triple for one image key.

    For defect == "good" the defective image equals the clean one and the
    mask is empty. Every mask pixel is guaranteed to differ from the clean
    image by at least min_intensity_delta on every channel after 8-bit
    quantization, and no pixel outside the mask differs at all.
    """
    clean = render_clean(spec, cat, split, defect, index)
    clean_u8 = _quantize(clean)
    if defect == "good":
        return clean_u8, clean_u8.copy(), np.zeros(clean.shape[:2], dtype=np.uint8)
    rng = _image_rng(spec, cat, split, defect + "#inject", index)
    defective, mask = _inject_defect(spec, clean, defect, rng)
    def_u8 = _quantize(defective)
    def_u8[~mask] = clean_u8[~mask]
    # enforce the minimum per-channel contrast inside the mask
    delta = int(round(spec.min_intensity_delta * 255))
    diff = def_u8.astype(np.int16) - clean_u8.astype(np.int16)
    weak = mask[..., None] & (np.abs(diff) < delta)
    up = clean_u8.astype(np.int16) <= 127
    fixed = np.where(up, clean_u8.astype(np.int16) + delta, clean_u8.astype(np.int16) - delta)
    def_u8 = np.where(weak, np.clip(fixed, 0, 255), def_u8).astype(np.uint8)
    return clean_u8, def_u8, mask.astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_path) -> DatasetManifest:
    """Write the synthetic corpus in MVTec layout; same seed, same bytes."""
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    entries: list[ManifestEntry] = []
    names = spec.category_names()
    for cat, name in enumerate(names):
        train_dir = out / name / "train" / "good"
        train_dir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.train_good):
            _, img, _ = synth_image_pair(spec, cat, "train", "good", i)
            p = train_dir / f"{i:03d}.png"
            Image.fromarray(img).save(p)
            entries.append(ManifestEntry(str(p), name, "train", "good"))
        good_dir = out / name / "test" / "good"
        good_dir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.test_good):
            _, img, _ = synth_image_pair(spec, cat, "test", "good", i)
            p = good_dir / f"{i:03d}.png"
            Image.fromarray(img).save(p)
            entries.append(ManifestEntry(str(p), name, "test", "good"))
        for defect in spec.defects:
            img_dir = out / name / "test" / defect
            mask_dir = out / name / "ground_truth" / defect
            img_dir.mkdir(parents=True, exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
            for i in range(spec.test_per_defect):
                _, img, mask = synth_image_pair(spec, cat, "test", defect, i)
                p = img_dir / f"{i:03d}.png"
                mp = mask_dir / f"{i:03d}_mask.png"
                Image.fromarray(img).save(p)
                Image.fromarray(mask * 255).save(mp)
                entries.append(ManifestEntry(str(p), name, "test", defect, str(mp)))
    # category-major lexicographic order, identical to scan_mvtec_layout
    order = {"train": 0, "test": 1}
    entries.sort(key=lambda e: (e.category, order[e.split], e.path))
    return DatasetManifest(
        categories=sorted(names), entries=entries, image_size=(spec.image_size, spec.image_size)
    )
