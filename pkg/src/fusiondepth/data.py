"""Samples, synthetic scenes and on-disk dataset ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .nn import make_rng

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


@dataclass
class ImageSample:
    """RGB image (3×H×W, [0, 1]) with normalised depth (1×H×W, [0, 1])."""

    image: np.ndarray
    depth: np.ndarray
    depth_scale: float
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be 3×H×W, got {self.image.shape}")
        if self.depth.shape != (1,) + self.image.shape[1:]:
            raise ValueError(f"{self.id}: depth {self.depth.shape} does not match image {self.image.shape}")
        if self.depth_scale <= 0:
            raise ValueError(f"{self.id}: depth_scale must be positive")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def synth_scene(seed: int, size: int = 64, depth_scale: float = 10.0) -> ImageSample:
    """Ground plane receding to a back wall, occluded by 3-6 fronto-parallel rectangles.

    Depth is exact per pixel (nearest surface wins); colour is albedo times a
    depth-dependent shading term.
    """
    rng = make_rng(seed)
    rows = np.arange(size, dtype=np.float64)[:, None]
    near = rng.uniform(0.02, 0.2)
    far = rng.uniform(0.85, 1.0)
    horizon = rng.uniform(0.1, 0.4) * size
    t = np.clip((rows - horizon) / max(size - 1 - horizon, 1.0), 0.0, 1.0)
    depth = np.broadcast_to(far + (near - far) * t, (size, size)).copy()

    wall = rng.uniform(0.3, 0.9, size=3)
    ground = rng.uniform(0.2, 0.8, size=3)
    yy, xx = np.mgrid[0:size, 0:size]
    cell = max(size // 8, 1)
    checker = ((yy // cell + xx // cell) % 2) * 0.15 - 0.075
    albedo = np.where((rows >= horizon)[None], ground[:, None, None] + checker, wall[:, None, None])

    for _ in range(int(rng.integers(3, 7))):
        h = int(rng.integers(max(size // 8, 1), size // 2 + 1))
        w = int(rng.integers(max(size // 8, 1), size // 2 + 1))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        z = rng.uniform(0.05, 0.95)
        colour = rng.uniform(0.0, 1.0, size=3)
        region = depth[top:top + h, left:left + w]
        visible = z < region
        region[visible] = z
        for c in range(3):
            albedo[c, top:top + h, left:left + w][visible] = colour[c]

    shading = 1.0 - 0.6 * depth
    image = np.clip(albedo * shading[None], 0.0, 1.0)
    return ImageSample(image, depth[None].copy(), depth_scale, f"synth-{seed}-{size}")


def synth_dataset(count: int, seed: int, size: int = 64, depth_scale: float = 10.0) -> list[ImageSample]:
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [synth_scene(int(s), size, depth_scale) for s in seeds]


# -- PNG i/o -------------------------------------------------------------------

def _open_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                return np.array(img, dtype=np.int64)
            return np.array(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"corrupt PNG {path}: {exc}") from exc


def read_rgb(path: str | Path) -> np.ndarray:
    """8-bit RGB PNG -> 3×H×W float in [0, 1]."""
    arr = _open_png(Path(path))
    if arr.ndim != 3:
        raise DatasetError(f"{path}: expected an RGB image, got shape {arr.shape}")
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_depth_mm(path: str | Path) -> np.ndarray:
    """16-bit grayscale PNG of millimeters -> H×W int array."""
    arr = _open_png(Path(path))
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected single-channel 16-bit depth, got shape {arr.shape}")
    return arr


def write_rgb(path: str | Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(data, mode="RGB").save(path)


def write_gray16(path: str | Path, values: np.ndarray) -> None:
    Image.fromarray(np.asarray(values, dtype=np.uint16)).save(path)


def crop_square(arr: np.ndarray, offset: int = 0) -> np.ndarray:
    """Centre-crop the last two axes to a square; ``offset`` shifts along the long side."""
    h, w = arr.shape[-2:]
    side = min(h, w)
    if h > w:
        top = int(np.clip((h - side) // 2 + offset, 0, h - side))
        return arr[..., top:top + side, :]
    left = int(np.clip((w - side) // 2 + offset, 0, w - side))
    return arr[..., :, left:left + side]


def _resize(arr: np.ndarray, size: int, resample) -> np.ndarray:
    if arr.shape[-1] == size and arr.shape[-2] == size:
        return arr
    planes = [np.array(Image.fromarray(p.astype(np.float32), mode="F").resize((size, size), resample))
              for p in arr]
    return np.stack(planes).astype(np.float64)


def fit_image(image: np.ndarray, size: int | None, offset: int = 0) -> np.ndarray:
    image = crop_square(image, offset)
    return image if size is None else np.clip(_resize(image, size, Image.BILINEAR), 0.0, 1.0)


def _read_meta(path: Path) -> float:
    if not path.is_file():
        raise DatasetError(f"missing {path} (expected 'depth_scale = <meters>')")
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if "=" in line:
            key, value = (p.strip() for p in line.split("=", 1))
            if key == "depth_scale":
                try:
                    scale = float(value)
                except ValueError:
                    raise DatasetError(f"{path}: depth_scale is not a number: {value!r}") from None
                if scale <= 0:
                    raise DatasetError(f"{path}: depth_scale must be positive")
                return scale
    raise DatasetError(f"{path}: no depth_scale entry")


def load_dataset(directory: str | Path, image_size: int | None = None,
                 crop_offset: int = 0) -> list[ImageSample]:
    """Pair ``images/NNNN.png`` with ``depths/NNNN.png`` under ``directory``.

    Depth PNGs hold millimeters; they are divided by ``1000 * depth_scale`` and
    clamped to [0, 1]. Non-square frames are centre-cropped, then resized to
    ``image_size`` when given. Unpaired files are skipped with a warning.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    img_dir, depth_dir = root / "images", root / "depths"
    images = {p.stem: p for p in sorted(img_dir.glob("*.png"))} if img_dir.is_dir() else {}
    depths = {p.stem: p for p in sorted(depth_dir.glob("*.png"))} if depth_dir.is_dir() else {}
    for stem in sorted(images.keys() - depths.keys()):
        log.warning("skipping %s: no matching depth map", images[stem])
    for stem in sorted(depths.keys() - images.keys()):
        log.warning("skipping %s: no matching image", depths[stem])
    stems = sorted(images.keys() & depths.keys())
    if not stems:
        raise DatasetError(f"no image/depth pairs found in {root}")
    depth_scale = _read_meta(root / "meta")

    samples = []
    for stem in stems:
        image = read_rgb(images[stem])
        depth_mm = read_depth_mm(depths[stem])
        if depth_mm.shape != image.shape[1:]:
            raise DatasetError(f"{depths[stem]}: size {depth_mm.shape} differs from image {image.shape[1:]}")
        depth = np.clip(depth_mm / (1000.0 * depth_scale), 0.0, 1.0)[None]
        image = fit_image(image, image_size, crop_offset)
        depth = crop_square(depth, crop_offset)
        if image_size is not None:
            depth = np.clip(_resize(depth, image_size, Image.NEAREST), 0.0, 1.0)
        samples.append(ImageSample(image, depth, depth_scale, stem))
    return samples


def write_dataset(samples: list[ImageSample], directory: str | Path) -> None:
    """Inverse of :func:`load_dataset` (depth written in millimeters)."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depths").mkdir(parents=True, exist_ok=True)
    scales = {s.depth_scale for s in samples}
    if len(scales) != 1:
        raise DatasetError("all samples in one dataset must share a depth_scale")
    scale = scales.pop()
    for i, s in enumerate(samples):
        write_rgb(root / "images" / f"{i:04d}.png", s.image)
        mm = np.clip(np.round(s.depth[0] * scale * 1000.0), 0, 65535)
        write_gray16(root / "depths" / f"{i:04d}.png", mm)
    (root / "meta").write_text(f"depth_scale = {scale}\n", encoding="utf-8")
