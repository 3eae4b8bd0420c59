"""Patches, augmentation, normalization, dataset folders and a synthetic nuclei generator.

Images are float32 ``(3, H, W)`` arrays in ``[0, 255]``; masks are uint8 ``(H, W)``
class-index arrays where 255 marks ignored pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

from .config import AugmentationSpec, NormalizationSpec
from .errors import ShapeError
from .objectives import IGNORE_INDEX


@dataclass
class ImagePatch:
    rgb: np.ndarray
    mask: np.ndarray
    source: str = ""
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ShapeError("patch image must be (3, H, W)", self.rgb.shape)
        if self.mask.shape != self.rgb.shape[1:]:
            raise ShapeError("patch mask must match the image extent", self.mask.shape, self.rgb.shape)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


# -------------------------------------------------------------- patching --


def _starts(n: int, size: int) -> list[int]:
    starts = list(range(0, n - size + 1, size))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts


def extract_patches(image: np.ndarray, mask: np.ndarray, size: int = 256, source: str = "") -> list[ImagePatch]:
    """Tile from the origin without overlap; the remainder is covered by border-anchored patches."""
    _, h, w = image.shape
    if h < size or w < size:
        raise ShapeError(f"image smaller than the {size}x{size} patch", image.shape)
    if mask.shape != (h, w):
        raise ShapeError("mask does not match image", mask.shape, image.shape)
    return [ImagePatch(image[:, r:r + size, c:c + size].copy(), mask[r:r + size, c:c + size].copy(), source, (r, c))
            for r in _starts(h, size) for c in _starts(w, size)]


# ---------------------------------------------------------- augmentation --


def affine(patch: ImagePatch, angle: float = 0.0, scale: float = 1.0, shift=(0.0, 0.0),
           fill=(0.0, 0.0, 0.0), mask_fill: int = IGNORE_INDEX) -> ImagePatch:
    """Rotate counter-clockwise by ``angle`` degrees and scale about the centre, then shift by ``(dy, dx)`` pixels.

    Images are resampled bilinearly with ``fill`` outside the source; masks use
    nearest neighbour with ``mask_fill``.
    """
    _, h, w = patch.rgb.shape
    t = math.radians(angle)
    rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    matrix = rot / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ (centre + np.asarray(shift, dtype=np.float64))
    rgb = np.stack([ndimage.affine_transform(patch.rgb[i].astype(np.float64), matrix, offset, order=1,
                                             mode="constant", cval=float(fill[i])) for i in range(3)])
    mask = ndimage.affine_transform(patch.mask, matrix, offset, order=0, mode="constant", cval=mask_fill)
    return replace(patch, rgb=rgb.astype(np.float32), mask=mask.astype(patch.mask.dtype))


def flip(patch: ImagePatch, horizontal: bool = False, vertical: bool = False) -> ImagePatch:
    rgb, mask = patch.rgb, patch.mask
    if horizontal:
        rgb, mask = rgb[:, :, ::-1], mask[:, ::-1]
    if vertical:
        rgb, mask = rgb[:, ::-1, :], mask[::-1, :]
    return replace(patch, rgb=np.ascontiguousarray(rgb), mask=np.ascontiguousarray(mask))


def photometric(rgb: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter, each applied with ``photometric_prob``."""
    p = spec.photometric_prob
    img = rgb.astype(np.float64)
    if rng.random() < p:
        img = img + rng.uniform(-spec.brightness, spec.brightness)
    if rng.random() < p:
        img = img * rng.uniform(*spec.contrast)
    img = np.clip(img, 0.0, 255.0)
    do_sat, do_hue = rng.random() < p, rng.random() < p
    if do_sat or do_hue:
        hsv = rgb_to_hsv(np.moveaxis(img / 255.0, 0, -1))
        if do_sat:
            hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(*spec.saturation), 0.0, 1.0)
        if do_hue:
            hsv[..., 0] = (hsv[..., 0] + rng.uniform(-spec.hue, spec.hue) / 360.0) % 1.0
        img = np.moveaxis(hsv_to_rgb(hsv), -1, 0) * 255.0
    return img.astype(np.float32)


def pad_to(patch: ImagePatch, size: int, image_value: float = 0.0, mask_value: int = IGNORE_INDEX) -> ImagePatch:
    """Pad bottom/right up to ``size`` (no-op when already large enough)."""
    _, h, w = patch.rgb.shape
    dh, dw = max(size - h, 0), max(size - w, 0)
    if not (dh or dw):
        return patch
    rgb = np.pad(patch.rgb, ((0, 0), (0, dh), (0, dw)), constant_values=image_value)
    mask = np.pad(patch.mask, ((0, dh), (0, dw)), constant_values=mask_value)
    return replace(patch, rgb=rgb, mask=mask)


def augment(patch: ImagePatch, spec: AugmentationSpec, rng: np.random.Generator,
            fill=(0.0, 0.0, 0.0)) -> ImagePatch:
    """Affine -> flip -> photometric -> pad. The mask only sees the geometric steps."""
    out = replace(patch, rgb=patch.rgb.copy(), mask=patch.mask.copy())
    if rng.random() < spec.affine_prob:
        _, h, w = out.rgb.shape
        angle = rng.uniform(-spec.rotate, spec.rotate)
        scale = rng.uniform(*spec.scale)
        shift = (rng.uniform(-spec.shift, spec.shift) * h, rng.uniform(-spec.shift, spec.shift) * w)
        out = affine(out, angle, scale, shift, fill, spec.mask_fill)
    out = flip(out, rng.random() < spec.flip_prob, rng.random() < spec.flip_prob)
    if spec.photometric_prob > 0:
        out = replace(out, rgb=photometric(out.rgb, spec, rng))
    if spec.pad_size:
        out = pad_to(out, spec.pad_size, spec.image_pad_value, spec.mask_fill)
    return out


def normalize(rgb: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(spec.std, dtype=np.float64).reshape(3, 1, 1)
    return ((rgb - mean) / std).astype(np.float32)


def make_batch(patches: list[ImagePatch], spec: AugmentationSpec | None, norm: NormalizationSpec,
               seed: int, indices) -> tuple[np.ndarray, np.ndarray]:
    """Augment (optional) and normalize ``patches``; sample ``k`` uses ``sample_rng(seed, indices[k])``."""
    images, masks = [], []
    for patch, idx in zip(patches, indices):
        if spec is not None:
            patch = augment(patch, spec, sample_rng(seed, idx), fill=norm.mean)
        images.append(normalize(patch.rgb, norm))
        masks.append(patch.mask)
    return np.stack(images), np.stack(masks)


# ------------------------------------------------------------- synthetic --


def rasterize_ellipse(shape, cy: float, cx: float, a: float, b: float, theta: float = 0.0) -> np.ndarray:
    """Boolean mask of pixel centres inside the ellipse with semi-axes ``a`` (along ``theta``) and ``b``."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


# nuclei tints per class (haematoxylin-like purples shifting hue with the class)
_NUCLEUS_TINTS = np.array([[70, 40, 120], [120, 30, 60], [40, 90, 110], [90, 90, 30], [30, 30, 30]], dtype=np.float64)


def synth_generate(n: int, seed: int = 0, num_classes: int = 2, size: int = 64,
                   nuclei: tuple[int, int] = (3, 7)) -> list[ImagePatch]:
    """``n`` deterministic synthetic patches: textured pink background with elliptical nuclei.

    Nucleus ``k`` in a patch gets class ``1 + k % (num_classes - 1)``; later
    nuclei overwrite earlier ones where they overlap.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    patches = []
    for i in range(n):
        rng = sample_rng(seed, i)
        noise = ndimage.gaussian_filter(rng.normal(size=(3, size, size)), sigma=(0, 2, 2))
        rgb = np.array([230.0, 180.0, 210.0]).reshape(3, 1, 1) + 40.0 * noise
        mask = np.zeros((size, size), dtype=np.uint8)
        for k in range(int(rng.integers(nuclei[0], nuclei[1] + 1))):
            cls = 1 + k % (num_classes - 1)
            a, b = rng.uniform(size / 16, size / 7, size=2)
            cy, cx = rng.uniform(0, size, size=2)
            region = rasterize_ellipse((size, size), cy, cx, a, b, rng.uniform(0, math.pi))
            mask[region] = cls
            tint = _NUCLEUS_TINTS[(cls - 1) % len(_NUCLEUS_TINTS)]
            rgb[:, region] = tint[:, None] + 15.0 * noise[:, region]
        patches.append(ImagePatch(np.clip(rgb, 0, 255).astype(np.float32), mask, f"synth-{seed}-{i}", (0, 0)))
    return patches


# --------------------------------------------------------------- folders --


def encode_mask(mask: np.ndarray, num_classes: int | None = None) -> Image.Image:
    mask = np.asarray(mask)
    valid = mask != IGNORE_INDEX
    if (mask < 0).any() or (mask > 255).any():
        raise ValueError("mask values must fit in 8 bits")
    if num_classes is not None and (mask[valid] >= num_classes).any():
        raise ValueError(f"mask holds classes >= {num_classes}")
    return Image.fromarray(mask.astype(np.uint8), mode="L")


def decode_mask(img: Image.Image, num_classes: int | None = None) -> np.ndarray:
    if img.mode not in ("L", "P"):
        raise ValueError(f"mask images must be single-channel 8-bit, got mode {img.mode}")
    mask = np.asarray(img, dtype=np.uint8).copy()
    if num_classes is not None and (mask[mask != IGNORE_INDEX] >= num_classes).any():
        raise ValueError(f"mask holds classes >= {num_classes}")
    return mask


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.moveaxis(np.asarray(img.convert("RGB"), dtype=np.float32), -1, 0).copy()


def save_image(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.clip(np.moveaxis(rgb, 0, -1), 0, 255).round().astype(np.uint8), mode="RGB").save(path)


class SegmentationDataset:
    """``root/images/*.png`` paired with ``root/masks/*.png`` by filename stem."""

    def __init__(self, root, num_classes: int | None = None):
        self.root = Path(root)
        self.num_classes = num_classes
        img_dir, mask_dir = self.root / "images", self.root / "masks"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise FileNotFoundError(f"{self.root} must contain images/ and masks/")
        images = {p.stem: p for p in sorted(img_dir.glob("*.png"))}
        masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
        missing = sorted(set(images) ^ set(masks))
        if missing:
            raise FileNotFoundError(f"unpaired files in {self.root}: {missing[:5]}")
        if not images:
            raise FileNotFoundError(f"no images found in {img_dir}")
        self.stems = sorted(images)
        self._images, self._masks = images, masks

    def __len__(self) -> int:
        return len(self.stems)

    def __getitem__(self, i: int) -> ImagePatch:
        stem = self.stems[i]
        with Image.open(self._masks[stem]) as m:
            mask = decode_mask(m, self.num_classes)
        return ImagePatch(load_image(self._images[stem]), mask, stem, (0, 0))

    def patches(self, size: int) -> list[ImagePatch]:
        out = []
        for i in range(len(self)):
            item = self[i]
            out.extend(extract_patches(item.rgb, item.mask, size, item.source))
        return out


def load_dataset(root, num_classes: int | None = None) -> SegmentationDataset:
    return SegmentationDataset(root, num_classes)


def write_dataset(root, patches: list[ImagePatch]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(patches):
        stem = p.source or f"patch-{i:05d}"
        save_image(root / "images" / f"{stem}.png", p.rgb)
        encode_mask(p.mask).save(root / "masks" / f"{stem}.png")
    return root
