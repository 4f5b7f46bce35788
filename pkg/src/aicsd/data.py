"""Segmentation samples: synthetic generation, directory I/O, and augmentation."""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from aicsd.errors import ConfigurationError, IngestionError, InvalidLabelError

IGNORE_INDEX = 255


@dataclass
class SegSample:
    """One image with its label mask.

    ``image`` is float32 ``[3, H, W]`` in ``[0, 1]``; ``mask`` is int64 ``[H, W]``.
    """

    image: np.ndarray
    mask: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[1:]}")


def class_palette(num_classes, hue_spread=1.0):
    """Base RGB colour per class; depends only on the class count so that
    datasets generated with different seeds share class appearance.

    Foreground hues cover ``hue_spread`` of the colour circle; small values
    make classes look alike so that shape has to disambiguate them.
    """
    palette = [np.array([0.35, 0.35, 0.35])]
    hues = hue_spread * np.arange(num_classes - 1) / max(num_classes - 1, 1)
    for h in hues:
        rgb = np.clip(np.abs(((h * 6 + np.array([0, 4, 2])) % 6) - 3) - 1, 0, 1)
        palette.append(0.25 + 0.5 * rgb)
    return np.stack(palette)


def _shape_mask(kind, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    min_side = max(3, min(h, w) // 5)
    max_side = max(min_side + 1, (3 * min(h, w)) // 5)
    if kind == "rectangle":
        sh, sw = rng.integers(min_side, max_side, size=2)
        y0, x0 = rng.integers(0, h - sh + 1), rng.integers(0, w - sw + 1)
        return (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
    if kind == "ellipse":
        ry, rx = rng.integers(min_side // 2 + 1, max_side // 2 + 2, size=2)
        cy, cx = rng.integers(ry, max(ry + 1, h - ry)), rng.integers(rx, max(rx + 1, w - rx))
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # bar: long thin band, horizontal or vertical
    thick = max(2, min_side // 2)
    if rng.random() < 0.5:
        length = rng.integers(w // 2, w + 1)
        y0, x0 = rng.integers(0, h - thick + 1), rng.integers(0, w - length + 1)
        return (yy >= y0) & (yy < y0 + thick) & (xx >= x0) & (xx < x0 + length)
    length = rng.integers(h // 2, h + 1)
    y0, x0 = rng.integers(0, h - length + 1), rng.integers(0, w - thick + 1)
    return (yy >= y0) & (yy < y0 + length) & (xx >= x0) & (xx < x0 + thick)


SHAPES = ("rectangle", "ellipse", "bar")


def generate_synthetic(n, num_classes, h, w, seed, noise=0.12, color_jitter=0.08, hue_spread=1.0, class_shapes=False):
    """Generate ``n`` images of coloured geometric shapes on a noisy background.

    Class 0 is background.  Each image holds between 1 and ``num_classes - 1``
    shapes, one class per shape.  A class is recognisable by its base colour
    (shared across the dataset), perturbed per shape by ``color_jitter`` and
    per pixel by Gaussian ``noise``.  With ``class_shapes`` every class
    always uses the same shape kind (class ``c`` draws ``SHAPES[(c - 1) % 3]``),
    so shape is a second cue next to colour.  Images are quantised to 8 bits so that
    exporting to PNG and reloading is lossless.

    Every foreground class is the top-most shape in at least
    ``floor(n / (num_classes - 1))`` images (round robin), which covers the
    ``ceil(n / (2 * (num_classes - 1)))`` minimum whenever ``n >= num_classes - 1``;
    for smaller ``n`` the classes are spread across the available images.
    """
    if n < 0 or num_classes < 2 or h < 8 or w < 8:
        raise ConfigurationError(f"invalid synthetic dataset size n={n}, classes={num_classes}, {h}x{w}")
    rng = np.random.default_rng(seed)
    palette = class_palette(num_classes, hue_spread)
    fg = num_classes - 1
    samples = []
    for i in range(n):
        if n >= fg:
            guaranteed = [1 + i % fg]
        else:
            guaranteed = [1 + c for c in range(fg) if c % n == i]
        k = int(rng.integers(len(guaranteed), fg + 1))
        others = [c for c in rng.permutation(np.arange(1, num_classes)) if c not in guaranteed]
        classes = others[: k - len(guaranteed)] + guaranteed
        mask = np.zeros((h, w), dtype=np.int64)
        image = np.empty((3, h, w))
        image[:] = (palette[0] + rng.normal(0, color_jitter, 3))[:, None, None]
        for c in classes:
            kind = SHAPES[(c - 1) % len(SHAPES)] if class_shapes else SHAPES[int(rng.integers(len(SHAPES)))]
            region = _shape_mask(kind, h, w, rng)
            mask[region] = c
            image[:, region] = (palette[c] + rng.normal(0, color_jitter, 3))[:, None]
        image += rng.normal(0, noise, image.shape)
        image = np.round(np.clip(image, 0, 1) * 255) / 255
        samples.append(SegSample(image.astype(np.float32), mask, name=f"{i:05d}"))
    return samples


def export_directory(samples, root, manifest=None):
    """Write samples as ``root/images/<name>.png`` and ``root/masks/<name>.png``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = s.name or f"{i:05d}"
        img = np.round(np.transpose(s.image, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{name}.png")
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{name}.png")
    if manifest is not None:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def load_directory(root, num_classes, ignore_index=IGNORE_INDEX):
    """Read ``root/images`` and ``root/masks`` PNG pairs matched by file stem.

    Samples come back in lexicographic order of stems.  A missing
    ``images`` directory or an empty one yields an empty list.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    images = {p.stem: p for p in img_dir.glob("*.png")} if img_dir.is_dir() else {}
    masks = {p.stem: p for p in mask_dir.glob("*.png")} if mask_dir.is_dir() else {}
    for stem in sorted(set(images) ^ set(masks)):
        have = images.get(stem) or masks.get(stem)
        raise IngestionError(f"{have} has no matching {'mask' if stem in images else 'image'}")
    samples = []
    for stem in sorted(images):
        image = load_image(images[stem])
        with Image.open(masks[stem]) as m:
            if m.mode not in ("L", "P", "I", "I;16"):
                raise IngestionError(f"{masks[stem]}: mask must be single-channel, got mode {m.mode}")
            mask = np.asarray(m, dtype=np.int64)
        if mask.shape != image.shape[1:]:
            raise IngestionError(f"{masks[stem]}: mask size {mask.shape} differs from image {image.shape[1:]}")
        bad = (mask >= num_classes) & (mask != ignore_index) | (mask < 0)
        if bad.any():
            raise InvalidLabelError(f"{masks[stem]}: label {int(mask[bad][0])} not in 0..{num_classes - 1} or {ignore_index}")
        samples.append(SegSample(image, mask, name=stem))
    return samples


@dataclass(frozen=True)
class AugmentConfig:
    scale_min: float = 0.5
    scale_max: float = 2.0
    hflip_prob: float = 0.5
    crop_h: int = 64
    crop_w: int = 64
    seed: int = 0
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigurationError(f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")
        if self.crop_h < 1 or self.crop_w < 1:
            raise ConfigurationError("crop sizes must be >= 1")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigurationError("hflip_prob must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def augment(sample, config, sample_index, epoch=0):
    """Random scale, horizontal flip, then random crop (padding if too small).

    The random stream is seeded from ``(config.seed, epoch, sample_index)`` so
    results do not depend on iteration order or worker layout.
    """
    rng = np.random.default_rng([config.seed, epoch, sample_index])
    image = torch.from_numpy(sample.image)
    mask = torch.from_numpy(sample.mask)
    h, w = mask.shape
    scale = rng.uniform(config.scale_min, config.scale_max)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        image = F.interpolate(image[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
        mask = F.interpolate(mask[None, None].float(), size=(nh, nw), mode="nearest")[0, 0].long()
    if rng.random() < config.hflip_prob:
        image = image.flip(-1)
        mask = mask.flip(-1)
    ph, pw = max(0, config.crop_h - nh), max(0, config.crop_w - nw)
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph), value=0.0)
        mask = F.pad(mask, (0, pw, 0, ph), value=config.ignore_index)
    top = int(rng.integers(0, mask.shape[0] - config.crop_h + 1))
    left = int(rng.integers(0, mask.shape[1] - config.crop_w + 1))
    image = image[:, top : top + config.crop_h, left : left + config.crop_w]
    mask = mask[top : top + config.crop_h, left : left + config.crop_w]
    return SegSample(
        image.clamp(0, 1).contiguous().numpy().astype(np.float32, copy=False),
        mask.contiguous().numpy().astype(np.int64, copy=False),
        name=sample.name,
    )


def coverage(samples, num_classes):
    """Number of samples in which each class appears."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        present = np.unique(s.mask)
        counts[present[present < num_classes]] += 1
    return counts


def min_class_coverage(n, num_classes):
    return math.ceil(n / (2 * (num_classes - 1)))
