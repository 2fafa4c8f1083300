"""Image sources: a synthetic object dataset and on-disk image folders.

The synthetic set exists so the whole toolkit can be exercised at desk
scale. Each image shows one saturated striped object (the label) plus
two dim distractor objects of other classes over a smooth color wash.
Class identity lives entirely in the salient object, so occluding it
moves the prediction to a distractor or the background, and pasting
class textures pulls the prediction toward their class.
"""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DatasetUnavailable

_SPLIT_CODES = {"train": 0, "test": 1}


def class_palette(
    label: int, num_classes: int, saturation: float = 0.85, value: float = 0.9
) -> tuple[np.ndarray, np.ndarray]:
    """Light and dark stripe colors for one class, from the hue wheel."""
    hue = label / num_classes
    base = np.asarray(
        colorsys.hsv_to_rgb(hue, saturation, value), dtype=np.float32
    )
    return base, base * 0.3


def class_pattern(label: int) -> tuple[int, int]:
    """(orientation, stripe period) for one class.

    Orientation 0 runs stripes along rows, 1 along columns, 2 along the
    diagonal; periods cycle through 3, 4, 5 pixels. Periods start at 3
    so no class pattern degenerates into pixel-level noise.
    """
    return label % 3, 3 + (label // 3) % 3


def paint_object(
    canvas: np.ndarray,
    label: int,
    num_classes: int,
    top: int,
    left: int,
    height: int,
    width: int,
    rng: Optional[np.random.Generator] = None,
    saturation: float = 0.85,
    value: float = 0.9,
) -> None:
    """Draw one striped class object onto the canvas, in place."""
    base, dark = class_palette(label, num_classes, saturation, value)
    orient, period = class_pattern(label)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    if orient == 0:
        phase = rows
    elif orient == 1:
        phase = cols
    else:
        phase = rows + cols
    stripe = ((phase // period) % 2).astype(bool)
    patch = np.where(stripe[:, :, None], base, dark).astype(np.float32)
    patch = np.broadcast_to(patch, (height, width, 3)).copy()
    if rng is not None:
        patch += rng.normal(0.0, 0.03, size=patch.shape).astype(np.float32)
    canvas[top : top + height, left : left + width] = np.clip(patch, 0.0, 1.0)


def _color_wash(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth low-saturation background: 4x4 control points, bilinear."""
    ctrl = rng.uniform(0.35, 0.65, size=(4, 4, 3)).astype(np.float32)
    ys = np.linspace(0, 3, size)
    xs = np.linspace(0, 3, size)
    y0 = np.clip(ys.astype(int), 0, 2)
    x0 = np.clip(xs.astype(int), 0, 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = ctrl[y0][:, x0]
    c01 = ctrl[y0][:, x0 + 1]
    c10 = ctrl[y0 + 1][:, x0]
    c11 = ctrl[y0 + 1][:, x0 + 1]
    return (
        c00 * (1 - fy) * (1 - fx)
        + c01 * (1 - fy) * fx
        + c10 * fy * (1 - fx)
        + c11 * fy * fx
    ).astype(np.float32)


class SyntheticObjects:
    """Deterministic generated dataset: salient object plus distractors.

    Every image is a pure function of (dataset seed, split, index), so
    any subset can be regenerated without storing anything. Labels are
    balanced by construction: label = index mod num_classes. Distractor
    classes are always different from the label, which means an image
    whose salient object is fully occluded never falls back onto its
    own class.
    """

    def __init__(self, num_classes: int = 10, size: int = 32, seed: int = 0):
        self.num_classes = num_classes
        self.size = size
        self.seed = seed

    def _rng(self, split: str, index: int) -> np.random.Generator:
        code = _SPLIT_CODES[split]
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, code, index])
        )

    def image_id(self, split: str, index: int) -> str:
        return f"{split}-{index:05d}"

    def image(self, split: str, index: int) -> tuple[np.ndarray, int]:
        """Float32 HWC image in [0, 1] and its label."""
        rng = self._rng(split, index)
        label = index % self.num_classes
        s = self.size
        canvas = np.clip(
            _color_wash(rng, s)
            + rng.normal(0.0, 0.02, size=(s, s, 3)).astype(np.float32),
            0.0,
            1.0,
        )
        for _ in range(2):
            other = int(
                (label + rng.integers(1, self.num_classes)) % self.num_classes
            )
            dh = int(rng.integers(6, 9))
            dw = int(rng.integers(6, 9))
            dt = int(rng.integers(0, s - dh + 1))
            dl = int(rng.integers(0, s - dw + 1))
            paint_object(canvas, other, self.num_classes, dt, dl, dh, dw,
                         rng, saturation=0.45, value=0.6)
        height = int(rng.integers(10, 14))
        width = int(rng.integers(10, 14))
        top = int(rng.integers(0, s - height + 1))
        left = int(rng.integers(0, s - width + 1))
        paint_object(canvas, label, self.num_classes, top, left,
                     height, width, rng)
        return canvas.astype(np.float32), label

    def batch(self, split: str, start: int, count: int):
        images = np.empty((count, self.size, self.size, 3), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            images[i], labels[i] = self.image(split, start + i)
        return images, labels

    def class_images(self, category: int, limit: int, split: str = "train"):
        """The first `limit` images of one class from a split."""
        out = []
        for i in range(limit):
            index = int(category) + self.num_classes * i
            img, label = self.image(split, index)
            assert label == int(category)
            out.append(img)
        return out

    def tasks(self, split: str, count: int, start: int = 0):
        """(image_id, image, label) triples for attack evaluation."""
        out = []
        for i in range(start, start + count):
            img, label = self.image(split, i)
            out.append((self.image_id(split, i), img, label))
        return out


class ImageFolder:
    """dataset-root/<category>/<image files> as attack or build input.

    Numeric directory names become their integer category id; any other
    names are assigned ids by sorted position. Images are loaded as
    float HWC in [0, 1], optionally square-resized.
    """

    EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

    def __init__(self, root, resolution: Optional[int] = None):
        self.root = Path(root)
        self.resolution = resolution
        if not self.root.is_dir():
            raise DatasetUnavailable(f"{self.root} is not a directory")
        dirs = sorted(p for p in self.root.iterdir() if p.is_dir())
        if not dirs:
            raise DatasetUnavailable(f"{self.root} has no category directories")
        self.category_dirs: dict[int, Path] = {}
        if all(p.name.lstrip("-").isdigit() for p in dirs):
            for p in dirs:
                self.category_dirs[int(p.name)] = p
        else:
            for i, p in enumerate(dirs):
                self.category_dirs[i] = p

    def categories(self) -> list[int]:
        return sorted(self.category_dirs)

    def _load(self, path: Path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as im:
            im = im.convert("RGB")
            if self.resolution is not None:
                im = im.resize((self.resolution, self.resolution),
                               Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0

    def class_images(self, category: int, limit: int):
        cdir = self.category_dirs.get(int(category))
        if cdir is None:
            raise DatasetUnavailable(f"no category {category} under {self.root}")
        files = sorted(
            p for p in cdir.iterdir() if p.suffix.lower() in self.EXTENSIONS
        )
        if not files:
            raise DatasetUnavailable(f"no images under {cdir}")
        return [self._load(p) for p in files[:limit]]
