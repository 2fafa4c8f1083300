"""Search spaces, action decoding, and patch rendering.

Everything here is pure: actions (flat integer vectors) map to pixel
regions, regions map to areas, and patches are pasted onto copies of the
input image. Rectangles use half-open [r0, r1) x [c0, c1) bounds, so a
degenerate corner pair covers zero pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MONO = "mono"
RGB = "rgb"
TEXTURE = "texture"

# action steps consumed per patch in each space
_MONO_STEPS = 4
_RGB_STEPS = 7


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle with half-open bounds, already clipped."""

    r0: int
    c0: int
    r1: int
    c1: int

    @property
    def height(self) -> int:
        return max(0, self.r1 - self.r0)

    @property
    def width(self) -> int:
        return max(0, self.c1 - self.c0)

    @property
    def area(self) -> int:
        return self.height * self.width

    def is_empty(self) -> bool:
        return self.area == 0


@dataclass(frozen=True)
class Region:
    """Union of rectangles inside an image of the given size."""

    height: int
    width: int
    rects: tuple[Rect, ...]

    def mask(self) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        for r in self.rects:
            out[r.r0 : r.r1, r.c0 : r.c1] = True
        return out


def region_area(region: Region) -> tuple[int, float]:
    """Union area in pixels plus its fraction of the image.

    Overlapping rectangles are counted once.
    """
    pixels = int(region.mask().sum())
    return pixels, pixels / float(region.height * region.width)


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Describes one search space as per-step categorical domains.

    variant mono uses 4 steps per patch (two corner pairs), rgb 7
    (corners plus quantized RGB), texture 5 (paste position, texture index,
    crop position) with an optional leading category-choice step when
    `category_pool` is set instead of `fixed_category`.
    """

    variant: str
    height: int
    width: int
    num_patches: int
    cardinalities: tuple[int, ...]
    color_levels: int = 32
    patch_side: int = 0
    texture_count: int = 30
    crop_positions: int = 0
    fixed_category: Optional[int] = None
    category_pool: tuple[int, ...] = ()

    @property
    def steps_per_patch(self) -> int:
        return len(self.cardinalities) // self.num_patches

    def validate(self, actions: Sequence[int]) -> None:
        if len(actions) != len(self.cardinalities):
            raise ValueError(
                f"action vector has {len(actions)} steps, space expects "
                f"{len(self.cardinalities)}"
            )
        for t, (a, card) in enumerate(zip(actions, self.cardinalities)):
            if not 0 <= int(a) < card:
                raise ValueError(f"step {t}: action {a} outside domain [0, {card})")


def mono_space(num_patches: int, height: int, width: int) -> SearchSpaceSpec:
    cards = (height, width, height, width) * num_patches
    return SearchSpaceSpec(MONO, height, width, num_patches, cards)


def rgb_space(
    num_patches: int, height: int, width: int, color_levels: int = 32
) -> SearchSpaceSpec:
    cards = (height, width, height, width, color_levels, color_levels, color_levels)
    return SearchSpaceSpec(
        RGB, height, width, num_patches, cards * num_patches, color_levels
    )


def patch_side_for_area(area_pct: float, height: int, width: int) -> int:
    """Square side whose area is approximately area_pct percent of the image."""
    side = int(round(math.sqrt(area_pct / 100.0 * height * width)))
    return max(1, min(side, height, width))


def texture_space(
    height: int,
    width: int,
    patch_side: int,
    texture_resolution: int,
    num_patches: int = 1,
    texture_count: int = 30,
    fixed_category: Optional[int] = None,
    category_pool: Sequence[int] = (),
) -> SearchSpaceSpec:
    """Textured-square space: 5 steps per patch, 6 with a category pool.

    Crop positions keep the square fully inside the texture image; the
    paste position ranges over the whole image and clips at the borders.
    """
    if (fixed_category is None) == (len(category_pool) == 0):
        raise ValueError("exactly one of fixed_category / category_pool required")
    crop_positions = texture_resolution - patch_side + 1
    if crop_positions < 1:
        raise ValueError(
            f"patch side {patch_side} larger than texture resolution "
            f"{texture_resolution}"
        )
    per_patch = [height, width, texture_count, crop_positions, crop_positions]
    if category_pool:
        per_patch.insert(0, len(category_pool))
    return SearchSpaceSpec(
        TEXTURE,
        height,
        width,
        num_patches,
        tuple(per_patch) * num_patches,
        patch_side=patch_side,
        texture_count=texture_count,
        crop_positions=crop_positions,
        fixed_category=fixed_category,
        category_pool=tuple(category_pool),
    )


def _clip_rect(r0: int, c0: int, r1: int, c1: int, height: int, width: int) -> Rect:
    return Rect(
        max(0, min(r0, height)),
        max(0, min(c0, width)),
        max(0, min(r1, height)),
        max(0, min(c1, width)),
    )


@dataclass(frozen=True)
class TexturePlacement:
    """One textured square: paste position, dictionary entry, crop origin."""

    row: int
    col: int
    side: int
    category: int
    index: int
    crop_row: int
    crop_col: int

    def rect(self, height: int, width: int) -> Rect:
        return _clip_rect(
            self.row, self.col, self.row + self.side, self.col + self.side,
            height, width,
        )


def actions_to_regions(actions: Sequence[int], space: SearchSpaceSpec) -> Region:
    """Map an action vector to the pixel region its patches cover.

    Rectangle corner pairs are min/max-normalized so corner order does not
    matter; texture squares clip at the image borders.
    """
    space.validate(actions)
    rects = []
    if space.variant in (MONO, RGB):
        step = _MONO_STEPS if space.variant == MONO else _RGB_STEPS
        for p in range(space.num_patches):
            u1, v1, u2, v2 = (int(a) for a in actions[p * step : p * step + 4])
            rects.append(
                _clip_rect(
                    min(u1, u2), min(v1, v2), max(u1, u2), max(v1, v2),
                    space.height, space.width,
                )
            )
    elif space.variant == TEXTURE:
        for pl in actions_to_placements(actions, space):
            rects.append(pl.rect(space.height, space.width))
    else:
        raise ValueError(f"unknown space variant {space.variant!r}")
    return Region(space.height, space.width, tuple(rects))


def actions_to_colors(actions: Sequence[int], space: SearchSpaceSpec) -> list[np.ndarray]:
    """Per-patch RGB triples in [0, 1] decoded from quantized color steps."""
    if space.variant != RGB:
        raise ValueError("color decoding only applies to the RGB space")
    space.validate(actions)
    denom = float(space.color_levels - 1)
    colors = []
    for p in range(space.num_patches):
        levels = actions[p * _RGB_STEPS + 4 : p * _RGB_STEPS + 7]
        colors.append(np.asarray([v / denom for v in levels], dtype=np.float32))
    return colors


def actions_to_placements(
    actions: Sequence[int], space: SearchSpaceSpec
) -> list[TexturePlacement]:
    if space.variant != TEXTURE:
        raise ValueError("placements only apply to the texture space")
    space.validate(actions)
    step = space.steps_per_patch
    placements = []
    for p in range(space.num_patches):
        a = [int(v) for v in actions[p * step : (p + 1) * step]]
        if space.category_pool:
            category = space.category_pool[a[0]]
            a = a[1:]
        else:
            category = space.fixed_category
        row, col, index, crop_row, crop_col = a
        placements.append(
            TexturePlacement(row, col, space.patch_side, category, index,
                             crop_row, crop_col)
        )
    return placements


def apply_monochrome(image: np.ndarray, region: Region, value) -> np.ndarray:
    """Set every pixel inside the region to a per-channel constant.

    Pixels outside the region are bit-identical to the input.
    """
    if image.shape[:2] != (region.height, region.width):
        raise ValueError(
            f"image {image.shape[:2]} does not match region "
            f"{(region.height, region.width)}"
        )
    out = image.copy()
    fill = np.asarray(value, dtype=image.dtype)
    for r in region.rects:
        if not r.is_empty():
            out[r.r0 : r.r1, r.c0 : r.c1] = fill
    return out


def apply_texture(
    image: np.ndarray, placements: Sequence[TexturePlacement], textures
) -> np.ndarray:
    """Paste texture crops onto a copy of the image.

    `textures` is anything with lookup(category, index) -> uint8 HxWx3;
    later placements overwrite earlier ones where they overlap. Crops are
    taken whole from the texture (the space guarantees they fit) and only
    the paste clips at the image borders.
    """
    h, w = image.shape[:2]
    out = image.copy()
    for pl in placements:
        tex = textures.lookup(pl.category, pl.index)
        crop = tex[pl.crop_row : pl.crop_row + pl.side,
                   pl.crop_col : pl.crop_col + pl.side]
        rect = pl.rect(h, w)
        if rect.is_empty():
            continue
        patch = crop[: rect.height, : rect.width]
        if patch.dtype == np.uint8:
            patch = patch.astype(np.float32) / 255.0
        out[rect.r0 : rect.r1, rect.c0 : rect.c1] = patch.astype(image.dtype)
    return out


def describe_monochrome(region: Region, colors) -> list[dict]:
    """JSON-ready descriptors for monochrome patches.

    `colors` is one RGB triple shared by all patches or a per-patch list.
    """
    if isinstance(colors, np.ndarray) and colors.ndim == 1:
        colors = [colors] * len(region.rects)
    elif not isinstance(colors, (list, tuple)):
        colors = [colors] * len(region.rects)
    return [
        {
            "kind": "monochrome",
            "corners": [r.r0, r.c0, r.r1, r.c1],
            "color": [float(v) for v in np.asarray(c).ravel()],
        }
        for r, c in zip(region.rects, colors)
    ]


def describe_placements(placements: Sequence[TexturePlacement]) -> list[dict]:
    return [
        {
            "kind": "texture",
            "top_left": [pl.row, pl.col],
            "side": pl.side,
            "texture": {
                "category": int(pl.category),
                "index": int(pl.index),
                "crop": [pl.crop_row, pl.crop_col],
            },
        }
        for pl in placements
    ]


def placements_region(
    placements: Sequence[TexturePlacement], height: int, width: int
) -> Region:
    return Region(height, width,
                  tuple(pl.rect(height, width) for pl in placements))
