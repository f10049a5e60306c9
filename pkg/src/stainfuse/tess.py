"""Slide tessellation: fixed 237-px tile grids at four magnifications.

A slide enters at its scan resolution (0.25 um/px for a 40x scan), gets
box-filter downscaled to the target magnification, and is cut into a
non-overlapping grid of 237x237 tiles anchored at pixel (0, 0).  A tile is
kept when it lies fully inside the image and at least ``min_coverage`` of its
area falls inside the tumor-annotation polygons.

Mask rasterization convention (pinned for reproducible tile sets): even-odd
scanline fill sampled at pixel centers (x + 0.5, y + 0.5); an edge spans rows
over the half-open interval [y_min, y_max); a crossing at or left of a pixel
center flips that pixel's parity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

TILE_EDGE_PX = 237
BASE_UM_PER_PX = 0.25


class Stain(Enum):
    HE = "HE"
    MELANA = "MelanA"

    @classmethod
    def parse(cls, text: str) -> "Stain":
        for stain in cls:
            if text.lower() == stain.value.lower():
                return stain
        raise ValueError(f"unknown stain: {text!r}")


class Magnification(Enum):
    """Nominal objective power with its fixed scan resolution."""

    X40 = ("40x", 0.25)
    X20 = ("20x", 0.5)
    X10 = ("10x", 1.0)
    X5 = ("5x", 2.0)

    def __init__(self, label: str, um_per_px: float):
        self.label = label
        self.um_per_px = um_per_px

    @classmethod
    def parse(cls, text: str) -> "Magnification":
        text = text.strip().lower()
        for mag in cls:
            if text in (mag.label, mag.name.lower()):
                return mag
        raise ValueError(f"unknown magnification: {text!r}")


def mag_resolution(level: Magnification) -> float:
    """Micrometers per pixel at the given magnification."""
    return level.um_per_px


def tile_physical_edge(level: Magnification) -> float:
    """Physical edge length of one tile in micrometers (237 px x resolution)."""
    return TILE_EDGE_PX * level.um_per_px


@dataclass(frozen=True)
class TileRef:
    """One tile of the grid for a given slide and magnification."""

    slide_id: str
    magnification: Magnification
    grid_x: int
    grid_y: int
    edge_px: int = TILE_EDGE_PX

    @property
    def origin_x(self) -> int:
        return self.grid_x * self.edge_px

    @property
    def origin_y(self) -> int:
        return self.grid_y * self.edge_px

    def png_name(self) -> str:
        # <slide_id>_<mag>_<grid_x>_<grid_y>.png
        return f"{self.slide_id}_{self.magnification.label}_{self.grid_x}_{self.grid_y}.png"


@dataclass
class AnnotationMask:
    """Tumor annotation: closed polygons in base-resolution (0.25 um/px) pixel coords."""

    slide_id: str
    polygons: list

    def __post_init__(self):
        for i, poly in enumerate(self.polygons):
            pts = np.asarray(poly, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
                raise ValueError(f"polygon {i} needs >= 3 (x, y) vertices")
            if np.any(pts < 0):
                raise ValueError(f"polygon {i} has negative coordinates")

    def scaled(self, factor: float) -> list:
        """Polygon list with coordinates divided by ``factor``."""
        return [np.asarray(p, dtype=np.float64) / factor for p in self.polygons]


@dataclass
class SlideImage:
    """RGB slide raster at a declared resolution."""

    slide_id: str
    stain: Stain
    pixels: np.ndarray  # (H, W, 3) uint8
    um_per_px: float

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError("pixels must be an (H, W, 3) uint8 array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if self.um_per_px not in (0.25, 0.5, 1.0, 2.0):
            raise ValueError(f"unsupported um_per_px: {self.um_per_px}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def downscale(image: SlideImage, target: Magnification) -> SlideImage:
    """Box-filter downsample to the target magnification's resolution.

    The ratio target/source must be an integral power of two; output
    dimensions are floor(input / ratio) and each output pixel is the
    round-half-up mean of its source block.
    """
    ratio = target.um_per_px / image.um_per_px
    if ratio < 1.0:
        raise ValueError(f"cannot upscale: image at {image.um_per_px} um/px, target {target.um_per_px}")
    r = int(round(ratio))
    if r != ratio or (r & (r - 1)) != 0:
        raise ValueError(f"downscale ratio must be a power of two, got {ratio}")
    if r == 1:
        return SlideImage(image.slide_id, image.stain, image.pixels.copy(), target.um_per_px)
    out_h, out_w = image.height // r, image.width // r
    if out_h < 1 or out_w < 1:
        raise ValueError(f"image {image.width}x{image.height} too small for ratio {r}")
    trimmed = image.pixels[: out_h * r, : out_w * r]
    sums = trimmed.reshape(out_h, r, out_w, r, 3).sum(axis=(1, 3), dtype=np.uint32)
    # round-half-up of sums / r^2, kept in exact integer arithmetic
    n = r * r
    out = ((2 * sums + n) // (2 * n)).astype(np.uint8)
    return SlideImage(image.slide_id, image.stain, out, target.um_per_px)


def rasterize_polygons(polygons, width: int, height: int) -> np.ndarray:
    """Even-odd fill of the polygons over a (height, width) pixel-center grid."""
    ex0 = []
    ey0 = []
    ex1 = []
    ey1 = []
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64)
        ex0.append(pts[:, 0])
        ey0.append(pts[:, 1])
        ex1.append(np.roll(pts[:, 0], -1))
        ey1.append(np.roll(pts[:, 1], -1))
    flips = np.zeros((height, width + 1), dtype=np.int32)
    if not ex0:
        return np.zeros((height, width), dtype=bool)
    x0 = np.concatenate(ex0)
    y0 = np.concatenate(ey0)
    x1 = np.concatenate(ex1)
    y1 = np.concatenate(ey1)
    keep = y0 != y1  # horizontal edges never cross a scanline
    x0, y0, x1, y1 = x0[keep], y0[keep], x1[keep], y1[keep]
    ylo = np.minimum(y0, y1)
    yhi = np.maximum(y0, y1)
    # rows whose center y + 0.5 lies in [ylo, yhi)
    r0 = np.maximum(np.ceil(ylo - 0.5).astype(np.int64), 0)
    r1 = np.minimum(np.ceil(yhi - 0.5).astype(np.int64), height)
    counts = np.maximum(r1 - r0, 0)
    if counts.sum() == 0:
        return np.zeros((height, width), dtype=bool)
    edge_of = np.repeat(np.arange(len(counts)), counts)
    # rows for every (edge, scanline) pair, built without a Python loop
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rows = np.arange(counts.sum()) - np.repeat(offsets, counts) + np.repeat(r0, counts)
    yc = rows + 0.5
    xc = x0[edge_of] + (yc - y0[edge_of]) * (x1[edge_of] - x0[edge_of]) / (y1[edge_of] - y0[edge_of])
    # first pixel whose center x + 0.5 is at or right of the crossing;
    # clipping to `width` parks off-image crossings in the unused last slot
    cols = np.clip(np.ceil(xc - 0.5).astype(np.int64), 0, width)
    np.add.at(flips, (rows, cols), 1)
    parity = np.cumsum(flips[:, :width], axis=1)
    return (parity & 1).astype(bool)


def tessellate(
    image: SlideImage,
    mask: AnnotationMask,
    level: Magnification,
    min_coverage: float = 0.5,
) -> list:
    """Grid the image into 237-px tiles restricted to the annotation mask.

    The image must already be at the target magnification's resolution; mask
    coordinates are base-resolution and rescaled internally.  Tiles are
    emitted row-major by (grid_y, grid_x) when fully inside the image and
    covered by the mask for at least ``min_coverage`` of their area.
    """
    if image.um_per_px != level.um_per_px:
        raise ValueError(
            f"image is at {image.um_per_px} um/px but {level.label} needs {level.um_per_px}; downscale first"
        )
    n_x = image.width // TILE_EDGE_PX
    n_y = image.height // TILE_EDGE_PX
    if n_x < 1 or n_y < 1 or not mask.polygons:
        return []
    scale = level.um_per_px / BASE_UM_PER_PX
    inside = rasterize_polygons(mask.scaled(scale), image.width, image.height)
    e = TILE_EDGE_PX
    covered = inside[: n_y * e, : n_x * e].reshape(n_y, e, n_x, e).sum(axis=(1, 3), dtype=np.int64)
    tile_area = e * e
    tiles = []
    for gy in range(n_y):
        for gx in range(n_x):
            if covered[gy, gx] >= min_coverage * tile_area:
                tiles.append(TileRef(image.slide_id, level, gx, gy))
    return tiles


def tile_pixels(image: SlideImage, tile: TileRef) -> np.ndarray:
    """Crop one tile's pixels out of an image at the tile's magnification."""
    if image.um_per_px != tile.magnification.um_per_px:
        raise ValueError("image resolution does not match the tile's magnification")
    y0, x0 = tile.origin_y, tile.origin_x
    return image.pixels[y0 : y0 + tile.edge_px, x0 : x0 + tile.edge_px]


# ---------------------------------------------------------------------------
# File interfaces


def load_annotation(path) -> AnnotationMask:
    """Read an annotation JSON: {"slide_id": ..., "polygons": [[[x, y], ...], ...]}."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return AnnotationMask(slide_id=data["slide_id"], polygons=data["polygons"])


def save_annotation(mask: AnnotationMask, path) -> None:
    payload = {
        "slide_id": mask.slide_id,
        "polygons": [[[float(x), float(y)] for x, y in poly] for poly in mask.polygons],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)
        f.write("\n")


TILE_MANIFEST_HEADER = ["slide_id", "stain", "magnification", "grid_x", "grid_y", "origin_x", "origin_y", "edge_px"]


def write_tile_manifest(path, rows) -> None:
    """Write tile refs as CSV; ``rows`` is an iterable of (stain, TileRef)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TILE_MANIFEST_HEADER)
        for stain, tile in rows:
            writer.writerow(
                [
                    tile.slide_id,
                    stain.value,
                    tile.magnification.label,
                    tile.grid_x,
                    tile.grid_y,
                    tile.origin_x,
                    tile.origin_y,
                    tile.edge_px,
                ]
            )


def read_tile_manifest(path) -> list:
    """Read a tile manifest CSV back into (stain, TileRef) pairs."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != TILE_MANIFEST_HEADER:
            raise ValueError(f"bad tile manifest header: {header}")
        for row in reader:
            if not row:
                continue
            slide_id, stain, mag, gx, gy, _ox, _oy, edge = row
            out.append(
                (Stain.parse(stain), TileRef(slide_id, Magnification.parse(mag), int(gx), int(gy), int(edge)))
            )
    return out


def write_tile_png(image: SlideImage, tile: TileRef, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / tile.png_name()
    Image.fromarray(tile_pixels(image, tile)).save(path, compress_level=1)
    return path
