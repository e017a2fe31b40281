"""Render a vector semantic map into an RGB bird's-eye raster.

Colors follow a fixed code (pink obstacles, yellow road boundaries, grey
crossings, light bicycle lanes, green centerlines, blue movable boxes, white
lane/edge lines). Rendering samples pixel centers, with no anti-aliasing, so
identical inputs always give byte-identical images.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import MapKind, SemanticMap

BACKGROUND = (0, 0, 0)

COLOR_CODE: dict[MapKind, tuple[int, int, int]] = {
    MapKind.UNMOVABLE_OBSTACLE: (255, 105, 180),
    MapKind.ROAD_BOUNDARY: (255, 255, 0),
    MapKind.PEDESTRIAN_CROSSING: (128, 128, 128),
    MapKind.BICYCLE_LANE: (220, 220, 220),
    MapKind.LANE_CENTERLINE: (0, 255, 0),
    MapKind.MOVABLE_OBSTACLE_BOX: (0, 0, 255),
    MapKind.LANE_LINE_DOTTED: (255, 255, 255),
    MapKind.EDGE_LINE_SOLID: (255, 255, 255),
}

# back to front; later kinds overdraw earlier ones
DRAW_ORDER = (
    MapKind.BICYCLE_LANE,
    MapKind.PEDESTRIAN_CROSSING,
    MapKind.UNMOVABLE_OBSTACLE,
    MapKind.LANE_CENTERLINE,
    MapKind.LANE_LINE_DOTTED,
    MapKind.EDGE_LINE_SOLID,
    MapKind.ROAD_BOUNDARY,
    MapKind.MOVABLE_OBSTACLE_BOX,
)

STROKE_WIDTH_PX = 2.0
DASH_PX = 4.0
GAP_PX = 4.0

DEFAULT_SIZE = 200
DEFAULT_RESOLUTION = 0.5


@dataclass(frozen=True, eq=False)
class RasterImage:
    """RGB raster. ``origin`` is the world coordinate of the image's lower-left corner."""

    pixels: np.ndarray  # (height, width, 3) uint8
    resolution: float
    origin: tuple[float, float]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def channels_first(self) -> np.ndarray:
        """(3, H, W) float array scaled to [0, 1]."""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1), dtype=np.float64) / 255.0

    def digest(self) -> str:
        """sha256 over the raw RGB bytes."""
        return hashlib.sha256(np.ascontiguousarray(self.pixels).tobytes()).hexdigest()


def world_to_pixel(img: RasterImage, p) -> tuple[int, int]:
    """(col, row) of the pixel containing world point ``p``; +y world is up."""
    col = math.floor((p[0] - img.origin[0]) / img.resolution)
    row_from_bottom = math.floor((p[1] - img.origin[1]) / img.resolution)
    return col, img.height - 1 - row_from_bottom


def pixel_to_world(img: RasterImage, px) -> tuple[float, float]:
    """World coordinate of a pixel's center."""
    col, row = px
    x = img.origin[0] + (col + 0.5) * img.resolution
    y = img.origin[1] + (img.height - 1 - row + 0.5) * img.resolution
    return x, y


def _pixel_grid(geom_px: np.ndarray, pad: float, w: int, h: int):
    """Pixel-center coordinates over the clipped bounding box of ``geom_px``."""
    c0 = max(int(math.floor(geom_px[:, 0].min() - pad)), 0)
    c1 = min(int(math.ceil(geom_px[:, 0].max() + pad)), w - 1)
    r0 = max(int(math.floor(geom_px[:, 1].min() - pad)), 0)
    r1 = min(int(math.ceil(geom_px[:, 1].max() + pad)), h - 1)
    if c0 > c1 or r0 > r1:
        return None
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    cx, cy = np.meshgrid(cols + 0.5, rows + 0.5)
    return (r0, r1, c0, c1), cx, cy


def _fill_polygon(canvas, geom_px, color):
    h, w = canvas.shape[:2]
    grid = _pixel_grid(geom_px, 0.0, w, h)
    if grid is None:
        return
    (r0, r1, c0, c1), cx, cy = grid
    inside = np.zeros(cx.shape, dtype=bool)
    xs, ys = geom_px[:, 0], geom_px[:, 1]
    n = len(geom_px)
    for i in range(n):
        x0, y0 = xs[i], ys[i]
        x1, y1 = xs[(i + 1) % n], ys[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > cy) != (y1 > cy)
        x_at = x0 + (cy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (cx < x_at)
    canvas[r0 : r1 + 1, c0 : c1 + 1][inside] = color


def _stroke_polyline(canvas, geom_px, color, dashed):
    h, w = canvas.shape[:2]
    half = STROKE_WIDTH_PX / 2.0
    grid = _pixel_grid(geom_px, half + 1.0, w, h)
    if grid is None:
        return
    (r0, r1, c0, c1), cx, cy = grid
    hit = np.zeros(cx.shape, dtype=bool)
    arc = 0.0
    period = DASH_PX + GAP_PX
    for (x0, y0), (x1, y1) in zip(geom_px[:-1], geom_px[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg_len = math.hypot(dx, dy)
        if seg_len == 0.0:
            on = np.hypot(cx - x0, cy - y0) <= half
            s = np.full(cx.shape, arc)
        else:
            u = np.clip(((cx - x0) * dx + (cy - y0) * dy) / (seg_len * seg_len), 0.0, 1.0)
            on = np.hypot(cx - (x0 + u * dx), cy - (y0 + u * dy)) <= half
            s = arc + u * seg_len
        if dashed:
            on &= np.mod(s, period) < DASH_PX
        hit |= on
        arc += seg_len
    canvas[r0 : r1 + 1, c0 : c1 + 1][hit] = color


def rasterize(
    semantic_map: SemanticMap,
    center,
    size: int | tuple[int, int] = DEFAULT_SIZE,
    resolution: float = DEFAULT_RESOLUTION,
) -> RasterImage:
    """Render ``semantic_map`` into a ``size`` window centered on world point ``center``."""
    width, height = (size, size) if np.isscalar(size) else size
    width, height = int(width), int(height)
    if width <= 0 or height <= 0:
        raise ValueError(f"raster size must be positive, got {width}x{height}")
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    origin = (float(center[0]) - width * resolution / 2.0, float(center[1]) - height * resolution / 2.0)
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND

    by_kind: dict[MapKind, list] = {k: [] for k in DRAW_ORDER}
    for el in semantic_map.elements:
        by_kind[el.kind].append(el)
    for kind in DRAW_ORDER:
        color = np.array(COLOR_CODE[kind], dtype=np.uint8)
        for el in by_kind[kind]:
            g = el.geometry
            if len(g) == 0:
                continue
            # world -> continuous pixel coordinates (col, row), row grows downward
            gpx = np.stack([(g[:, 0] - origin[0]) / resolution, height - (g[:, 1] - origin[1]) / resolution], axis=1)
            if kind.is_polygon:
                _fill_polygon(canvas, gpx, color)
            else:
                _stroke_polyline(canvas, gpx, color, dashed=kind is MapKind.LANE_LINE_DOTTED)
    return RasterImage(canvas, float(resolution), origin)


def extract_patch(img, agent_px, k: int = 11) -> np.ndarray:
    """k x k window centered on ``agent_px`` = (col, row), zero-padded out of bounds.

    ``img`` is a channel-first (C, H, W) array or a RasterImage; the result is
    (C, k, k).
    """
    if k % 2 != 1:
        raise ValueError("patch size must be odd")
    fmap = img.channels_first() if isinstance(img, RasterImage) else np.asarray(img)
    c, h, w = fmap.shape
    col, row = int(agent_px[0]), int(agent_px[1])
    r = k // 2
    out = np.zeros((c, k, k), dtype=fmap.dtype)
    r0, r1 = row - r, row + r + 1
    c0, c1 = col - r, col + r + 1
    sr0, sr1 = max(r0, 0), min(r1, h)
    sc0, sc1 = max(c0, 0), min(c1, w)
    if sr0 < sr1 and sc0 < sc1:
        out[:, sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = fmap[:, sr0:sr1, sc0:sc1]
    return out


def write_ppm(img: RasterImage, path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img.pixels).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    body = data[m.end() : m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_png(img: RasterImage, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(img.pixels)).save(path, format="PNG")


def save_raster(img: RasterImage, path) -> None:
    """Write PNG or PPM depending on the file suffix."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(img, path)
    else:
        write_png(img, path)
