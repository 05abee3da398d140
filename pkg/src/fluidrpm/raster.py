"""Rasterize tile descriptors into 100x100 grayscale canvases.

Each canvas is split into a 3x3 grid of 33x33 cells (row/column 99 stays
background). A shape is filled where the pixel center falls inside it; there
is no anti-aliasing, so every shape pixel carries exactly the tile intensity.
"""

from __future__ import annotations

import enum
import functools
import math
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .testgen import TileDescriptor

CANVAS_SIZE = 100
GRID = 3
CELL = CANVAS_SIZE // GRID  # 33
MIN_DIAMETER = 15.0
MAX_DIAMETER = 30.0
STAR_INNER_RATIO = 0.4


class ParameterError(ValueError):
    """Invalid rendering parameter."""


class ShapeKind(str, enum.Enum):
    TRIANGLE = "triangle"
    SQUARE = "square"
    PENTAGON = "pentagon"
    STAR = "star"
    CIRCLE = "circle"


def _outline(kind: ShapeKind) -> np.ndarray | None:
    """Unit-circumradius vertices (x right, y up), first vertex pointing up."""
    if kind is ShapeKind.CIRCLE:
        return None
    if kind is ShapeKind.STAR:
        angles = np.arange(10) * (np.pi / 5)
        radii = np.where(np.arange(10) % 2 == 0, 1.0, STAR_INNER_RATIO)
    else:
        m = {ShapeKind.TRIANGLE: 3, ShapeKind.SQUARE: 4, ShapeKind.PENTAGON: 5}[kind]
        angles = np.arange(m) * (2 * np.pi / m)
        radii = np.ones(m)
    # angle measured clockwise from "up"
    return np.stack([radii * np.sin(angles), radii * np.cos(angles)], axis=1)


def _boundary_radius(kind: ShapeKind, theta: np.ndarray) -> np.ndarray:
    """Distance from the center to the unit shape's boundary along ``theta``.

    All five shapes are star-shaped about their center, so a point lies
    inside iff its distance is at most this radius (times the scale).
    """
    verts = _outline(kind)
    if verts is None:
        return np.ones_like(theta)
    m = len(verts)
    step = 2 * np.pi / m
    sector = np.floor(np.mod(theta, 2 * np.pi) / step).astype(int) % m
    a = verts[sector]
    b = verts[(sector + 1) % m]
    ux, uy = np.sin(theta), np.cos(theta)
    ex, ey = b[..., 0] - a[..., 0], b[..., 1] - a[..., 1]
    # ray s*u meets segment a + t(b - a) at s = (a x b) / (u x (b - a))
    return (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]) / (ux * ey - uy * ex)


@functools.lru_cache(maxsize=512)
def _mask(kind: ShapeKind, diameter: float, cy: float, cx: float, rows: int, cols: int) -> np.ndarray:
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    dy = (yy + 0.5) - cy
    dx = (xx + 0.5) - cx
    dist = np.hypot(dx, dy)
    theta = np.arctan2(dx, -dy)
    mask = dist <= _boundary_radius(kind, theta) * (diameter / 2.0)
    mask.setflags(write=False)
    return mask


def render_shape(
    kind: ShapeKind,
    diameter: float,
    intensity: float,
    center: tuple[float, float] = (CELL / 2, CELL / 2),
    patch_shape: tuple[int, int] = (CELL, CELL),
) -> np.ndarray:
    """Filled shape inscribed in a circle of ``diameter`` pixels about ``center``.

    ``center`` is (row, col) in continuous patch coordinates, where pixel
    (r, c) covers [r, r+1) x [c, c+1). Returns a float32 patch that equals
    ``intensity`` inside the shape and 0 elsewhere.
    """
    kind = ShapeKind(kind)
    if not MIN_DIAMETER <= diameter <= MAX_DIAMETER:
        raise ParameterError(f"diameter {diameter} outside [{MIN_DIAMETER}, {MAX_DIAMETER}]")
    if not 0.0 < intensity <= 1.0:
        raise ParameterError(f"intensity {intensity} outside (0, 1]")
    mask = _mask(kind, float(diameter), float(center[0]), float(center[1]), *patch_shape)
    return np.where(mask, np.float32(intensity), np.float32(0.0))


def cell_origin(cell: int) -> tuple[int, int]:
    row, col = divmod(cell, GRID)
    return row * CELL, col * CELL


def render_tile(desc: "TileDescriptor") -> np.ndarray:
    """Render ``desc`` to a (100, 100) float32 canvas."""
    positions = tuple(int(p) for p in desc.positions)
    if sorted(positions) != list(range(GRID * GRID)):
        raise ParameterError(f"positions {positions} is not a permutation of 0..8")
    if not 1 <= int(desc.number) <= GRID * GRID:
        raise ParameterError(f"number {desc.number} outside 1..9")
    patch = render_shape(desc.shape, desc.size, desc.color)
    canvas = np.zeros((CANVAS_SIZE, CANVAS_SIZE), dtype=np.float32)
    for cell in positions[: int(desc.number)]:
        r0, c0 = cell_origin(cell)
        canvas[r0 : r0 + CELL, c0 : c0 + CELL] = patch
    return canvas


# ---------------------------------------------------------------------------
# PGM (binary, 8-bit)
# ---------------------------------------------------------------------------


def to_bytes(canvas: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] intensities to uint8, rounding halves away from zero."""
    v = np.clip(np.asarray(canvas, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def encode_pgm(canvas: np.ndarray) -> bytes:
    pixels = to_bytes(canvas)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path: str | Path, canvas: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(canvas))


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse an 8-bit binary PGM; returns the uint8 pixel grid."""
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    body = data[pos + 1 :]
    if len(body) != w * h:
        raise ValueError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def disc_area(diameter: float) -> float:
    return math.pi * (diameter / 2.0) ** 2
