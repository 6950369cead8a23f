"""
SVG / PGM artifacts: curve paths, masks and block grids.
Output bytes depend only on the input, so renders can be diffed.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from core.block_analysis import BlockGrid, BlockLabel
from core.config import RENDER_CAP
from core.errors import CapacityError, ValidationError
from core.grid_curve import CurveMapping
from core.patterns import MaskMatrix

logger = logging.getLogger(__name__)

# PGM tones
TONE_ALLOWED = 255
TONE_BLOCKED = 0
BLOCK_TONES = {
    BlockLabel.FULL: 0,
    BlockLabel.PARTIAL: 128,
    BlockLabel.EMPTY: 255,
}
SVG_FILL = {
    BlockLabel.FULL: "#000000",
    BlockLabel.PARTIAL: "#808080",
    BlockLabel.EMPTY: "#ffffff",
}


def _check_cap(n: int, cap: Optional[int]):
    cap = RENDER_CAP if cap is None else cap
    if n > cap:
        logger.warning(f"Refusing to render N={n} above cap {cap}")
        raise CapacityError(f"N={n} exceeds render cap {cap}", n=n, cap=cap)


def _pgm(pixels: np.ndarray) -> bytes:
    """Binary (P5) 8-bit greymap"""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def _upscale(pixels: np.ndarray, scale: int) -> np.ndarray:
    if scale < 1:
        raise ValidationError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return pixels
    return np.repeat(np.repeat(pixels, scale, axis=0), scale, axis=1)


# ============================================================================
# CURVE
# ============================================================================

def curve_svg(mapping: CurveMapping, cell: int = 10, cap: Optional[int] = None) -> bytes:
    """The curve as one polyline through cell centres, in sequence order."""
    _check_cap(mapping.n, cap)
    shape = mapping.shape
    width, height = shape.width * cell, shape.height * cell
    half = cell / 2
    points = " ".join(
        f"{c * cell + half:g},{r * cell + half:g}" for r, c in mapping.order.tolist()
    )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'  <rect width="{width}" height="{height}" fill="#ffffff"/>\n'
        f'  <polyline points="{points}" fill="none" stroke="#1f4e9c" '
        f'stroke-width="{max(1, cell // 4)}" stroke-linejoin="round"/>\n'
        f'</svg>\n'
    )
    return svg.encode("utf-8")


# ============================================================================
# MASK
# ============================================================================

def mask_pgm(mask: MaskMatrix, scale: int = 1, cap: Optional[int] = None) -> bytes:
    """N x N greymap, white where the key is allowed"""
    _check_cap(mask.n, cap)
    pixels = np.where(mask.to_dense(), TONE_ALLOWED, TONE_BLOCKED).astype(np.uint8)
    return _pgm(_upscale(pixels, scale))


# ============================================================================
# BLOCK GRID
# ============================================================================

def block_grid_pgm(grid: BlockGrid, scale: int = 8, cap: Optional[int] = None) -> bytes:
    """One scale x scale cell per tile: full black, partial grey, empty white"""
    _check_cap(grid.n, cap)
    tones = np.zeros(grid.labels.shape, dtype=np.uint8)
    for label, tone in BLOCK_TONES.items():
        tones[grid.labels == label] = tone
    return _pgm(_upscale(tones, scale))


def block_grid_svg(grid: BlockGrid, cell: int = 8, cap: Optional[int] = None) -> bytes:
    _check_cap(grid.n, cap)
    rows, cols = grid.labels.shape
    width, height = cols * cell, rows * cell
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'  <rect width="{width}" height="{height}" fill="{SVG_FILL[BlockLabel.EMPTY]}"/>',
    ]
    for i, j in zip(*np.nonzero(grid.labels != BlockLabel.EMPTY)):
        fill = SVG_FILL[BlockLabel(int(grid.labels[i, j]))]
        lines.append(f'  <rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
    lines.append("</svg>\n")
    return "\n".join(lines).encode("utf-8")


def render(artifact: Union[CurveMapping, MaskMatrix, BlockGrid], fmt: str = "svg",
           scale: Optional[int] = None, cap: Optional[int] = None) -> bytes:
    """
    Render a curve path, mask or block grid.

    Args:
        artifact: CurveMapping (svg), MaskMatrix (pgm) or BlockGrid (svg or pgm)
        fmt: "svg" or "pgm"
        scale: pixels per cell (format default when None)
        cap: maximum N (default RENDER_CAP)

    Raises:
        CapacityError: N above the cap
        ValidationError: format not available for the artifact
    """
    fmt = fmt.lower()
    if isinstance(artifact, CurveMapping) and fmt == "svg":
        return curve_svg(artifact, cell=scale or 10, cap=cap)
    if isinstance(artifact, MaskMatrix) and fmt == "pgm":
        return mask_pgm(artifact, scale=scale or 1, cap=cap)
    if isinstance(artifact, BlockGrid) and fmt == "pgm":
        return block_grid_pgm(artifact, scale=scale or 8, cap=cap)
    if isinstance(artifact, BlockGrid) and fmt == "svg":
        return block_grid_svg(artifact, cell=scale or 8, cap=cap)
    raise ValidationError(f"cannot render {type(artifact).__name__} as {fmt}")


def write_artifact(path: Union[str, Path], data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info(f"Wrote {len(data)} bytes to {path}")
    return path
