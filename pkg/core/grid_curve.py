"""
Orderings of a 2D token grid.

A CurveMapping is a bijection between grid cells (row, col) and 1D sequence
positions. Two orderings are provided: row-major and a generalized Hilbert
curve that works for any height x width rectangle.
"""

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np

from core.errors import ValidationError

logger = logging.getLogger(__name__)


class OrderingKind(str, Enum):
    ROW_MAJOR = "rowmajor"
    HILBERT = "hilbert"


@dataclass(frozen=True)
class GridShape:
    """Token grid of height x width cells (N = height * width)"""
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) != self.height or int(self.width) != self.width:
            raise ValidationError(f"grid dimensions must be integers, got {self.height}x{self.width}")
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"grid dimensions must be >= 1, got {self.height}x{self.width}")

    @property
    def n(self) -> int:
        return self.height * self.width

    def __str__(self) -> str:
        return f"{self.height}x{self.width}"

    @classmethod
    def parse(cls, text: str) -> "GridShape":
        """Parse '64x64', '64,64' or a single side '64'."""
        parts = [p for p in text.lower().replace(",", "x").split("x") if p.strip()]
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise ValidationError(f"cannot parse grid shape {text!r}")
        if len(values) == 1:
            values = values * 2
        if len(values) != 2:
            raise ValidationError(f"cannot parse grid shape {text!r}")
        return cls(values[0], values[1])


@dataclass(frozen=True, eq=False)
class CurveMapping:
    """
    order[i] = (row, col) of sequence position i;
    inverse[row * width + col] = sequence position of that cell.
    """
    shape: GridShape
    kind: OrderingKind
    order: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.shape.n

    @property
    def permutation(self) -> np.ndarray:
        """Flat row-major cell id visited at each sequence position"""
        return self.order[:, 0] * self.shape.width + self.order[:, 1]

    def seq_index(self, row: int, col: int) -> int:
        return int(self.inverse[row * self.shape.width + col])

    def cell(self, index: int) -> Tuple[int, int]:
        row, col = self.order[index]
        return int(row), int(col)

    def rows(self) -> np.ndarray:
        return self.order[:, 0]

    def cols(self) -> np.ndarray:
        return self.order[:, 1]

    def to_dict(self) -> Dict:
        return {
            "shape": [self.shape.height, self.shape.width],
            "kind": self.kind.value,
            "order": self.order.tolist(),
        }


def _from_order(shape: GridShape, kind: OrderingKind, order: np.ndarray) -> CurveMapping:
    order = np.ascontiguousarray(order, dtype=np.int64)
    order.setflags(write=False)
    flat = order[:, 0] * shape.width + order[:, 1]
    inverse = np.empty(shape.n, dtype=np.int64)
    inverse[flat] = np.arange(shape.n, dtype=np.int64)
    inverse.setflags(write=False)
    return CurveMapping(shape=shape, kind=kind, order=order, inverse=inverse)


def row_major_order(shape: GridShape) -> CurveMapping:
    """order[i] = (i div width, i mod width)"""
    idx = np.arange(shape.n, dtype=np.int64)
    order = np.stack([idx // shape.width, idx % shape.width], axis=1)
    return _from_order(shape, OrderingKind.ROW_MAJOR, order)


# ============================================================================
# GENERALIZED HILBERT CONSTRUCTION
# ============================================================================

def _sgn(x: int) -> int:
    return (x > 0) - (x < 0)


def _gilbert(x: int, y: int, ax: int, ay: int, bx: int, by: int, out: List[Tuple[int, int]]):
    """
    Fill the rectangle spanned by major vector (ax, ay) and minor vector
    (bx, by) starting at (x, y). x is the column, y is the row.
    """
    w = abs(ax + ay)
    h = abs(bx + by)

    dax, day = _sgn(ax), _sgn(ay)  # unit major direction
    dbx, dby = _sgn(bx), _sgn(by)  # unit minor direction

    if h == 1:
        for _ in range(w):
            out.append((y, x))
            x, y = x + dax, y + day
        return

    if w == 1:
        for _ in range(h):
            out.append((y, x))
            x, y = x + dbx, y + dby
        return

    ax2, ay2 = ax // 2, ay // 2
    bx2, by2 = bx // 2, by // 2

    w2 = abs(ax2 + ay2)
    h2 = abs(bx2 + by2)

    if 2 * w > 3 * h:
        # long rectangle: two halves along the major axis
        if (w2 % 2) and (w > 2):
            ax2, ay2 = ax2 + dax, ay2 + day
        _gilbert(x, y, ax2, ay2, bx, by, out)
        _gilbert(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by, out)
    else:
        # up, across, down
        if (h2 % 2) and (h > 2):
            bx2, by2 = bx2 + dbx, by2 + dby
        _gilbert(x, y, bx2, by2, ax2, ay2, out)
        _gilbert(x + bx2, y + by2, ax, ay, bx - bx2, by - by2, out)
        _gilbert(x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby),
                 -bx2, -by2, -(ax - ax2), -(ay - ay2), out)


def _major_is_width(shape: GridShape) -> bool:
    """
    Longer side is the major axis, except that an even side wins over an odd
    one: a path from (0,0) to the far end of an odd major side with an even
    minor side needs a diagonal step.
    """
    h_odd, w_odd = shape.height % 2, shape.width % 2
    if w_odd and not h_odd:
        return False
    if h_odd and not w_odd:
        return True
    return shape.width >= shape.height


def hilbert_order(shape: GridShape) -> CurveMapping:
    """Generalized Hilbert curve starting at cell (0,0)."""
    out: List[Tuple[int, int]] = []
    if _major_is_width(shape):
        _gilbert(0, 0, shape.width, 0, 0, shape.height, out)
    else:
        _gilbert(0, 0, 0, shape.height, shape.width, 0, out)
    return _from_order(shape, OrderingKind.HILBERT, np.array(out, dtype=np.int64).reshape(-1, 2))


# ============================================================================
# CACHE
# ============================================================================

_cache_lock = threading.Lock()
_cache: Dict[Tuple[int, int, str], CurveMapping] = {}

_BUILDERS = {
    OrderingKind.ROW_MAJOR: row_major_order,
    OrderingKind.HILBERT: hilbert_order,
}


def cache_key(shape: GridShape, kind) -> Tuple[int, int, str]:
    return (shape.height, shape.width, OrderingKind(kind).value)


def get_mapping(shape: GridShape, kind=OrderingKind.HILBERT) -> CurveMapping:
    """Memoized mapping per (shape, kind). Safe for concurrent callers."""
    key = cache_key(shape, kind)
    mapping = _cache.get(key)
    if mapping is not None:
        return mapping

    # built outside the lock; concurrent first writers produce identical values
    mapping = _BUILDERS[OrderingKind(kind)](shape)
    with _cache_lock:
        _cache[key] = mapping
    logger.debug(f"Cached {key[2]} mapping for {shape}")
    return mapping


def clear_cache():
    with _cache_lock:
        _cache.clear()


def cache_size() -> int:
    return len(_cache)


# ============================================================================
# REORDERING
# ============================================================================

def apply_order(x: np.ndarray, mapping: CurveMapping, axis: int = -2) -> np.ndarray:
    """Gather row-major tokens into curve order along `axis`."""
    return np.take(x, mapping.permutation, axis=axis)


def restore_order(x: np.ndarray, mapping: CurveMapping, axis: int = -2) -> np.ndarray:
    """Scatter curve-ordered tokens back to row-major order along `axis`."""
    return np.take(x, mapping.inverse, axis=axis)


def step_profile(mapping: CurveMapping) -> Dict[str, int]:
    """Count consecutive steps by kind: manhattan (unit), diagonal, jump."""
    if mapping.n < 2:
        return {"manhattan": 0, "diagonal": 0, "jump": 0}
    delta = np.abs(np.diff(mapping.order, axis=0))
    cheb = delta.max(axis=1)
    manhattan = delta.sum(axis=1)
    return {
        "manhattan": int(np.sum(manhattan == 1)),
        "diagonal": int(np.sum((cheb == 1) & (manhattan == 2))),
        "jump": int(np.sum(cheb > 1)),
    }
