"""
Local-attention mask patterns.

Every pattern is a pure predicate over (query, key) sequence indices:
  - wsa, sa, na2d index the row-major sequence
  - hwa, hswa, hsa, hna index the Hilbert-ordered sequence

Masks can be evaluated pointwise, over index slabs, as per-query key
intervals, or materialized as a packed N x N bitset.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from core.config import load_settings
from core.errors import CapacityError, DegenerateRowError, ValidationError
from core.grid_curve import CurveMapping, GridShape, OrderingKind, get_mapping

logger = logging.getLogger(__name__)

# ============================================================================
# DATA MODELS
# ============================================================================

class PatternKind(str, Enum):
    WSA = "wsa"
    SA = "sa"
    NA2D = "na2d"
    HWA = "hwa"
    HSWA = "hswa"
    HSA = "hsa"
    HNA = "hna"


WINDOW_KINDS = (PatternKind.WSA, PatternKind.HWA, PatternKind.HSWA)
KERNEL_KINDS = (PatternKind.SA, PatternKind.NA2D)
BAND_KINDS = (PatternKind.HSA, PatternKind.HNA)
HILBERT_KINDS = (PatternKind.HWA, PatternKind.HSWA, PatternKind.HSA, PatternKind.HNA)


@dataclass(frozen=True)
class PatternSpec:
    """One local-attention pattern on a grid, with its parameters"""
    kind: PatternKind
    shape: GridShape
    window: Optional[Tuple[int, int]] = None   # (wh, ww) for wsa/hwa/hswa
    kernel: Optional[Tuple[int, int]] = None   # (kh, kw) odd, for sa/na2d
    radius1d: Optional[int] = None             # hsa/hna
    shift1d: Optional[int] = None              # hswa

    def __post_init__(self):
        object.__setattr__(self, "kind", PatternKind(self.kind))
        if self.window is not None:
            object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        if self.kernel is not None:
            object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
        self._validate()

    def _validate(self):
        kind, shape = self.kind, self.shape

        if kind in WINDOW_KINDS:
            if self.window is None or len(self.window) != 2:
                raise ValidationError(f"{kind.value} needs a window (wh, ww)")
            wh, ww = self.window
            if wh < 1 or ww < 1:
                raise ValidationError(f"window must be positive, got {wh}x{ww}")
            if shape.height % wh or shape.width % ww:
                raise ValidationError(
                    f"window {wh}x{ww} does not divide grid {shape}; padding is not supported"
                )

        if kind in KERNEL_KINDS:
            if self.kernel is None or len(self.kernel) != 2:
                raise ValidationError(f"{kind.value} needs a kernel (kh, kw)")
            kh, kw = self.kernel
            if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
                raise ValidationError(f"kernel must be odd and positive, got {kh}x{kw}")
            if kh > shape.height or kw > shape.width:
                raise ValidationError(f"kernel {kh}x{kw} larger than grid {shape}")

        if kind in BAND_KINDS:
            if self.radius1d is None:
                raise ValidationError(f"{kind.value} needs radius1d")
            if not 1 <= self.radius1d < shape.n:
                raise ValidationError(f"radius1d must be in [1, {shape.n}), got {self.radius1d}")

        if kind == PatternKind.HSWA:
            area = self.window[0] * self.window[1]
            if self.shift1d is None or not 0 < self.shift1d < area:
                raise ValidationError(f"shift1d must be in (0, {area}), got {self.shift1d}")

    @property
    def n(self) -> int:
        return self.shape.n

    @property
    def ordering(self) -> OrderingKind:
        return OrderingKind.HILBERT if self.kind in HILBERT_KINDS else OrderingKind.ROW_MAJOR

    @property
    def mapping(self) -> CurveMapping:
        """Ordering the sequence indices of this pattern refer to"""
        return get_mapping(self.shape, self.ordering)

    @property
    def window_area(self) -> int:
        return self.window[0] * self.window[1] if self.window else 0

    @property
    def label(self) -> str:
        """Short human label, e.g. 'hwa 64x64 w8x8'"""
        parts = [self.kind.value, str(self.shape)]
        if self.window:
            parts.append(f"w{self.window[0]}x{self.window[1]}")
        if self.kernel:
            parts.append(f"k{self.kernel[0]}x{self.kernel[1]}")
        if self.radius1d is not None:
            parts.append(f"r{self.radius1d}")
        if self.shift1d is not None:
            parts.append(f"s{self.shift1d}")
        return " ".join(parts)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "shape": [self.shape.height, self.shape.width],
            "window": list(self.window) if self.window else None,
            "kernel": list(self.kernel) if self.kernel else None,
            "radius1d": self.radius1d,
            "shift1d": self.shift1d,
        }


def _pair(value) -> Optional[Tuple[int, int]]:
    if value is None:
        return None
    if isinstance(value, int):
        return (value, value)
    value = tuple(int(v) for v in value)
    return value * 2 if len(value) == 1 else value


def make_pattern(kind, shape: GridShape, window=None, kernel=None,
                 radius: Optional[int] = None, shift: Optional[int] = None) -> PatternSpec:
    """
    Build a PatternSpec with the usual defaults filled in.

    Args:
        kind: pattern name or PatternKind
        shape: token grid
        window: int or (wh, ww) for window patterns
        kernel: int or (kh, kw); for hsa/hna it sets the default radius
        radius: explicit 1D radius for hsa/hna
        shift: explicit 1D shift for hswa

    Returns:
        Validated PatternSpec
    """
    kind = PatternKind(kind)
    window = _pair(window)
    kernel = _pair(kernel)

    if kind in BAND_KINDS:
        if radius is None:
            if kernel is None:
                raise ValidationError(f"{kind.value} needs a radius or a kernel to derive it from")
            radius = (kernel[0] * kernel[1]) // 2
        return PatternSpec(kind, shape, radius1d=int(radius))

    if kind in KERNEL_KINDS:
        return PatternSpec(kind, shape, kernel=kernel)

    if kind == PatternKind.HSWA:
        if window is None:
            raise ValidationError("hswa needs a window (wh, ww)")
        if shift is None:
            shift = (window[0] * window[1]) // 2
        return PatternSpec(kind, shape, window=window, shift1d=int(shift))

    return PatternSpec(kind, shape, window=window)


# ============================================================================
# PREDICATES
# ============================================================================

def _check_index(spec: PatternSpec, idx: np.ndarray, name: str):
    if idx.size and (idx.min() < 0 or idx.max() >= spec.n):
        raise ValidationError(f"{name} index out of range [0, {spec.n})")


def _hswa_group(spec: PatternSpec, p: np.ndarray) -> np.ndarray:
    """Shifted window id; head tokens before the shift form their own group"""
    s, area = spec.shift1d, spec.window_area
    return np.where(p < s, 0, 1 + (p - s) // area)


def _hna_start(spec: PatternSpec, q: np.ndarray) -> np.ndarray:
    r, n = spec.radius1d, spec.n
    return np.clip(q - r, 0, max(n - 1 - 2 * r, 0))


def allowed_matrix(spec: PatternSpec, q_idx, k_idx) -> np.ndarray:
    """
    Evaluate the pattern over all pairs of q_idx x k_idx.

    Returns:
        bool array of shape (len(q_idx), len(k_idx))
    """
    q = np.asarray(q_idx, dtype=np.int64).reshape(-1)[:, None]
    k = np.asarray(k_idx, dtype=np.int64).reshape(-1)[None, :]
    kind, width = spec.kind, spec.shape.width

    if kind == PatternKind.WSA:
        wh, ww = spec.window
        return ((q // width) // wh == (k // width) // wh) & ((q % width) // ww == (k % width) // ww)

    if kind == PatternKind.SA:
        ah, aw = spec.kernel[0] // 2, spec.kernel[1] // 2
        return (np.abs(q // width - k // width) <= ah) & (np.abs(q % width - k % width) <= aw)

    if kind == PatternKind.NA2D:
        ah, aw = spec.kernel[0] // 2, spec.kernel[1] // 2
        center_r = np.clip(q // width, ah, spec.shape.height - 1 - ah)
        center_c = np.clip(q % width, aw, width - 1 - aw)
        return (np.abs(k // width - center_r) <= ah) & (np.abs(k % width - center_c) <= aw)

    if kind == PatternKind.HWA:
        area = spec.window_area
        return q // area == k // area

    if kind == PatternKind.HSWA:
        return _hswa_group(spec, q) == _hswa_group(spec, k)

    if kind == PatternKind.HSA:
        return np.abs(q - k) <= spec.radius1d

    if kind == PatternKind.HNA:
        if 2 * spec.radius1d + 1 >= spec.n:
            return np.ones((q.shape[0], k.shape[1]), dtype=bool)
        lo = _hna_start(spec, q)
        return (k >= lo) & (k <= lo + 2 * spec.radius1d)

    raise ValidationError(f"unknown pattern kind {kind}")


def allowed(spec: PatternSpec, q: int, k: int) -> bool:
    """True when query q may attend key k (both sequence indices)."""
    if not (0 <= q < spec.n and 0 <= k < spec.n):
        raise ValidationError(f"index out of range: q={q}, k={k}, N={spec.n}")
    return bool(allowed_matrix(spec, [q], [k])[0, 0])


def key_intervals(spec: PatternSpec, q_idx) -> Tuple[np.ndarray, np.ndarray]:
    """
    Allowed keys of each query as disjoint half-open intervals [start, end).

    Row-major 2D patterns give one interval per kernel/window row (empty
    intervals where the row falls off the grid); Hilbert patterns give one.

    Returns:
        (starts, ends), each of shape (len(q_idx), intervals_per_query)
    """
    q = np.asarray(q_idx, dtype=np.int64).reshape(-1)
    _check_index(spec, q, "query")
    kind, n = spec.kind, spec.n
    height, width = spec.shape.height, spec.shape.width

    if kind in (PatternKind.WSA, PatternKind.SA, PatternKind.NA2D):
        row, col = q // width, q % width
        if kind == PatternKind.WSA:
            wh, ww = spec.window
            r0 = (row // wh) * wh
            rows = r0[:, None] + np.arange(wh)[None, :]
            c_lo = ((col // ww) * ww)[:, None]
            c_hi = c_lo + ww
        elif kind == PatternKind.SA:
            ah, aw = spec.kernel[0] // 2, spec.kernel[1] // 2
            rows = row[:, None] + np.arange(-ah, ah + 1)[None, :]
            c_lo = np.maximum(col - aw, 0)[:, None]
            c_hi = np.minimum(col + aw, width - 1)[:, None] + 1
        else:
            ah, aw = spec.kernel[0] // 2, spec.kernel[1] // 2
            center_r = np.clip(row, ah, height - 1 - ah)
            center_c = np.clip(col, aw, width - 1 - aw)
            rows = center_r[:, None] + np.arange(-ah, ah + 1)[None, :]
            c_lo = (center_c - aw)[:, None]
            c_hi = (center_c + aw + 1)[:, None]

        starts = rows * width + c_lo
        ends = rows * width + c_hi
        off_grid = (rows < 0) | (rows >= height)
        starts = np.where(off_grid, 0, starts)
        ends = np.where(off_grid, 0, ends)
        return starts, ends

    if kind == PatternKind.HWA:
        area = spec.window_area
        starts = (q // area) * area
        return starts[:, None], (starts + area)[:, None]

    if kind == PatternKind.HSWA:
        s, area = spec.shift1d, spec.window_area
        group_start = np.where(q < s, 0, s + ((q - s) // area) * area)
        group_end = np.where(q < s, s, np.minimum(group_start + area, n))
        return group_start[:, None], group_end[:, None]

    if kind == PatternKind.HSA:
        r = spec.radius1d
        return np.maximum(q - r, 0)[:, None], (np.minimum(q + r, n - 1) + 1)[:, None]

    if kind == PatternKind.HNA:
        r = spec.radius1d
        if 2 * r + 1 >= n:
            return np.zeros((q.size, 1), dtype=np.int64), np.full((q.size, 1), n, dtype=np.int64)
        lo = _hna_start(spec, q)
        return lo[:, None], (lo + 2 * r + 1)[:, None]

    raise ValidationError(f"unknown pattern kind {kind}")


# ============================================================================
# MATERIALIZED MASKS
# ============================================================================

@dataclass(frozen=True, eq=False)
class MaskMatrix:
    """N x N attention mask stored as row-packed bits (np.packbits, big bit order)"""
    n: int
    packed: np.ndarray

    @classmethod
    def from_dense(cls, bits: np.ndarray) -> "MaskMatrix":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ValidationError(f"mask must be square, got shape {bits.shape}")
        return cls(n=bits.shape[0], packed=np.packbits(bits, axis=1))

    @property
    def bits(self) -> np.ndarray:
        return self.to_dense()

    def to_dense(self) -> np.ndarray:
        return np.unpackbits(self.packed, axis=1, count=self.n).astype(bool)

    def rows(self, start: int, stop: int) -> np.ndarray:
        return np.unpackbits(self.packed[start:stop], axis=1, count=self.n).astype(bool)

    def row(self, q: int) -> np.ndarray:
        return self.rows(q, q + 1)[0]

    def row_sums(self) -> np.ndarray:
        return np.unpackbits(self.packed, axis=1, count=self.n).sum(axis=1, dtype=np.int64)

    def popcount(self) -> int:
        return int(self.row_sums().sum())

    def is_symmetric(self) -> bool:
        dense = self.to_dense()
        return bool(np.array_equal(dense, dense.T))

    def empty_rows(self) -> np.ndarray:
        return np.flatnonzero(self.row_sums() == 0)

    def permuted(self, perm: np.ndarray) -> "MaskMatrix":
        """Mask of the same relation after reindexing tokens: new[i, j] = old[perm[i], perm[j]]"""
        dense = self.to_dense()
        return MaskMatrix.from_dense(dense[np.ix_(perm, perm)])


def materialize_mask(spec: PatternSpec, cap: Optional[int] = None,
                     chunk_rows: int = 512) -> MaskMatrix:
    """
    Build the dense mask of a pattern.

    Raises:
        CapacityError: N exceeds the dense cap; use predicate-only
            block classification (block_analysis.classify) instead
    """
    cap = load_settings().dense_cap if cap is None else cap
    n = spec.n
    if n > cap:
        logger.warning(f"Refusing dense mask for {spec.label}: N={n} > cap {cap}")
        raise CapacityError(
            f"N={n} exceeds dense mask cap {cap}; classify blocks from the predicate instead",
            n=n, cap=cap,
        )

    packed = np.empty((n, (n + 7) // 8), dtype=np.uint8)
    keys = np.arange(n)
    for start in range(0, n, chunk_rows):
        stop = min(start + chunk_rows, n)
        packed[start:stop] = np.packbits(allowed_matrix(spec, np.arange(start, stop), keys), axis=1)

    mask = MaskMatrix(n=n, packed=packed)
    empty = mask.empty_rows()
    if empty.size:
        raise DegenerateRowError(f"{spec.label}: {empty.size} rows with no allowed key", rows=empty)
    return mask


# ============================================================================
# WINDOW RESHAPE
# ============================================================================

def window_partition(x: np.ndarray, shape: GridShape, window: Tuple[int, int]) -> np.ndarray:
    """
    Split row-major tokens into non-overlapping windows.

    Args:
        x: (..., N, C) with N = height * width in row-major order
        shape: token grid
        window: (wh, ww), must divide the grid

    Returns:
        (..., num_windows, wh * ww, C)
    """
    wh, ww = window
    h, w = shape.height, shape.width
    if h % wh or w % ww:
        raise ValidationError(f"window {wh}x{ww} does not divide grid {shape}")
    lead, c = x.shape[:-2], x.shape[-1]
    x = x.reshape(*lead, h // wh, wh, w // ww, ww, c)
    nd = len(lead)
    x = np.moveaxis(x, nd + 2, nd + 1)  # (..., h/wh, w/ww, wh, ww, C)
    return x.reshape(*lead, (h // wh) * (w // ww), wh * ww, c)


def window_merge(windows: np.ndarray, shape: GridShape, window: Tuple[int, int]) -> np.ndarray:
    """Inverse of window_partition: (..., num_windows, wh*ww, C) -> (..., N, C)"""
    wh, ww = window
    h, w = shape.height, shape.width
    lead, c = windows.shape[:-3], windows.shape[-1]
    x = windows.reshape(*lead, h // wh, w // ww, wh, ww, c)
    nd = len(lead)
    x = np.moveaxis(x, nd + 1, nd + 2)  # (..., h/wh, wh, w/ww, ww, C)
    return x.reshape(*lead, h * w, c)
