"""
Block-sparse tiling of attention masks.

The N x N mask is cut into b_q x b_k tiles; every tile is labeled Full
(all pairs allowed, no padding), Empty (no pair allowed) or Partial. The
label grid drives the sparse engine, the sparsity report and the cost model.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from core.config import DEFAULT_BLOCK_SIZE
from core.errors import MismatchError, ValidationError
from core.patterns import MaskMatrix, PatternSpec, allowed_matrix, key_intervals, materialize_mask
from core.performance import resolve_threads

logger = logging.getLogger(__name__)

CLASSIFY_METHODS = ("intervals", "predicate", "mask")

# bound on the (rows x N) working set of one classification chunk
_CHUNK_ELEMENTS = 1 << 22


# ============================================================================
# DATA MODELS
# ============================================================================

class BlockLabel(IntEnum):
    EMPTY = 0
    PARTIAL = 1
    FULL = 2


@dataclass(frozen=True)
class BlockSpec:
    """Tile size of the block-sparse kernel"""
    b_q: int = DEFAULT_BLOCK_SIZE
    b_k: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if self.b_q < 1 or self.b_k < 1:
            raise ValidationError(f"block sizes must be >= 1, got {self.b_q}x{self.b_k}")

    @classmethod
    def parse(cls, text: str) -> "BlockSpec":
        """'128' or '128,64'"""
        try:
            values = [int(v) for v in str(text).replace("x", ",").split(",") if v.strip()]
        except ValueError:
            raise ValidationError(f"cannot parse block spec {text!r}")
        if len(values) == 1:
            values = values * 2
        if len(values) != 2:
            raise ValidationError(f"cannot parse block spec {text!r}")
        return cls(values[0], values[1])


class KvEntry(NamedTuple):
    block: int
    needs_mask: bool  # Partial tile


@dataclass(frozen=True, eq=False)
class BlockMetadata:
    """Non-empty tiles per query-block row, as lists and as CSR arrays"""
    kv_lists: List[List[KvEntry]]
    row_ptr: np.ndarray
    indices: np.ndarray
    needs_mask: np.ndarray

    @property
    def r(self) -> int:
        return int(self.row_ptr[-1])

    def row(self, i: int) -> List[KvEntry]:
        return self.kv_lists[i]


@dataclass(eq=False)
class BlockGrid:
    """
    Labeled tiling of one mask.

    counts[i, j] is the number of allowed (q, k) pairs inside tile (i, j);
    padding positions are never allowed.
    """
    n: int
    blocks: BlockSpec
    counts: np.ndarray
    spec: Optional[PatternSpec] = None
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.counts.shape != (self.rows, self.cols):
            raise ValidationError(
                f"counts shape {self.counts.shape} does not match {self.rows}x{self.cols} tiling"
            )
        labels = np.full(self.counts.shape, BlockLabel.PARTIAL, dtype=np.int8)
        labels[self.counts == 0] = BlockLabel.EMPTY
        # padded tiles cannot reach b_q * b_k allowed pairs
        labels[self.counts == self.blocks.b_q * self.blocks.b_k] = BlockLabel.FULL
        self.labels = labels

    @property
    def rows(self) -> int:
        return -(-self.n // self.blocks.b_q)

    @property
    def cols(self) -> int:
        return -(-self.n // self.blocks.b_k)

    @property
    def n_pad_q(self) -> int:
        return self.rows * self.blocks.b_q

    @property
    def n_pad_k(self) -> int:
        return self.cols * self.blocks.b_k

    @property
    def n_pad(self) -> int:
        return max(self.n_pad_q, self.n_pad_k)

    @property
    def total_blocks(self) -> int:
        return self.rows * self.cols

    def count(self, label: BlockLabel) -> int:
        return int(np.count_nonzero(self.labels == label))

    @property
    def row_loads(self) -> np.ndarray:
        """r_i: non-empty tiles per query-block row"""
        return np.count_nonzero(self.labels != BlockLabel.EMPTY, axis=1).astype(np.int64)

    @property
    def r(self) -> int:
        return int(self.row_loads.sum())

    def real_query_rows(self) -> np.ndarray:
        """Query-block rows holding at least one real (non-padding) query"""
        return np.flatnonzero(np.arange(self.rows) * self.blocks.b_q < self.n)

    def tile_bounds(self, i: int, j: int):
        """Real index ranges (q0, q1, k0, k1) of tile (i, j)"""
        bq, bk = self.blocks.b_q, self.blocks.b_k
        return i * bq, min((i + 1) * bq, self.n), j * bk, min((j + 1) * bk, self.n)

    @cached_property
    def metadata(self) -> BlockMetadata:
        return block_metadata(self)

    @property
    def kv_lists(self) -> List[List[KvEntry]]:
        return self.metadata.kv_lists

    def allowed_pairs(self) -> int:
        return int(self.counts.sum())

    def same_labels(self, other: "BlockGrid") -> bool:
        return self.blocks == other.blocks and self.n == other.n and np.array_equal(self.labels, other.labels)


@dataclass
class SparsityReport:
    """Block census of a BlockGrid. 'Sparsity' always means empty_ratio."""
    n: int
    n_pad: int
    b_q: int
    b_k: int
    total_blocks: int
    empty_blocks: int
    partial_blocks: int
    full_blocks: int
    empty_ratio: float
    partial_ratio: float
    full_ratio: float
    kernel_sparsity: float
    nonempty_blocks: int
    pattern: Optional[str] = None

    @property
    def sparsity(self) -> float:
        return self.empty_ratio

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SparsityReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    def to_row(self) -> Dict:
        """Flat row with percentages rounded to two decimals"""
        return {
            "pattern": self.pattern,
            "n": self.n,
            "n_pad": self.n_pad,
            "block": f"{self.b_q}x{self.b_k}",
            "empty_pct": percent(self.empty_ratio),
            "partial_pct": percent(self.partial_ratio),
            "full_pct": percent(self.full_ratio),
            "kernel_sparsity_pct": percent(self.kernel_sparsity),
            "nonempty_blocks": self.nonempty_blocks,
            "total_blocks": self.total_blocks,
        }


def percent(ratio: float) -> float:
    return round(100.0 * ratio, 2)


# ============================================================================
# CLASSIFICATION
# ============================================================================

def _tile_sum(per_key: np.ndarray, n: int, cols: int, b_k: int) -> np.ndarray:
    """Reduce per-key counts (rows, N) into per-tile counts (rows, cols)"""
    padded = np.zeros((per_key.shape[0], cols * b_k), dtype=np.int64)
    padded[:, :n] = per_key
    return padded.reshape(per_key.shape[0], cols, b_k).sum(axis=2)


def _count_intervals(spec: PatternSpec, blocks: BlockSpec, cols: int, i0: int, i1: int) -> np.ndarray:
    n, bq = spec.n, blocks.b_q
    q_lo, q_hi = i0 * bq, min(i1 * bq, n)
    q = np.arange(q_lo, q_hi)
    starts, ends = key_intervals(spec, q)

    # per query-block row: +1 at interval start, -1 at end, then prefix-sum
    width = n + 1
    base = ((q - q_lo) // bq * width)[:, None]
    size = (i1 - i0) * width
    diff = (np.bincount((base + starts).ravel(), minlength=size)
            - np.bincount((base + ends).ravel(), minlength=size))
    coverage = np.cumsum(diff.reshape(i1 - i0, width)[:, :n], axis=1)
    return _tile_sum(coverage, n, cols, blocks.b_k)


def _count_predicate(spec: PatternSpec, blocks: BlockSpec, cols: int, i0: int, i1: int) -> np.ndarray:
    n, bq = spec.n, blocks.b_q
    keys = np.arange(n)
    per_key = np.zeros((i1 - i0, n), dtype=np.int64)
    for i in range(i0, i1):
        q = np.arange(i * bq, min((i + 1) * bq, n))
        per_key[i - i0] = allowed_matrix(spec, q, keys).sum(axis=0)
    return _tile_sum(per_key, n, cols, blocks.b_k)


def _count_mask(mask: MaskMatrix, blocks: BlockSpec, cols: int, i0: int, i1: int) -> np.ndarray:
    n, bq = mask.n, blocks.b_q
    per_key = np.zeros((i1 - i0, n), dtype=np.int64)
    for i in range(i0, i1):
        per_key[i - i0] = mask.rows(i * bq, min((i + 1) * bq, n)).sum(axis=0)
    return _tile_sum(per_key, n, cols, blocks.b_k)


def _row_chunks(rows: int, n: int, threads: int):
    per_chunk = max(1, min(_CHUNK_ELEMENTS // (n + 1), -(-rows // threads)))
    return [(i, min(i + per_chunk, rows)) for i in range(0, rows, per_chunk)]


def _run_chunks(count_fn, rows: int, n: int, threads: Optional[int]) -> np.ndarray:
    threads = resolve_threads(threads)
    chunks = _row_chunks(rows, n, threads)
    if threads == 1 or len(chunks) == 1:
        parts = [count_fn(i0, i1) for i0, i1 in chunks]
    else:
        # map() yields in submission order, so the result is schedule-independent
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: count_fn(*c), chunks))
    return np.concatenate(parts, axis=0)


def classify(spec: PatternSpec, blocks: Optional[BlockSpec] = None, method: str = "intervals",
             threads: Optional[int] = None, mask: Optional[MaskMatrix] = None) -> BlockGrid:
    """
    Tile a pattern's mask and label every tile.

    Args:
        spec: attention pattern
        blocks: tile sizes (default 128 x 128)
        method: 'intervals' (exact counting from key intervals),
            'predicate' (pattern predicate per query-block row) or
            'mask' (from a materialized mask); all give identical grids
        threads: worker threads over query-block rows (None = configured)
        mask: pre-built mask for method='mask'

    Returns:
        BlockGrid bound to spec
    """
    blocks = blocks or BlockSpec()
    if method not in CLASSIFY_METHODS:
        raise ValidationError(f"unknown classification method {method!r}, expected one of {CLASSIFY_METHODS}")

    n = spec.n
    rows, cols = -(-n // blocks.b_q), -(-n // blocks.b_k)
    started = time.perf_counter()

    if method == "intervals":
        fn = lambda i0, i1: _count_intervals(spec, blocks, cols, i0, i1)
    elif method == "predicate":
        fn = lambda i0, i1: _count_predicate(spec, blocks, cols, i0, i1)
    else:
        mask = mask if mask is not None else materialize_mask(spec)
        if mask.n != n:
            raise MismatchError(f"mask has N={mask.n}, pattern has N={n}")
        fn = lambda i0, i1: _count_mask(mask, blocks, cols, i0, i1)

    counts = _run_chunks(fn, rows, n, threads)
    grid = BlockGrid(n=n, blocks=blocks, counts=counts, spec=spec)
    logger.debug(
        f"Classified {spec.label} at {blocks.b_q}x{blocks.b_k} via {method}: "
        f"R={grid.r}/{grid.total_blocks} in {time.perf_counter() - started:.3f}s"
    )
    return grid


def classify_mask(mask: MaskMatrix, blocks: Optional[BlockSpec] = None,
                  threads: Optional[int] = None) -> BlockGrid:
    """Tile an arbitrary materialized mask (no pattern attached)."""
    blocks = blocks or BlockSpec()
    rows, cols = -(-mask.n // blocks.b_q), -(-mask.n // blocks.b_k)
    counts = _run_chunks(lambda i0, i1: _count_mask(mask, blocks, cols, i0, i1), rows, mask.n, threads)
    return BlockGrid(n=mask.n, blocks=blocks, counts=counts)


def ensure_matches(grid: BlockGrid, spec: PatternSpec):
    """Raise MismatchError unless grid was built for spec."""
    if grid.n != spec.n:
        raise MismatchError(f"grid has N={grid.n}, pattern {spec.label} has N={spec.n}")
    if grid.spec is not None and grid.spec != spec:
        raise MismatchError(f"grid was built for {grid.spec.label}, not {spec.label}")


# ============================================================================
# REPORTS AND METADATA
# ============================================================================

def sparsity(grid: BlockGrid) -> SparsityReport:
    """Empty/partial/full census of a grid."""
    total = grid.total_blocks
    empty = grid.count(BlockLabel.EMPTY)
    partial = grid.count(BlockLabel.PARTIAL)
    full = grid.count(BlockLabel.FULL)
    r = partial + full
    area = grid.blocks.b_q * grid.blocks.b_k
    return SparsityReport(
        n=grid.n,
        n_pad=grid.n_pad,
        b_q=grid.blocks.b_q,
        b_k=grid.blocks.b_k,
        total_blocks=total,
        empty_blocks=empty,
        partial_blocks=partial,
        full_blocks=full,
        empty_ratio=empty / total,
        partial_ratio=partial / total,
        full_ratio=full / total,
        # padded tiles can cover more than N^2 cells
        kernel_sparsity=max(0.0, 1.0 - (r * area) / (grid.n * grid.n)),
        nonempty_blocks=r,
        pattern=grid.spec.label if grid.spec is not None else None,
    )


def block_metadata(grid: BlockGrid) -> BlockMetadata:
    """Ascending non-empty key-block indices per query-block row, Partial flagged."""
    rows_idx, cols_idx = np.nonzero(grid.labels != BlockLabel.EMPTY)
    needs_mask = grid.labels[rows_idx, cols_idx] == BlockLabel.PARTIAL
    row_ptr = np.zeros(grid.rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows_idx, minlength=grid.rows), out=row_ptr[1:])

    kv_lists: List[List[KvEntry]] = []
    for i in range(grid.rows):
        lo, hi = row_ptr[i], row_ptr[i + 1]
        kv_lists.append([KvEntry(int(j), bool(m)) for j, m in zip(cols_idx[lo:hi], needs_mask[lo:hi])])

    return BlockMetadata(
        kv_lists=kv_lists,
        row_ptr=row_ptr,
        indices=cols_idx.astype(np.int64),
        needs_mask=needs_mask,
    )
