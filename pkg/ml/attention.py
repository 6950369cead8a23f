"""
Reference attention engines over local-attention masks.

  - dense_forward: masked softmax over the full N x N score matrix; disallowed
    scores are excluded exactly. Used as the oracle.
  - sparse_forward: streaming-softmax over each query-block row's non-empty
    tiles only; Full tiles skip the per-element test, Partial tiles are
    masked with the most negative finite value of the dtype.
  - backward: analytic gradients for q, k, v and the global RPB table, from
    either a materialized mask (dense) or a BlockGrid (sparse, recomputed
    from the saved log-sum-exp).
  - dense_window_forward / window_attention: Swin-style window partition +
    batched dense attention, the row-major window baseline.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple, Union

import numpy as np

from core.block_analysis import BlockGrid, ensure_matches
from core.errors import DegenerateRowError, InternalError, MismatchError, ValidationError
from core.grid_curve import CurveMapping, GridShape, OrderingKind, get_mapping
from core.patterns import MaskMatrix, PatternSpec, allowed_matrix, window_merge, window_partition
from core.performance import resolve_threads

logger = logging.getLogger(__name__)

# max elements of one (batch, heads, rows, N) score slab in the dense engine
_DENSE_SLAB = 1 << 24

# max |dense - sparse| accepted by engine checks
ENGINE_TOLERANCE = {"float64": 1e-10, "float32": 1e-4}


def engine_tolerance(dtype) -> float:
    return ENGINE_TOLERANCE.get(np.dtype(dtype).name, 1e-4)

# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass
class AttnTensors:
    """q, k, v of shape (batch, heads, N, head_dim)"""
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scale: Optional[float] = None

    def __post_init__(self):
        if self.scale is None:
            self.scale = 1.0 / np.sqrt(self.q.shape[-1])
        self.validate()

    def validate(self):
        if self.q.ndim != 4:
            raise ValidationError(f"expected (batch, heads, N, head_dim), got shape {self.q.shape}")
        if self.k.shape != self.q.shape or self.v.shape != self.q.shape:
            raise ValidationError(
                f"q, k, v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        if self.q.dtype != self.k.dtype or self.q.dtype != self.v.dtype:
            raise ValidationError("q, k, v dtypes differ")
        for name in ("q", "k", "v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} has non-finite entries")

    @property
    def batch(self) -> int:
        return self.q.shape[0]

    @property
    def heads(self) -> int:
        return self.q.shape[1]

    @property
    def n(self) -> int:
        return self.q.shape[2]

    @property
    def dim(self) -> int:
        return self.q.shape[3]

    @property
    def dtype(self) -> np.dtype:
        return self.q.dtype

    @property
    def slices(self) -> int:
        return self.batch * self.heads

    def permuted(self, perm: np.ndarray) -> "AttnTensors":
        """Tokens reindexed: new[..., i, :] = old[..., perm[i], :]"""
        return AttnTensors(self.q[:, :, perm], self.k[:, :, perm], self.v[:, :, perm], self.scale)


def random_tensors(batch: int, heads: int, n: int, dim: int, dtype="float64",
                   seed: int = 0) -> AttnTensors:
    """Seeded standard-normal q, k, v."""
    rng = np.random.default_rng(seed)
    shape = (batch, heads, n, dim)
    dtype = np.dtype(dtype)
    q, k, v = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
    return AttnTensors(q, k, v)


class ScoreModKind(str, Enum):
    NONE = "none"
    GLOBAL_RPB = "global-rpb"


@dataclass
class ScoreMod:
    """
    Additive score modifier.

    For global-rpb, rpb_table has shape (heads, 2H-1, 2W-1) and is indexed by
    the 2D offset of the two tokens' cells; `mapping` translates sequence
    indices back to cells.
    """
    kind: ScoreModKind = ScoreModKind.NONE
    rpb_table: Optional[np.ndarray] = None
    mapping: Optional[CurveMapping] = None

    def __post_init__(self):
        self.kind = ScoreModKind(self.kind)
        if self.kind == ScoreModKind.GLOBAL_RPB:
            if self.rpb_table is None or self.mapping is None:
                raise ValidationError("global-rpb needs rpb_table and mapping")
            shape = self.mapping.shape
            expected = (2 * shape.height - 1, 2 * shape.width - 1)
            if self.rpb_table.ndim != 3 or self.rpb_table.shape[1:] != expected:
                raise ValidationError(
                    f"rpb_table must be (heads, {expected[0]}, {expected[1]}), got {self.rpb_table.shape}"
                )

    @property
    def active(self) -> bool:
        return self.kind != ScoreModKind.NONE

    def check(self, t: AttnTensors):
        if not self.active:
            return
        if self.mapping.n != t.n:
            raise MismatchError(f"score mod covers N={self.mapping.n}, tensors have N={t.n}")
        if self.rpb_table.shape[0] != t.heads:
            raise MismatchError(f"rpb_table has {self.rpb_table.shape[0]} heads, tensors have {t.heads}")

    def offsets(self, q_idx: np.ndarray, k_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Table row/col indices (nq, nk) for the 2D offsets of all pairs"""
        shape = self.mapping.shape
        order = self.mapping.order
        dr = order[q_idx, 0][:, None] - order[k_idx, 0][None, :] + shape.height - 1
        dc = order[q_idx, 1][:, None] - order[k_idx, 1][None, :] + shape.width - 1
        return dr, dc

    def bias(self, q_idx: np.ndarray, k_idx: np.ndarray, dtype) -> Optional[np.ndarray]:
        """(heads, nq, nk) bias, or None for the none-kind"""
        if not self.active:
            return None
        dr, dc = self.offsets(q_idx, k_idx)
        return self.rpb_table[:, dr, dc].astype(dtype, copy=False)


NO_MOD = ScoreMod()


def global_rpb(heads: int, shape: GridShape, ordering=OrderingKind.HILBERT,
               seed: Optional[int] = 0, table: Optional[np.ndarray] = None,
               std: float = 0.02) -> ScoreMod:
    """
    Global relative position bias over the whole feature map.

    Args:
        heads: number of heads
        shape: token grid
        ordering: OrderingKind or CurveMapping the sequence indices follow
        seed: seed for a random table (ignored when table is given)
        table: explicit (heads, 2H-1, 2W-1) table
        std: standard deviation of the random table
    """
    mapping = ordering if isinstance(ordering, CurveMapping) else get_mapping(shape, ordering)
    if table is None:
        rng = np.random.default_rng(seed)
        table = rng.normal(0.0, std, size=(heads, 2 * shape.height - 1, 2 * shape.width - 1))
    return ScoreMod(ScoreModKind.GLOBAL_RPB, rpb_table=np.asarray(table), mapping=mapping)


def apply_score_mod(mod: ScoreMod, q: int, k: int, raw: float, head: int = 0) -> float:
    """Score of one (q, k) pair after the modifier."""
    if not mod.active:
        return raw
    n = mod.mapping.n
    if not (0 <= q < n and 0 <= k < n):
        raise ValidationError(f"index out of range: q={q}, k={k}, N={n}")
    dr, dc = mod.offsets(np.array([q]), np.array([k]))
    dr, dc = int(dr[0, 0]), int(dc[0, 0])
    _, rows, cols = mod.rpb_table.shape
    if not (0 <= dr < rows and 0 <= dc < cols):
        raise InternalError(f"offset ({dr}, {dc}) outside rpb table {rows}x{cols}")
    return raw + float(mod.rpb_table[head, dr, dc])


@dataclass
class ExecStats:
    """
    Work done by the sparse engine.

    blocks_visited counts tiles visited per (batch, head) slice; the
    *_total fields count over all slices.
    """
    blocks_visited: int = 0
    pairs_evaluated: int = 0
    elementwise_masks_applied: int = 0
    slices: int = 1
    visited: Set[Tuple[int, int]] = field(default_factory=set)
    seconds: float = 0.0

    @property
    def block_visits_total(self) -> int:
        return self.blocks_visited * self.slices

    @property
    def per_slice(self) -> Dict[str, int]:
        return {
            "blocks_visited": self.blocks_visited,
            "pairs_evaluated": self.pairs_evaluated // self.slices,
            "elementwise_masks_applied": self.elementwise_masks_applied // self.slices,
        }

    def to_dict(self) -> Dict:
        return {
            "blocks_visited": self.blocks_visited,
            "block_visits_total": self.block_visits_total,
            "pairs_evaluated": self.pairs_evaluated,
            "elementwise_masks_applied": self.elementwise_masks_applied,
            "slices": self.slices,
            "seconds": self.seconds,
        }


@dataclass
class Gradients:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    drpb: Optional[np.ndarray] = None

    def max_abs_diff(self, other: "Gradients") -> float:
        diffs = [np.max(np.abs(a - b)) for a, b in
                 ((self.dq, other.dq), (self.dk, other.dk), (self.dv, other.dv))]
        if self.drpb is not None and other.drpb is not None:
            diffs.append(np.max(np.abs(self.drpb - other.drpb)))
        return float(max(diffs))


# ============================================================================
# DENSE ORACLE
# ============================================================================

def _check_mask(t: AttnTensors, mask: MaskMatrix):
    if mask.n != t.n:
        raise MismatchError(f"mask has N={mask.n}, tensors have N={t.n}")
    empty = mask.empty_rows()
    if empty.size:
        raise DegenerateRowError(f"{empty.size} mask rows have no allowed key", rows=empty)


def _slab_rows(t: AttnTensors) -> int:
    return max(1, _DENSE_SLAB // max(1, t.slices * t.n))


def _dense_probs(t: AttnTensors, bits: np.ndarray, mod: ScoreMod, q0: int, q1: int) -> np.ndarray:
    """Row-normalized attention weights (B, H, q1-q0, N); disallowed entries are exactly 0"""
    scores = np.einsum("bhqd,bhkd->bhqk", t.q[:, :, q0:q1], t.k) * t.dtype.type(t.scale)
    bias = mod.bias(np.arange(q0, q1), np.arange(t.n), t.dtype)
    if bias is not None:
        scores = scores + bias[None]
    allow = np.broadcast_to(bits[None, None], scores.shape)
    row_max = np.max(scores, axis=-1, keepdims=True, initial=-np.inf, where=allow)
    weights = np.exp(scores - row_max, where=allow, out=np.zeros_like(scores))
    return weights / weights.sum(axis=-1, keepdims=True)


def dense_forward(t: AttnTensors, mask: MaskMatrix, mod: ScoreMod = NO_MOD) -> np.ndarray:
    """
    Masked softmax attention over the full score matrix.

    Raises:
        DegenerateRowError: a mask row allows no key
        MismatchError: mask or score mod does not fit the tensors
    """
    t.validate()
    _check_mask(t, mask)
    mod.check(t)

    out = np.empty_like(t.v)
    step = _slab_rows(t)
    for q0 in range(0, t.n, step):
        q1 = min(q0 + step, t.n)
        probs = _dense_probs(t, mask.rows(q0, q1), mod, q0, q1)
        out[:, :, q0:q1] = np.einsum("bhqk,bhkd->bhqd", probs, t.v)
    return out


def dense_window_forward(t: AttnTensors, shape: GridShape, window: Tuple[int, int]) -> np.ndarray:
    """
    Row-major window attention via window partition + batched dense attention.

    Tokens are in row-major order; the result equals dense_forward with a WSA
    mask of the same window.
    """
    t.validate()
    if shape.n != t.n:
        raise MismatchError(f"grid {shape} has N={shape.n}, tensors have N={t.n}")
    qw = window_partition(t.q, shape, window)
    kw = window_partition(t.k, shape, window)
    vw = window_partition(t.v, shape, window)
    return window_merge(window_attention(qw, kw, vw, t.scale), shape, window)


def window_attention(qw: np.ndarray, kw: np.ndarray, vw: np.ndarray,
                     scale: Optional[float] = None) -> np.ndarray:
    """Full softmax attention inside each window; inputs are (..., nW, window tokens, head_dim)"""
    if scale is None:
        scale = 1.0 / np.sqrt(qw.shape[-1])
    scores = np.einsum("...wqd,...wkd->...wqk", qw, kw) * qw.dtype.type(scale)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return np.einsum("...wqk,...wkd->...wqd", weights, vw)


# ============================================================================
# BLOCK-SPARSE ENGINE
# ============================================================================

def _check_grid(t: AttnTensors, grid: BlockGrid, spec: Optional[PatternSpec]) -> PatternSpec:
    spec = spec if spec is not None else grid.spec
    if spec is None:
        raise ValidationError("sparse engine needs the pattern the grid was built from")
    ensure_matches(grid, spec)
    if grid.n != t.n:
        raise MismatchError(f"grid has N={grid.n}, tensors have N={t.n}")
    empty_rows = [i for i in grid.real_query_rows() if not grid.kv_lists[i]]
    if empty_rows:
        raise DegenerateRowError(f"{len(empty_rows)} query-block rows have no non-empty tile", rows=empty_rows)
    return spec


def _tile_scores(t: AttnTensors, spec: PatternSpec, mod: ScoreMod, q0: int, q1: int,
                 k0: int, k1: int, needs_mask: bool) -> np.ndarray:
    scores = np.einsum("bhqd,bhkd->bhqk", t.q[:, :, q0:q1], t.k[:, :, k0:k1]) * t.dtype.type(t.scale)
    bias = mod.bias(np.arange(q0, q1), np.arange(k0, k1), t.dtype)
    if bias is not None:
        scores = scores + bias[None]
    if needs_mask:
        allow = allowed_matrix(spec, np.arange(q0, q1), np.arange(k0, k1))
        scores = np.where(allow, scores, np.finfo(t.dtype).min)
    return scores


@dataclass
class _RowResult:
    out: np.ndarray
    lse: np.ndarray
    visits: int
    partial: int
    pairs: int


def _forward_row(t: AttnTensors, grid: BlockGrid, spec: PatternSpec, mod: ScoreMod, i: int) -> _RowResult:
    q0, q1, _, _ = grid.tile_bounds(i, 0)
    lead = (t.batch, t.heads, q1 - q0)
    running_max = np.full(lead, -np.inf, dtype=t.dtype)
    denom = np.zeros(lead, dtype=t.dtype)
    acc = np.zeros(lead + (t.dim,), dtype=t.dtype)
    partial = pairs = 0

    for entry in grid.kv_lists[i]:
        _, _, k0, k1 = grid.tile_bounds(i, entry.block)
        scores = _tile_scores(t, spec, mod, q0, q1, k0, k1, entry.needs_mask)
        partial += entry.needs_mask
        pairs += (q1 - q0) * (k1 - k0)

        new_max = np.maximum(running_max, scores.max(axis=-1))
        rescale = np.exp(running_max - new_max)
        weights = np.exp(scores - new_max[..., None])
        denom = denom * rescale + weights.sum(axis=-1)
        acc = acc * rescale[..., None] + np.einsum("bhqk,bhkd->bhqd", weights, t.v[:, :, k0:k1])
        running_max = new_max

    return _RowResult(
        out=acc / denom[..., None],
        lse=running_max + np.log(denom),
        visits=len(grid.kv_lists[i]),
        partial=partial,
        pairs=pairs,
    )


def _map_rows(fn, rows: List[int], threads: Optional[int]):
    threads = resolve_threads(threads)
    if threads == 1 or len(rows) <= 1:
        return [fn(i) for i in rows]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, rows))


def _sparse_forward(t: AttnTensors, grid: BlockGrid, spec: PatternSpec, mod: ScoreMod,
                    threads: Optional[int]) -> Tuple[np.ndarray, np.ndarray, ExecStats]:
    started = time.perf_counter()
    rows = list(grid.real_query_rows())
    results = _map_rows(lambda i: _forward_row(t, grid, spec, mod, i), rows, threads)

    out = np.empty_like(t.v)
    lse = np.empty((t.batch, t.heads, t.n), dtype=t.dtype)
    stats = ExecStats(slices=t.slices)
    for i, res in zip(rows, results):
        q0, q1, _, _ = grid.tile_bounds(i, 0)
        out[:, :, q0:q1] = res.out
        lse[:, :, q0:q1] = res.lse
        stats.blocks_visited += res.visits
        stats.elementwise_masks_applied += res.partial * t.slices
        stats.pairs_evaluated += res.pairs * t.slices
        stats.visited.update((i, entry.block) for entry in grid.kv_lists[i])
    stats.seconds = time.perf_counter() - started
    return out, lse, stats


def sparse_forward(t: AttnTensors, grid: BlockGrid, spec: Optional[PatternSpec] = None,
                   mod: ScoreMod = NO_MOD, threads: Optional[int] = None) -> Tuple[np.ndarray, ExecStats]:
    """
    Block-sparse attention: only the non-empty tiles of each query-block row
    are computed, in ascending key-block order.

    Args:
        t: tensors in the pattern's sequence order
        grid: BlockGrid classified from spec
        spec: the pattern (defaults to grid.spec)
        mod: score modifier
        threads: workers over query-block rows

    Returns:
        (output, ExecStats)
    """
    t.validate()
    spec = _check_grid(t, grid, spec)
    mod.check(t)
    out, _, stats = _sparse_forward(t, grid, spec, mod, threads)
    return out, stats


# ============================================================================
# BACKWARD
# ============================================================================

def _rpb_grad(mod: ScoreMod, d_scores: np.ndarray, q_idx: np.ndarray, k_idx: np.ndarray) -> np.ndarray:
    """Scatter-add dS (B, H, nq, nk) into a table-shaped gradient"""
    grad = np.zeros(mod.rpb_table.shape, dtype=d_scores.dtype)
    dr, dc = mod.offsets(q_idx, k_idx)
    per_head = d_scores.sum(axis=0)
    for h in range(grad.shape[0]):
        np.add.at(grad[h], (dr, dc), per_head[h])
    return grad


def _dense_backward(t: AttnTensors, mask: MaskMatrix, mod: ScoreMod, grad_out: np.ndarray) -> Gradients:
    _check_mask(t, mask)
    scale = t.dtype.type(t.scale)
    dq = np.zeros_like(t.q)
    dk = np.zeros_like(t.k)
    dv = np.zeros_like(t.v)
    drpb = np.zeros(mod.rpb_table.shape, dtype=t.dtype) if mod.active else None

    step = _slab_rows(t)
    keys = np.arange(t.n)
    for q0 in range(0, t.n, step):
        q1 = min(q0 + step, t.n)
        probs = _dense_probs(t, mask.rows(q0, q1), mod, q0, q1)
        d_out = grad_out[:, :, q0:q1]
        out = np.einsum("bhqk,bhkd->bhqd", probs, t.v)

        dv += np.einsum("bhqk,bhqd->bhkd", probs, d_out)
        d_probs = np.einsum("bhqd,bhkd->bhqk", d_out, t.v)
        delta = np.sum(d_out * out, axis=-1, keepdims=True)
        d_scores = probs * (d_probs - delta)

        dq[:, :, q0:q1] = scale * np.einsum("bhqk,bhkd->bhqd", d_scores, t.k)
        dk += scale * np.einsum("bhqk,bhqd->bhkd", d_scores, t.q[:, :, q0:q1])
        if drpb is not None:
            drpb += _rpb_grad(mod, d_scores, np.arange(q0, q1), keys)

    return Gradients(dq=dq, dk=dk, dv=dv, drpb=drpb)


@dataclass
class _RowGrad:
    dq: np.ndarray
    tiles: List[Tuple[int, int, np.ndarray, np.ndarray]]
    drpb: Optional[np.ndarray]


def _sparse_backward(t: AttnTensors, grid: BlockGrid, spec: PatternSpec, mod: ScoreMod,
                     grad_out: np.ndarray, threads: Optional[int]) -> Gradients:
    out, lse, _ = _sparse_forward(t, grid, spec, mod, threads)
    delta = np.sum(grad_out * out, axis=-1)
    scale = t.dtype.type(t.scale)

    def row_grad(i: int) -> _RowGrad:
        q0, q1, _, _ = grid.tile_bounds(i, 0)
        q_tile = t.q[:, :, q0:q1]
        d_out = grad_out[:, :, q0:q1]
        dq = np.zeros_like(q_tile)
        drpb = np.zeros(mod.rpb_table.shape, dtype=t.dtype) if mod.active else None
        tiles = []
        for entry in grid.kv_lists[i]:
            _, _, k0, k1 = grid.tile_bounds(i, entry.block)
            scores = _tile_scores(t, spec, mod, q0, q1, k0, k1, entry.needs_mask)
            probs = np.exp(scores - lse[:, :, q0:q1, None])
            v_tile = t.v[:, :, k0:k1]
            k_tile = t.k[:, :, k0:k1]

            dv_part = np.einsum("bhqk,bhqd->bhkd", probs, d_out)
            d_probs = np.einsum("bhqd,bhkd->bhqk", d_out, v_tile)
            d_scores = probs * (d_probs - delta[:, :, q0:q1, None])
            dq += scale * np.einsum("bhqk,bhkd->bhqd", d_scores, k_tile)
            dk_part = scale * np.einsum("bhqk,bhqd->bhkd", d_scores, q_tile)
            tiles.append((k0, k1, dk_part, dv_part))
            if drpb is not None:
                drpb += _rpb_grad(mod, d_scores, np.arange(q0, q1), np.arange(k0, k1))
        return _RowGrad(dq=dq, tiles=tiles, drpb=drpb)

    rows = list(grid.real_query_rows())
    results = _map_rows(row_grad, rows, threads)

    # per-row partials reduced in row order
    dq = np.zeros_like(t.q)
    dk = np.zeros_like(t.k)
    dv = np.zeros_like(t.v)
    drpb = np.zeros(mod.rpb_table.shape, dtype=t.dtype) if mod.active else None
    for i, res in zip(rows, results):
        q0, q1, _, _ = grid.tile_bounds(i, 0)
        dq[:, :, q0:q1] = res.dq
        for k0, k1, dk_part, dv_part in res.tiles:
            dk[:, :, k0:k1] += dk_part
            dv[:, :, k0:k1] += dv_part
        if drpb is not None:
            drpb += res.drpb
    return Gradients(dq=dq, dk=dk, dv=dv, drpb=drpb)


def backward(t: AttnTensors, mask_or_grid: Union[MaskMatrix, BlockGrid], mod: ScoreMod = NO_MOD,
             grad_out: Optional[np.ndarray] = None, spec: Optional[PatternSpec] = None,
             threads: Optional[int] = None) -> Gradients:
    """
    Gradients of sum(out * grad_out) with respect to q, k, v and the RPB table.

    A MaskMatrix selects the dense path; a BlockGrid selects the sparse path
    (recomputing tile probabilities from the forward log-sum-exp).
    """
    t.validate()
    mod.check(t)
    if grad_out is None or grad_out.shape != t.q.shape:
        raise ValidationError(f"grad_out must have shape {t.q.shape}")
    if not np.all(np.isfinite(grad_out)):
        raise ValidationError("grad_out has non-finite entries")
    grad_out = grad_out.astype(t.dtype, copy=False)

    if isinstance(mask_or_grid, MaskMatrix):
        return _dense_backward(t, mask_or_grid, mod, grad_out)
    if isinstance(mask_or_grid, BlockGrid):
        spec = _check_grid(t, mask_or_grid, spec)
        return _sparse_backward(t, mask_or_grid, spec, mod, grad_out, threads)
    raise ValidationError(f"expected MaskMatrix or BlockGrid, got {type(mask_or_grid).__name__}")
