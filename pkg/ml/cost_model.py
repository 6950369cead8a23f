"""
CTA cost model for block-sparse attention.

One CTA per query-block row holding a real query. With r_i non-empty tiles
in CTA i the runtime estimate is

    T = slices * sum_i (alpha + beta * r_i) / p_eff

where slices = batch * heads multiplies the CTA count.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from core.block_analysis import BlockGrid, BlockSpec, classify, sparsity
from core.config import load_settings
from core.errors import MismatchError, UnfittableError, ValidationError
from core.grid_curve import GridShape
from core.patterns import make_pattern
from telemetry.logger import log_event

logger = logging.getLogger(__name__)

# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True)
class CostParams:
    """alpha: seconds per CTA, beta: seconds per non-empty tile, p_eff: effective parallelism"""
    alpha: float
    beta: float
    p_eff: float = 1.0
    # calibration state, empty for hand-set parameters
    residuals: Tuple[float, ...] = field(default=(), compare=False)
    r2: Optional[float] = field(default=None, compare=False)
    samples: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be > 0, got {self.beta}")
        if not self.p_eff >= 1:
            raise ValidationError(f"p_eff must be >= 1, got {self.p_eff}")

    @property
    def fitted(self) -> bool:
        return self.samples > 0

    def to_dict(self) -> Dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "p_eff": self.p_eff,
            "residuals": list(self.residuals),
            "r2": self.r2,
            "samples": self.samples,
        }


@dataclass(frozen=True)
class CtaProfile:
    """CTA count and total non-empty tiles of one launch, without the grid"""
    m: int
    r_total: int
    slices: int = 1

    @classmethod
    def from_grid(cls, grid: BlockGrid, slices: int = 1) -> "CtaProfile":
        loads = cta_loads(grid)
        return cls(m=len(loads), r_total=int(loads.sum()), slices=slices)


# ============================================================================
# ESTIMATES
# ============================================================================

def cta_loads(grid: BlockGrid) -> np.ndarray:
    """r_i for every CTA (query-block rows with real queries)"""
    return grid.row_loads[grid.real_query_rows()]


def load_histogram(grid: BlockGrid) -> Dict[int, int]:
    """{r: number of CTAs with r non-empty tiles}"""
    values, counts = np.unique(cta_loads(grid), return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def estimate_time(grid: Union[BlockGrid, CtaProfile], params: CostParams, slices: int = 1) -> float:
    """
    Predicted seconds for one launch over `slices` (batch x heads) slices.

    A CtaProfile carries its own slice count.
    """
    if isinstance(grid, CtaProfile):
        return grid.slices * (grid.m * params.alpha + params.beta * grid.r_total) / params.p_eff

    total = 0.0
    for r in cta_loads(grid).tolist():
        total += params.alpha + params.beta * r
    return slices * total / params.p_eff


def predicted_speedup(a: BlockGrid, b: BlockGrid, params: CostParams) -> float:
    """estimate_time(a) / estimate_time(b): how much faster b runs than a"""
    if a.n != b.n or a.blocks != b.blocks:
        raise MismatchError(
            f"grids differ: N={a.n} vs {b.n}, blocks {a.blocks} vs {b.blocks}"
        )
    t_b = estimate_time(b, params)
    if t_b == 0:
        raise ValidationError("reference grid has zero predicted time")
    return estimate_time(a, params) / t_b


def speedup_curve(grids: Sequence[BlockGrid], reference: BlockGrid, params: CostParams) -> pd.DataFrame:
    """Predicted speedup over `reference` against empty-block ratio, sorted by ratio."""
    rows = []
    for grid in grids:
        report = sparsity(grid)
        rows.append({
            "pattern": report.pattern,
            "empty_ratio": report.empty_ratio,
            "r_total": report.nonempty_blocks,
            "seconds": estimate_time(grid, params),
            "speedup": predicted_speedup(reference, grid, params),
        })
    frame = pd.DataFrame(rows, columns=["pattern", "empty_ratio", "r_total", "seconds", "speedup"])
    return frame.sort_values("empty_ratio", kind="stable").reset_index(drop=True)


# ============================================================================
# CALIBRATION
# ============================================================================

Sample = Tuple[Union[BlockGrid, CtaProfile], float]


def calibrate(samples: Sequence[Sample], p_eff: Optional[float] = None) -> CostParams:
    """
    Least-squares fit of alpha and beta from measured launches.

    Args:
        samples: (grid or CtaProfile, measured seconds) pairs
        p_eff: fixed effective parallelism (default: configured, 1.0)

    Returns:
        CostParams with residuals and r2 of the fit

    Raises:
        UnfittableError: fewer than 3 samples, collinear (M, R) pairs, or a
            non-positive per-tile cost
    """
    p_eff = load_settings().p_eff if p_eff is None else p_eff
    if len(samples) < 3:
        raise UnfittableError(f"need at least 3 samples, got {len(samples)}")

    profiles = [s if isinstance(s, CtaProfile) else CtaProfile.from_grid(s) for s, _ in samples]
    y = np.array([float(seconds) for _, seconds in samples])
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise UnfittableError("measured seconds must be finite and non-negative")

    X = np.array([[p.slices * p.m / p_eff, p.slices * p.r_total / p_eff] for p in profiles])
    if np.linalg.matrix_rank(X) < 2:
        raise UnfittableError("(M, R) samples are collinear; the design matrix is rank deficient")

    model = LinearRegression(fit_intercept=False).fit(X, y)
    alpha, beta = (float(c) for c in model.coef_)
    if alpha < 0:
        logger.info(f"Fitted alpha {alpha:.3e} < 0, clamping to 0 and refitting beta")
        alpha = 0.0
        beta = float(LinearRegression(fit_intercept=False).fit(X[:, 1:], y).coef_[0])
    if not beta > 0:
        raise UnfittableError(f"fitted beta {beta:.3e} is not positive")

    predicted = X @ np.array([alpha, beta])
    residuals = y - predicted
    r2 = float(r2_score(y, predicted)) if len(y) > 1 and np.ptp(y) > 0 else 1.0

    params = CostParams(alpha=alpha, beta=beta, p_eff=p_eff, residuals=tuple(residuals.tolist()),
                        r2=r2, samples=len(samples))
    log_event("calibration_fit", params.to_dict())
    logger.info(f"Calibrated alpha={alpha:.4e}s beta={beta:.4e}s (r2={r2:.4f}, {len(samples)} samples)")
    return params


def load_samples(path: Union[str, Path]) -> List[Sample]:
    """
    Read calibration samples from JSON.

    Each entry is either {"m", "r", "seconds"[, "slices"]} or
    {"pattern", "height", "width", "window"|"kernel"|"radius", "block", "seconds"[, "slices"]}.
    """
    with open(path) as f:
        entries = json.load(f)
    if isinstance(entries, dict):
        entries = entries.get("samples", [])

    samples: List[Sample] = []
    for idx, entry in enumerate(entries):
        try:
            slices = int(entry.get("slices", 1))
            if "m" in entry:
                profile = CtaProfile(m=int(entry["m"]), r_total=int(entry["r"]), slices=slices)
            else:
                spec = make_pattern(
                    entry["pattern"], GridShape(int(entry["height"]), int(entry["width"])),
                    window=entry.get("window"), kernel=entry.get("kernel"),
                    radius=entry.get("radius"), shift=entry.get("shift"),
                )
                block = entry.get("block", 128)
                blocks = BlockSpec(*block) if isinstance(block, list) else BlockSpec.parse(str(block))
                grid = classify(spec, blocks)
                profile = CtaProfile.from_grid(grid, slices=slices)
            samples.append((profile, float(entry["seconds"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"calibration sample {idx}: {e}")
    return samples
