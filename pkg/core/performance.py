"""
Timing protocol and process resources for benchmarks.

Each measurement runs `runs` x `iterations`; the first quarter of every
run's iterations is warm-up and discarded. Stage boundaries are stamped
inside each iteration, so stage means always add up to the total.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from core.config import WARMUP_FRACTION, load_settings

logger = logging.getLogger(__name__)


def resolve_threads(threads: Optional[int] = None) -> int:
    """None -> configured value; 0 -> one per physical core."""
    if threads is None:
        threads = load_settings().threads
    if threads and threads > 0:
        return int(threads)
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def process_snapshot() -> Dict[str, float]:
    """Current process RSS and CPU counts"""
    try:
        process = psutil.Process()
        memory = process.memory_info()
        return {
            "rss_mb": round(memory.rss / 1024 / 1024, 2),
            "cpu_physical": psutil.cpu_count(logical=False) or 0,
            "cpu_logical": psutil.cpu_count() or 0,
        }
    except Exception as e:
        logger.warning(f"Error reading process resources: {e}")
        return {"rss_mb": 0.0, "cpu_physical": 0, "cpu_logical": 0}


@dataclass
class StageStat:
    mean: float = 0.0
    stdev: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {"mean": self.mean, "stdev": self.stdev}


@dataclass
class TimingResult:
    """Per-stage and total seconds, mean and stdev over runs"""
    stages: Dict[str, StageStat] = field(default_factory=dict)
    total: StageStat = field(default_factory=StageStat)
    runs: int = 0
    iterations: int = 0
    kept_iterations: int = 0
    rss_mb: float = 0.0

    def stage_mean(self, name: str) -> float:
        stat = self.stages.get(name)
        return stat.mean if stat else 0.0

    def to_dict(self) -> Dict:
        return {
            "stages": {name: stat.to_dict() for name, stat in self.stages.items()},
            "total": self.total.to_dict(),
            "runs": self.runs,
            "iterations": self.iterations,
            "kept_iterations": self.kept_iterations,
            "rss_mb": self.rss_mb,
        }


def _stat(values: List[float]) -> StageStat:
    if not values:
        return StageStat()
    return StageStat(
        mean=float(np.mean(values)),
        stdev=float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
    )


class StageTimer:
    """Run a staged pipeline under the warm-up protocol"""

    def __init__(self, runs: Optional[int] = None, iterations: Optional[int] = None,
                 warmup_fraction: float = WARMUP_FRACTION, clock: Callable[[], float] = time.perf_counter):
        settings = load_settings()
        self.runs = runs if runs is not None else settings.bench_runs
        self.iterations = iterations if iterations is not None else settings.bench_iterations
        if self.runs < 1 or self.iterations < 1:
            raise ValueError(f"runs and iterations must be >= 1, got {self.runs}x{self.iterations}")
        self.warmup = int(self.iterations * warmup_fraction)
        if self.warmup >= self.iterations:
            self.warmup = self.iterations - 1
        self.clock = clock

    def measure(self, stages: Sequence[Tuple[str, Callable[[Any], Any]]], initial: Any = None) -> TimingResult:
        """
        Time a chain of stages; each stage receives the previous stage's output.

        Args:
            stages: ordered (name, fn) pairs
            initial: input of the first stage

        Returns:
            TimingResult with per-stage statistics over runs
        """
        names = [name for name, _ in stages]
        per_run: Dict[str, List[float]] = {name: [] for name in names}
        per_run_total: List[float] = []

        for _ in range(self.runs):
            sums = dict.fromkeys(names, 0.0)
            total = 0.0
            kept = 0
            for it in range(self.iterations):
                value = initial
                stamps = [self.clock()]
                for _, fn in stages:
                    value = fn(value)
                    stamps.append(self.clock())
                if it < self.warmup:
                    continue
                kept += 1
                for idx, name in enumerate(names):
                    sums[name] += stamps[idx + 1] - stamps[idx]
                total += stamps[-1] - stamps[0]

            for name in names:
                per_run[name].append(sums[name] / kept)
            per_run_total.append(total / kept)

        return TimingResult(
            stages={name: _stat(values) for name, values in per_run.items()},
            total=_stat(per_run_total),
            runs=self.runs,
            iterations=self.iterations,
            kept_iterations=self.iterations - self.warmup,
            rss_mb=process_snapshot()["rss_mb"],
        )
