"""
Prometheus metrics for toolkit runs.
Written to a text file on demand (`--metrics PATH`); there is no HTTP endpoint.
"""

import os
import time
from pathlib import Path
from typing import Optional, Union

import psutil
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, Info, generate_latest

STAGE_BUCKETS = (1e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1, 0.5, 1.0, 5.0, 30.0)


class ToolkitMetrics:
    """Centralized Prometheus metrics for HATK"""

    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.registry = registry or CollectorRegistry()

        # ===== ENGINE METRICS =====
        self.blocks_visited_total = Counter(
            'hatk_blocks_visited_total',
            'Tiles visited by the sparse engine, summed over slices',
            ['pattern'],
            registry=self.registry
        )

        self.elementwise_masks_total = Counter(
            'hatk_elementwise_masks_total',
            'Partial tiles masked element-wise, summed over slices',
            ['pattern'],
            registry=self.registry
        )

        self.engine_max_deviation = Gauge(
            'hatk_engine_max_deviation',
            'Max absolute dense vs sparse output deviation of the last check',
            ['pattern'],
            registry=self.registry
        )

        # ===== SWEEP METRICS =====
        self.sweep_cases_total = Counter(
            'hatk_sweep_cases_total',
            'Sweep cases by outcome',
            ['status'],
            registry=self.registry
        )

        self.empty_block_ratio = Gauge(
            'hatk_empty_block_ratio',
            'Empty-block ratio of the last run of a case',
            ['case'],
            registry=self.registry
        )

        self.stage_seconds = Histogram(
            'hatk_stage_seconds',
            'Mean per-iteration stage time',
            ['stage'],
            buckets=STAGE_BUCKETS,
            registry=self.registry
        )

        # ===== PROCESS METRICS =====
        self.memory_usage_bytes = Gauge(
            'hatk_memory_usage_bytes',
            'Resident set size of the toolkit process',
            registry=self.registry
        )

        self.build_info = Info(
            'hatk_build',
            'HATK build information',
            registry=self.registry
        )
        self.build_info.info({
            'version': '1.0.0',
            'python_version': f"{os.sys.version_info.major}.{os.sys.version_info.minor}.{os.sys.version_info.micro}"
        })

        self.start_time = time.time()

    def record_engine_run(self, pattern: str, blocks_visited: int, masks_applied: int):
        """Record one sparse-engine forward"""
        self.blocks_visited_total.labels(pattern=pattern).inc(blocks_visited)
        self.elementwise_masks_total.labels(pattern=pattern).inc(masks_applied)

    def record_deviation(self, pattern: str, deviation: float):
        self.engine_max_deviation.labels(pattern=pattern).set(deviation)

    def record_case(self, case: str, status: str, empty_ratio: Optional[float] = None):
        """Record a sweep case outcome (ok, mismatch, warning, error)"""
        self.sweep_cases_total.labels(status=status).inc()
        if empty_ratio is not None:
            self.empty_block_ratio.labels(case=case).set(empty_ratio)

    def record_stage(self, stage: str, seconds: float):
        self.stage_seconds.labels(stage=stage).observe(seconds)

    def update_system_metrics(self):
        """Update process resource metrics"""
        try:
            self.memory_usage_bytes.set(psutil.Process().memory_info().rss)
        except Exception:
            pass

    def get_metrics(self) -> bytes:
        """Generate Prometheus metrics output"""
        return generate_latest(self.registry)

    def write(self, path: Union[str, Path]):
        """Write the registry in Prometheus text format"""
        self.update_system_metrics()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.get_metrics())


# Global metrics instance
_metrics_instance: Optional[ToolkitMetrics] = None


def get_metrics() -> ToolkitMetrics:
    """Get or create the global metrics instance"""
    global _metrics_instance
    if _metrics_instance is None:
        _metrics_instance = ToolkitMetrics()
    return _metrics_instance


def reset_metrics():
    """Reset metrics instance (useful for testing)"""
    global _metrics_instance
    _metrics_instance = None
