"""
Tests for the benchmark timing protocol.
"""

import pytest

from core.performance import StageTimer, process_snapshot, resolve_threads


class CountingClock:
    """Advances one second per reading"""

    def __init__(self):
        self.now = 0.0

    def __call__(self):
        self.now += 1.0
        return self.now


class TestStageTimer:
    """Warm-up protocol and stage statistics"""

    def test_stage_means(self):
        timer = StageTimer(runs=3, iterations=8, clock=CountingClock())
        result = timer.measure([
            ("reorder", lambda x: x + 1),
            ("attention", lambda x: x * 2),
            ("restore", lambda x: x - 1),
        ], initial=1)
        for name in ("reorder", "attention", "restore"):
            assert result.stage_mean(name) == 1.0
            assert result.stages[name].stdev == 0.0
        assert result.total.mean == 3.0
        assert result.stage_mean("missing") == 0.0

    def test_stdev_is_sample_stdev_over_runs(self):
        stamps = iter([0.0, 1.0, 10.0, 13.0])
        timer = StageTimer(runs=2, iterations=1, clock=lambda: next(stamps))
        result = timer.measure([("attention", lambda x: x)])
        assert result.stage_mean("attention") == 2.0
        assert result.stages["attention"].stdev == pytest.approx(2 ** 0.5)
        assert isinstance(result.total.stdev, float)

    def test_warmup_quarter_discarded(self):
        timer = StageTimer(runs=1, iterations=100)
        assert timer.warmup == 25
        result = timer.measure([("noop", lambda x: x)])
        assert result.kept_iterations == 75

    def test_single_iteration_keeps_it(self):
        result = StageTimer(runs=2, iterations=1).measure([("noop", lambda x: x)])
        assert result.kept_iterations == 1
        assert result.runs == 2

    def test_stages_chain_values(self):
        seen = []
        StageTimer(runs=1, iterations=1).measure([
            ("a", lambda x: x + [1]),
            ("b", lambda x: seen.append(x)),
        ], initial=[])
        assert seen == [[1]]

    @pytest.mark.parametrize("runs,iterations", [(0, 10), (1, 0)])
    def test_invalid_protocol(self, runs, iterations):
        with pytest.raises(ValueError):
            StageTimer(runs=runs, iterations=iterations)

    def test_defaults_from_settings(self, monkeypatch):
        monkeypatch.setenv("HATK_BENCH_RUNS", "4")
        monkeypatch.setenv("HATK_BENCH_ITERATIONS", "12")
        timer = StageTimer()
        assert (timer.runs, timer.iterations, timer.warmup) == (4, 12, 3)

    def test_result_dict(self):
        result = StageTimer(runs=1, iterations=4, clock=CountingClock()).measure([("x", lambda v: v)])
        data = result.to_dict()
        assert data["stages"]["x"]["mean"] == 1.0
        assert data["kept_iterations"] == 3


class TestResources:
    """Thread resolution and process snapshot"""

    def test_resolve_threads(self):
        assert resolve_threads() == 2
        assert resolve_threads(3) == 3
        assert resolve_threads(0) >= 1

    def test_process_snapshot(self):
        snapshot = process_snapshot()
        assert set(snapshot) == {"rss_mb", "cpu_physical", "cpu_logical"}
        assert snapshot["rss_mb"] > 0
