"""
Tests for ml.attention forward engines: dense oracle, block-sparse engine,
window baseline and score modifiers.
"""

import numpy as np
import pytest

from core.block_analysis import BlockLabel, BlockSpec, classify
from core.errors import DegenerateRowError, MismatchError, ValidationError
from core.grid_curve import GridShape, OrderingKind, get_mapping
from core.patterns import MaskMatrix, make_pattern, materialize_mask
from ml.attention import (
    NO_MOD, AttnTensors, ExecStats, ScoreMod, apply_score_mod, dense_forward, dense_window_forward,
    engine_tolerance, global_rpb, random_tensors, sparse_forward,
)

# (shape, window, kernel, block)
ENGINE_GRIDS = [
    (GridShape(4, 4), 2, 3, 4),
    (GridShape(8, 8), 4, 3, 16),
    (GridShape(16, 16), 4, 5, 32),
    (GridShape(32, 32), 8, 7, 64),
]


def _patterns(shape, window, kernel):
    return [
        make_pattern("wsa", shape, window=window),
        make_pattern("hwa", shape, window=window),
        make_pattern("hswa", shape, window=window),
        make_pattern("sa", shape, kernel=kernel),
        make_pattern("na2d", shape, kernel=kernel),
        make_pattern("hsa", shape, kernel=kernel),
        make_pattern("hna", shape, kernel=kernel),
    ]


class TestAttnTensors:
    """Tests for AttnTensors validation"""

    def test_default_scale(self):
        t = random_tensors(1, 1, 4, 16)
        assert t.scale == pytest.approx(0.25)

    def test_shape_mismatch(self):
        q = np.zeros((1, 1, 4, 2))
        with pytest.raises(ValidationError):
            AttnTensors(q, np.zeros((1, 1, 5, 2)), q)

    def test_rank_checked(self):
        with pytest.raises(ValidationError):
            AttnTensors(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)))

    def test_non_finite_rejected(self):
        q = np.zeros((1, 1, 4, 2))
        q[0, 0, 1, 1] = np.nan
        with pytest.raises(ValidationError):
            AttnTensors(q, np.zeros_like(q), np.zeros_like(q))

    def test_seeded(self):
        a = random_tensors(2, 2, 16, 8, seed=3)
        b = random_tensors(2, 2, 16, 8, seed=3)
        assert np.array_equal(a.q, b.q) and np.array_equal(a.v, b.v)

    def test_tolerance_by_dtype(self):
        assert engine_tolerance(np.float64) == 1e-10
        assert engine_tolerance("float32") == 1e-4


class TestDenseForward:
    """Closed-form cases for the oracle"""

    def test_constant_values(self):
        t = random_tensors(1, 2, 16, 4, seed=1)
        t.v[:] = np.array([1.5, -2.0, 0.25, 3.0])
        mask = materialize_mask(make_pattern("na2d", GridShape(4, 4), kernel=3))
        out = dense_forward(t, mask)
        assert np.allclose(out, t.v, atol=1e-12)

    def test_single_key_mask(self):
        t = random_tensors(1, 1, 8, 3, seed=2)
        bits = np.zeros((8, 8), dtype=bool)
        targets = [3, 3, 0, 7, 1, 2, 2, 5]
        bits[np.arange(8), targets] = True
        out = dense_forward(t, MaskMatrix.from_dense(bits))
        assert np.array_equal(out[0, 0], t.v[0, 0, targets])

    def test_rows_are_stochastic(self):
        n = 16
        t = random_tensors(1, 1, n, n, seed=4)
        t.v[0, 0] = np.eye(n)
        mask = materialize_mask(make_pattern("hsa", GridShape(4, 4), radius=2))
        weights = dense_forward(t, mask)[0, 0]
        assert np.all(weights >= 0)
        assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(weights[~mask.to_dense()] == 0)

    def test_zero_scores_average_allowed_values(self):
        t = random_tensors(1, 1, 16, 4, seed=5)
        t.q[:] = 0
        t.k[:] = 0
        mask = materialize_mask(make_pattern("hwa", GridShape(4, 4), window=2))
        out = dense_forward(t, mask)
        for q in range(16):
            keys = mask.row(q)
            assert np.allclose(out[0, 0, q], t.v[0, 0, keys].mean(axis=0), atol=1e-12)

    def test_degenerate_row(self):
        t = random_tensors(1, 1, 4, 2)
        bits = np.eye(4, dtype=bool)
        bits[1, 1] = False
        with pytest.raises(DegenerateRowError):
            dense_forward(t, MaskMatrix.from_dense(bits))

    def test_size_mismatch(self):
        t = random_tensors(1, 1, 8, 2)
        with pytest.raises(MismatchError):
            dense_forward(t, MaskMatrix.from_dense(np.ones((4, 4), dtype=bool)))

    def test_permutation_equivariance(self):
        shape = GridShape(8, 8)
        t = random_tensors(2, 2, 64, 4, seed=6)
        mask = materialize_mask(make_pattern("na2d", shape, kernel=3))
        perm = get_mapping(shape, OrderingKind.HILBERT).permutation
        direct = dense_forward(t, mask)[:, :, perm]
        permuted = dense_forward(t.permuted(perm), mask.permuted(perm))
        assert np.max(np.abs(direct - permuted)) <= 1e-12


class TestSparseForward:
    """Block-sparse engine against the dense oracle"""

    @pytest.mark.acceptance
    @pytest.mark.parametrize("shape,window,kernel,block", ENGINE_GRIDS)
    def test_matches_dense(self, shape, window, kernel, block):
        t = random_tensors(2, 2, shape.n, 8, seed=shape.n)
        for spec in _patterns(shape, window, kernel):
            for blocks in (BlockSpec(block, block), BlockSpec(block // 2 + 1, block)):
                grid = classify(spec, blocks)
                out, stats = sparse_forward(t, grid, spec)
                expected = dense_forward(t, materialize_mask(spec))
                assert np.max(np.abs(out - expected)) <= 1e-10, f"{spec.label} {blocks}"
                assert stats.blocks_visited == grid.r

    def test_matches_dense_with_rpb(self):
        shape = GridShape(8, 8)
        t = random_tensors(1, 2, 64, 4, seed=7)
        for spec in _patterns(shape, 4, 3):
            mod = global_rpb(2, shape, ordering=spec.ordering, seed=1, std=0.5)
            grid = classify(spec, BlockSpec(16, 16))
            out, _ = sparse_forward(t, grid, spec, mod)
            expected = dense_forward(t, materialize_mask(spec), mod)
            assert np.max(np.abs(out - expected)) <= 1e-10, spec.label

    def test_float32_within_tolerance(self):
        spec = make_pattern("hna", GridShape(16, 16), kernel=5)
        t = random_tensors(1, 2, 256, 8, dtype="float32", seed=8)
        out, _ = sparse_forward(t, classify(spec, BlockSpec(32, 32)), spec)
        expected = dense_forward(t, materialize_mask(spec))
        assert out.dtype == np.float32
        assert np.max(np.abs(out - expected)) <= engine_tolerance(np.float32)

    def test_hwa_64_visits_one_partial_tile_per_row(self):
        spec = make_pattern("hwa", GridShape(64, 64), window=8)
        grid = classify(spec, BlockSpec())
        _, stats = sparse_forward(random_tensors(1, 1, 4096, 4, seed=9), grid, spec)
        assert stats.blocks_visited == grid.r == 32
        assert all(len(row) == 1 for row in grid.kv_lists)
        assert grid.count(BlockLabel.PARTIAL) == grid.r
        assert stats.elementwise_masks_applied == grid.labels.shape[0] == 32

    def test_stats_count_all_slices(self):
        spec = make_pattern("wsa", GridShape(4, 4), window=2)
        grid = classify(spec, BlockSpec(4, 4))
        _, stats = sparse_forward(random_tensors(2, 3, 16, 2), grid, spec)
        assert stats.slices == 6
        assert stats.blocks_visited == 8
        assert stats.block_visits_total == 48
        assert stats.elementwise_masks_applied == 48
        assert stats.pairs_evaluated == 8 * 16 * 6
        assert stats.per_slice["pairs_evaluated"] == 128
        assert set(stats.to_dict()) == {
            "blocks_visited", "block_visits_total", "pairs_evaluated",
            "elementwise_masks_applied", "slices", "seconds",
        }

    def test_thread_count_does_not_change_output(self):
        spec = make_pattern("na2d", GridShape(16, 16), kernel=5)
        grid = classify(spec, BlockSpec(16, 16))
        t = random_tensors(1, 2, 256, 4, seed=10)
        single, _ = sparse_forward(t, grid, spec, threads=1)
        many, _ = sparse_forward(t, grid, spec, threads=4)
        assert single.tobytes() == many.tobytes()

    def test_hilbert_windows_match_row_major_windows(self):
        shape = GridShape(16, 16)
        t = random_tensors(1, 2, 256, 4, seed=11)
        wsa = make_pattern("wsa", shape, window=4)
        hwa = make_pattern("hwa", shape, window=4)
        perm = hwa.mapping.permutation
        out_wsa, _ = sparse_forward(t, classify(wsa, BlockSpec(16, 16)), wsa)
        out_hwa, _ = sparse_forward(t.permuted(perm), classify(hwa, BlockSpec(16, 16)), hwa)
        assert np.max(np.abs(out_hwa - out_wsa[:, :, perm])) <= 1e-12

    def test_grid_for_other_pattern_rejected(self):
        shape = GridShape(4, 4)
        grid = classify(make_pattern("hwa", shape, window=2), BlockSpec(4, 4))
        with pytest.raises(MismatchError):
            sparse_forward(random_tensors(1, 1, 16, 2), grid, make_pattern("wsa", shape, window=2))

    def test_grid_size_mismatch(self):
        spec = make_pattern("hwa", GridShape(4, 4), window=2)
        with pytest.raises(MismatchError):
            sparse_forward(random_tensors(1, 1, 32, 2), classify(spec, BlockSpec(4, 4)), spec)


@pytest.mark.acceptance
@pytest.mark.timeout(120)
def test_skip_honesty_on_random_configurations():
    rng = np.random.default_rng(2024)
    sides = [4, 6, 8, 12, 16]
    kinds = ["wsa", "hwa", "hswa", "sa", "na2d", "hsa", "hna"]

    for trial in range(100):
        shape = GridShape(int(rng.choice(sides)), int(rng.choice(sides)))
        kind = kinds[trial % len(kinds)]
        if kind in ("wsa", "hwa", "hswa"):
            window = (int(rng.choice([d for d in (1, 2, 3, 4) if shape.height % d == 0])),
                      int(rng.choice([d for d in (1, 2, 3, 4) if shape.width % d == 0])))
            if kind == "hswa" and window == (1, 1):
                window = (2, 2)
            spec = make_pattern(kind, shape, window=window)
        else:
            kernel = int(rng.choice([k for k in (1, 3, 5) if k <= min(shape.height, shape.width)]))
            spec = make_pattern(kind, shape, kernel=(kernel, kernel), radius=int(rng.integers(1, 6)))
        blocks = BlockSpec(int(rng.integers(1, 40)), int(rng.integers(1, 40)))
        grid = classify(spec, blocks)

        _, stats = sparse_forward(random_tensors(1, 1, shape.n, 2, seed=trial), grid, spec)
        assert stats.blocks_visited == grid.r, spec.label
        for i, j in stats.visited:
            assert grid.labels[i, j] != BlockLabel.EMPTY, spec.label


class TestWindowBaseline:
    """dense_window_forward is the row-major window engine"""

    def test_matches_wsa_mask(self):
        shape = GridShape(8, 12)
        t = random_tensors(2, 2, 96, 4, seed=12)
        out = dense_window_forward(t, shape, (4, 3))
        expected = dense_forward(t, materialize_mask(make_pattern("wsa", shape, window=(4, 3))))
        assert np.max(np.abs(out - expected)) <= 1e-12

    def test_size_mismatch(self):
        with pytest.raises(MismatchError):
            dense_window_forward(random_tensors(1, 1, 16, 2), GridShape(2, 4), (2, 2))


class TestScoreMod:
    """Global relative position bias lookups"""

    def test_no_mod_is_identity(self):
        assert apply_score_mod(NO_MOD, 0, 5, 1.25) == 1.25

    def test_zero_table_is_identity(self):
        shape = GridShape(4, 4)
        mod = global_rpb(1, shape, table=np.zeros((1, 7, 7)))
        assert all(apply_score_mod(mod, q, k, 0.5) == 0.5 for q in range(16) for k in range(16))

    def test_lookup_uses_cell_offset(self):
        shape = GridShape(4, 4)
        table = np.arange(49, dtype=np.float64).reshape(1, 7, 7)
        mod = global_rpb(1, shape, ordering=OrderingKind.HILBERT, table=table)
        mapping = get_mapping(shape, OrderingKind.HILBERT)
        assert mapping.cell(3) == (1, 0)
        assert apply_score_mod(mod, 0, 3, 0.0) == table[0, 0 - 1 + 3, 0 - 0 + 3]

    def test_same_cells_same_bias_in_both_orderings(self, rng):
        shape = GridShape(4, 4)
        table = rng.standard_normal((2, 7, 7))
        hilbert = global_rpb(2, shape, ordering=OrderingKind.HILBERT, table=table)
        row_major = global_rpb(2, shape, ordering=OrderingKind.ROW_MAJOR, table=table)
        mapping = get_mapping(shape, OrderingKind.HILBERT)
        for q in range(16):
            for k in range(16):
                (qr, qc), (kr, kc) = mapping.cell(q), mapping.cell(k)
                assert apply_score_mod(hilbert, q, k, 0.0, head=1) == \
                    apply_score_mod(row_major, qr * 4 + qc, kr * 4 + kc, 0.0, head=1)

    def test_table_shape_checked(self):
        with pytest.raises(ValidationError):
            global_rpb(1, GridShape(4, 4), table=np.zeros((1, 4, 4)))

    def test_heads_must_match(self):
        spec = make_pattern("hwa", GridShape(4, 4), window=2)
        mod = global_rpb(3, spec.shape)
        with pytest.raises(MismatchError):
            dense_forward(random_tensors(1, 2, 16, 2), materialize_mask(spec), mod)

    def test_out_of_range_index(self):
        mod = global_rpb(1, GridShape(4, 4))
        with pytest.raises(ValidationError):
            apply_score_mod(mod, 16, 0, 0.0)

    def test_inactive_mod_requires_nothing(self):
        assert not ScoreMod().active
        with pytest.raises(ValidationError):
            ScoreMod("global-rpb")


def test_exec_stats_defaults():
    stats = ExecStats()
    assert stats.block_visits_total == 0
    assert stats.visited == set()
