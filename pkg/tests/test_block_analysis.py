"""
Unit tests for core.block_analysis: tile labels, census, metadata and classifier agreement.
"""

import numpy as np
import pytest

from core.block_analysis import (
    BlockGrid, BlockLabel, BlockSpec, KvEntry, SparsityReport, block_metadata, classify,
    classify_mask, ensure_matches, percent, sparsity,
)
from core.errors import MismatchError, ValidationError
from core.grid_curve import GridShape
from core.patterns import MaskMatrix, make_pattern, materialize_mask

GRID_4 = GridShape(4, 4)
B4 = BlockSpec(4, 4)


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


class TestBlockSpec:
    """Tests for BlockSpec"""

    def test_default_is_128(self):
        assert BlockSpec() == BlockSpec(128, 128)

    @pytest.mark.parametrize("text,expected", [("128", (128, 128)), ("128,64", (128, 64)), ("64x32", (64, 32))])
    def test_parse(self, text, expected):
        spec = BlockSpec.parse(text)
        assert (spec.b_q, spec.b_k) == expected

    @pytest.mark.parametrize("text", ["0", "a", "1,2,3"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValidationError):
            BlockSpec.parse(text)


class TestClassify:
    """Tests for tile labeling"""

    def test_wsa_4x4(self):
        grid = classify(make_pattern("wsa", GRID_4, window=2), B4)
        assert grid.count(BlockLabel.PARTIAL) == 8
        assert grid.count(BlockLabel.EMPTY) == 8
        assert grid.count(BlockLabel.FULL) == 0

    def test_hwa_4x4(self):
        grid = classify(make_pattern("hwa", GRID_4, window=2), B4)
        assert grid.count(BlockLabel.FULL) == 4
        assert grid.count(BlockLabel.EMPTY) == 12
        assert np.array_equal(grid.labels == BlockLabel.FULL, np.eye(4, dtype=bool))

    def test_all_true_mask_is_all_full(self):
        mask = MaskMatrix.from_dense(np.ones((16, 16), dtype=bool))
        grid = classify_mask(mask, BlockSpec(4, 8))
        assert grid.count(BlockLabel.FULL) == grid.total_blocks == 8

    def test_padded_tiles_never_full(self):
        mask = MaskMatrix.from_dense(np.ones((10, 10), dtype=bool))
        grid = classify_mask(mask, B4)
        assert grid.rows == grid.cols == 3
        assert grid.n_pad == 12
        assert grid.count(BlockLabel.FULL) == 4
        assert grid.count(BlockLabel.PARTIAL) == 5

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            classify(make_pattern("hwa", GRID_4, window=2), B4, method="guess")

    def test_mask_size_mismatch(self):
        spec = make_pattern("hwa", GRID_4, window=2)
        other = materialize_mask(make_pattern("hwa", GridShape(2, 4), window=2))
        with pytest.raises(MismatchError):
            classify(spec, B4, method="mask", mask=other)

    @pytest.mark.parametrize("shape,window,kernel,blocks", [
        (GridShape(8, 8), 2, 3, BlockSpec(8, 8)),
        (GridShape(8, 8), 4, 5, BlockSpec(16, 8)),
        (GridShape(6, 6), 3, 3, BlockSpec(8, 8)),
        (GridShape(12, 10), 2, 5, BlockSpec(16, 32)),
        (GridShape(16, 16), 4, 7, BlockSpec(32, 32)),
    ])
    def test_methods_agree(self, shape, window, kernel, blocks):
        for spec in _patterns(shape, window, kernel):
            grids = [classify(spec, blocks, method=m) for m in ("intervals", "predicate", "mask")]
            for other in grids[1:]:
                assert np.array_equal(grids[0].counts, other.counts), spec.label
                assert grids[0].same_labels(other)

    def test_counts_are_allowed_pairs(self):
        spec = make_pattern("na2d", GridShape(12, 12), kernel=5)
        grid = classify(spec, BlockSpec(32, 32))
        assert grid.allowed_pairs() == materialize_mask(spec).popcount()

    def test_thread_count_does_not_change_result(self):
        spec = make_pattern("hna", GridShape(64, 64), kernel=9)
        blocks = BlockSpec(64, 64)
        single = classify(spec, blocks, threads=1)
        many = classify(spec, blocks, threads=4)
        assert single.counts.tobytes() == many.counts.tobytes()
        assert sparsity(single) == sparsity(many)

    @pytest.mark.parametrize("kind,param", [("wsa", 8), ("hwa", 8), ("sa", 9), ("na2d", 9), ("hna", 9)])
    def test_coarser_blocks_never_gain_emptiness(self, kind, param):
        shape = GridShape(64, 64)
        if kind in ("wsa", "hwa"):
            spec = make_pattern(kind, shape, window=param)
        else:
            spec = make_pattern(kind, shape, kernel=param)
        ratios = [sparsity(classify(spec, BlockSpec(b, b))).empty_ratio for b in (32, 64, 128, 256)]
        assert all(fine >= coarse for fine, coarse in zip(ratios, ratios[1:]))

    def test_permutation_keeps_allowed_pairs(self, rng):
        mask = materialize_mask(make_pattern("wsa", GridShape(8, 8), window=4))
        shuffled = mask.permuted(rng.permutation(64))
        a = classify_mask(mask, BlockSpec(16, 16))
        b = classify_mask(shuffled, BlockSpec(16, 16))
        assert a.allowed_pairs() == b.allowed_pairs()

    def test_every_real_row_has_work(self):
        spec = make_pattern("sa", GridShape(10, 10), kernel=3)
        grid = classify(spec, BlockSpec(16, 16))
        loads = grid.row_loads
        assert all(loads[i] > 0 for i in grid.real_query_rows())

    def test_tile_bounds_clip_padding(self):
        grid = classify(make_pattern("hsa", GridShape(6, 6), radius=2), BlockSpec(16, 16))
        assert grid.tile_bounds(2, 0) == (32, 36, 0, 16)

    def test_counts_shape_checked(self):
        with pytest.raises(ValidationError):
            BlockGrid(n=16, blocks=B4, counts=np.zeros((3, 4), dtype=np.int64))


class TestSparsity:
    """Tests for the empty/partial/full census"""

    def test_hwa_4x4_ratio(self):
        report = sparsity(classify(make_pattern("hwa", GRID_4, window=2), B4))
        assert report.empty_ratio == 0.75
        assert report.sparsity == report.empty_ratio
        assert report.nonempty_blocks == 4

    def test_ratios_sum_to_one(self):
        report = sparsity(classify(make_pattern("na2d", GridShape(10, 10), kernel=3), BlockSpec(16, 16)))
        assert report.empty_ratio + report.partial_ratio + report.full_ratio == pytest.approx(1.0, abs=1e-15)

    def test_kernel_sparsity_uses_unpadded_n(self):
        grid = classify(make_pattern("hsa", GridShape(6, 6), radius=2), BlockSpec(8, 8))
        report = sparsity(grid)
        assert report.n == 36 and report.n_pad == 40
        assert grid.r == 13
        assert report.kernel_sparsity == pytest.approx(1.0 - 13 * 64 / 36 ** 2)

    def test_kernel_sparsity_never_negative(self):
        dense = sparsity(classify_mask(MaskMatrix.from_dense(np.ones((36, 36), dtype=bool)), BlockSpec(16, 16)))
        assert dense.n_pad == 48 and dense.nonempty_blocks == 9
        assert dense.kernel_sparsity == 0.0
        banded = sparsity(classify(make_pattern("hsa", GridShape(6, 6), radius=2), BlockSpec(16, 16)))
        assert banded.nonempty_blocks == 7
        assert banded.kernel_sparsity == 0.0

    def test_to_row(self):
        report = sparsity(classify(make_pattern("hwa", GRID_4, window=2), B4))
        row = report.to_row()
        assert row["empty_pct"] == 75.0
        assert row["block"] == "4x4"
        assert row["pattern"] == "hwa 4x4 w2x2"

    def test_dict_round_trip(self):
        report = sparsity(classify(make_pattern("wsa", GRID_4, window=2), B4))
        assert SparsityReport.from_dict(report.to_dict()) == report

    @pytest.mark.parametrize("ratio,expected", [(0.96875, 96.88), (0.875, 87.5), (11 / 12, 91.67)])
    def test_percent(self, ratio, expected):
        assert percent(ratio) == expected


class TestBlockMetadata:
    """Tests for kv_lists / CSR metadata"""

    def test_hwa_rows_are_single_full_tiles(self):
        grid = classify(make_pattern("hwa", GRID_4, window=2), B4)
        assert grid.kv_lists == [[KvEntry(i, False)] for i in range(4)]

    def test_wsa_first_row(self):
        grid = classify(make_pattern("wsa", GRID_4, window=2), B4)
        assert grid.kv_lists[0] == [KvEntry(0, True), KvEntry(1, True)]
        assert grid.kv_lists[3] == [KvEntry(2, True), KvEntry(3, True)]

    def test_all_empty_grid(self):
        grid = BlockGrid(n=16, blocks=B4, counts=np.zeros((4, 4), dtype=np.int64))
        meta = block_metadata(grid)
        assert meta.r == 0
        assert all(row == [] for row in meta.kv_lists)

    def test_csr_matches_lists(self):
        grid = classify(make_pattern("na2d", GridShape(16, 16), kernel=5), BlockSpec(32, 32))
        meta = grid.metadata
        assert meta.r == grid.r == sum(len(row) for row in meta.kv_lists)
        for i in range(grid.rows):
            lo, hi = meta.row_ptr[i], meta.row_ptr[i + 1]
            assert meta.indices[lo:hi].tolist() == [e.block for e in meta.row(i)]
            assert meta.indices[lo:hi].tolist() == sorted(meta.indices[lo:hi].tolist())


class TestEnsureMatches:
    """Tests for grid/pattern binding"""

    def test_same_pattern_passes(self):
        spec = make_pattern("hwa", GRID_4, window=2)
        ensure_matches(classify(spec, B4), spec)

    def test_different_pattern_rejected(self):
        grid = classify(make_pattern("hwa", GRID_4, window=2), B4)
        with pytest.raises(MismatchError):
            ensure_matches(grid, make_pattern("wsa", GRID_4, window=2))

    def test_different_size_rejected(self):
        grid = classify(make_pattern("hwa", GRID_4, window=2), B4)
        with pytest.raises(MismatchError):
            ensure_matches(grid, make_pattern("hwa", GridShape(4, 8), window=2))
