import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nit.packing import (
    PackingError,
    assemble_packed_batch,
    build_cu_seqlens,
    packing_efficiency,
    plan_packing,
)
from nit.tokenizer import ShapeError, TokenMatrix


def _flat(packs):
    return sorted(i for pack in packs for i in pack)


class TestPlanPacking:
    def test_greedy_fill_single_pack(self):
        plan = plan_packing([1024, 512, 256, 256], 2048)
        assert len(plan.packs) == 1
        assert sorted(plan.packs[0]) == [0, 1, 2, 3]

    def test_exact_fit(self):
        plan = plan_packing([2048], 2048)
        assert plan.packs == [[0]]
        assert packing_efficiency(plan, [2048]) == 0.0

    def test_three_size_example(self):
        plan = plan_packing([1500, 1500, 500], 2048)
        assert len(plan.packs) == 2
        assert sorted(map(sorted, plan.packs)) == [[0, 2], [1]]
        waste = packing_efficiency(plan, [1500, 1500, 500])
        assert waste == pytest.approx((2048 * 2 - 3500) / 4096, abs=1e-12)

    def test_oversized_rejected(self):
        with pytest.raises(PackingError):
            plan_packing([3000], 2048)

    def test_non_positive_rejected(self):
        with pytest.raises(PackingError):
            plan_packing([4, 0], 8)

    def test_deterministic(self):
        counts = list(np.random.default_rng(0).integers(1, 257, size=40))
        assert plan_packing(counts, 512).packs == plan_packing(counts, 512).packs

    @given(
        counts=st.lists(st.integers(1, 256), min_size=1, max_size=40),
        budget=st.integers(256, 1024),
    )
    @settings(max_examples=100, deadline=None)
    def test_partition_capacity_and_waste(self, counts, budget):
        plan = plan_packing(counts, budget)
        # Partition: every instance in exactly one pack.
        assert _flat(plan.packs) == list(range(len(counts)))
        # Capacity: no pack exceeds the budget.
        for pack in plan.packs:
            assert sum(counts[i] for i in pack) <= budget
        # Never worse than padding every instance to the budget.
        waste = packing_efficiency(plan, counts)
        pad_waste = 1.0 - sum(counts) / (len(counts) * budget)
        assert waste <= pad_waste + 1e-12


class TestCuSeqlens:
    def test_basic(self):
        np.testing.assert_array_equal(build_cu_seqlens([4, 6, 2]), [0, 4, 10, 12])

    def test_single(self):
        np.testing.assert_array_equal(build_cu_seqlens([5]), [0, 5])

    def test_mixed_sizes(self):
        np.testing.assert_array_equal(build_cu_seqlens([64, 1024]), [0, 64, 1088])

    def test_dtype_int32(self):
        assert build_cu_seqlens([1, 2]).dtype == np.int32

    def test_overflow_rejected(self):
        with pytest.raises(PackingError):
            build_cu_seqlens([2**30, 2**30, 2**30])

    def test_zero_length_rejected(self):
        with pytest.raises(PackingError):
            build_cu_seqlens([4, 0, 2])


def _mats(counts, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return [
        TokenMatrix(rng.standard_normal((n, dim)).astype(np.float32), grid=(n, 1))
        for n in counts
    ]


class TestAssemble:
    def test_two_instances(self):
        batch = assemble_packed_batch(_mats([4, 2]), [0, 1])
        assert batch.tokens.shape == (6, 3)
        np.testing.assert_array_equal(batch.cu_seqlens, [0, 4, 6])
        assert batch.hw_list == [(4, 1), (2, 1)]

    def test_single_instance_identity(self):
        mats = _mats([5])
        batch = assemble_packed_batch(mats, [0])
        np.testing.assert_array_equal(batch.tokens, mats[0].tokens)
        np.testing.assert_array_equal(batch.cu_seqlens, [0, 5])

    def test_permutation_permutes_blocks(self):
        mats = _mats([4, 2, 3])
        fwd = assemble_packed_batch(mats, [0, 1, 2])
        rev = assemble_packed_batch(mats, [2, 1, 0])
        np.testing.assert_array_equal(rev.tokens[:3], fwd.tokens[6:9])
        np.testing.assert_array_equal(rev.tokens[3:5], fwd.tokens[4:6])
        np.testing.assert_array_equal(rev.tokens[5:9], fwd.tokens[0:4])

    def test_labels_and_times_aligned(self):
        mats = _mats([2, 3])
        batch = assemble_packed_batch(
            mats, [1, 0], labels=[7, 9], times=np.array([0.25, 0.75])
        )
        assert batch.labels == [9, 7]
        np.testing.assert_array_equal(batch.times, [0.75, 0.25])

    def test_mixed_dims_rejected(self):
        mats = [_mats([2], dim=3)[0], _mats([2], dim=4)[0]]
        with pytest.raises(ShapeError):
            assemble_packed_batch(mats, [0, 1])


class TestEfficiency:
    def test_packed_beats_padding(self):
        counts = [64, 1024]
        plan = plan_packing(counts, 2048)
        # Pad-to-max baseline: two slots of 1024 holding 1088 tokens.
        pad_to_max = 1.0 - 1088 / 2048
        assert pad_to_max == pytest.approx(0.46875)
        # Pad-to-budget baseline: two slots of 2048.
        pad_to_budget = 1.0 - 1088 / 4096
        waste = packing_efficiency(plan, counts)
        assert waste <= pad_to_max
        assert waste < pad_to_budget
