import numpy as np
import pytest

from ttyard import ops, ttconv
from ttyard.tensor_core import tt_reconstruct, tt_svd
from ttyard.ttconv import (ConvSpec, LowRankFactors, RankChoice, TTConvFactors,
                           apply_plan, factorize_kernel, lower, reconstruct_kernel,
                           select_ranks)


class TestSelectRanks:
    def test_spatial_heuristic(self):
        r = select_ranks(ConvSpec(256, 256, 3))
        assert r.kind == "spatial" and (r.r1, r.r2) == (4, 16)

    def test_pointwise_heuristic(self):
        r = select_ranks(ConvSpec(512, 512, 1))
        assert r.kind == "pointwise" and r.r == 16

    def test_narrow_layer_not_applicable(self):
        assert select_ranks(ConvSpec(64, 64, 3)) is None

    def test_threshold_uses_min_channel_count(self):
        assert select_ranks(ConvSpec(64, 512, 3)) is None
        assert select_ranks(ConvSpec(512, 64, 3)) is None
        assert select_ranks(ConvSpec(128, 128, 3)) is not None

    def test_r1_rounds_to_nearest_with_floor_one(self):
        assert select_ranks(ConvSpec(128, 128, 3)).r1 == 2
        assert select_ranks(ConvSpec(160, 160, 3)).r1 == 2  # 160/64 = 2.5 banker-rounds
        assert select_ranks(ConvSpec(200, 200, 5)).r1 == 3

    def test_rank_choice_validation(self):
        with pytest.raises(ValueError):
            RankChoice("spatial", r1=0, r2=16)
        with pytest.raises(ValueError):
            RankChoice("pointwise")
        with pytest.raises(ValueError):
            RankChoice("other", r=2)


def _brute_force_kernel(g1, g2, g3):
    """Triple-loop oracle for the three-core kernel sum."""
    l, _, r1 = g1.shape
    _, c, r2 = g2.shape
    s = g3.shape[1]
    k = np.zeros((s, c, l, l))
    for a in range(r1):
        for b in range(r2):
            for ci in range(c):
                for si in range(s):
                    k[si, ci] += g1[:, :, a] * g2[a, ci, b] * g3[b, si]
    return k


class TestReconstructKernel:
    def test_unit_rank_all_one_cores(self):
        spec = ConvSpec(2, 3, 3)
        f = TTConvFactors(np.ones((3, 3, 1)), np.ones((1, 2, 1)), np.ones((1, 3)), spec)
        assert np.array_equal(reconstruct_kernel(f), np.ones((3, 2, 3, 3)))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        spec = ConvSpec(4, 5, 3)
        g1 = rng.standard_normal((3, 3, 2))
        g2 = rng.standard_normal((2, 4, 3))
        g3 = rng.standard_normal((3, 5))
        f = TTConvFactors(g1, g2, g3, spec)
        assert np.abs(reconstruct_kernel(f) - _brute_force_kernel(g1, g2, g3)).max() <= 1e-13

    def test_pointwise_is_matrix_product(self):
        rng = np.random.default_rng(1)
        spec = ConvSpec(4, 6, 1)
        g1 = rng.standard_normal((4, 2))
        g2 = rng.standard_normal((2, 6))
        f = LowRankFactors(g1, g2, spec)
        assert np.allclose(reconstruct_kernel(f), (g1 @ g2).T.reshape(6, 4, 1, 1),
                           atol=1e-15)


class TestFactorizeKernel:
    def test_synthesize_then_recover(self):
        rng = np.random.default_rng(2)
        spec = ConvSpec(8, 8, 3)
        truth = TTConvFactors(rng.standard_normal((3, 3, 2)),
                              rng.standard_normal((2, 8, 3)),
                              rng.standard_normal((3, 8)), spec)
        w = reconstruct_kernel(truth)
        got = factorize_kernel(w, RankChoice("spatial", r1=2, r2=3), spec)
        rel = np.linalg.norm(reconstruct_kernel(got) - w) / np.linalg.norm(w)
        assert rel <= 1e-10

    def test_zero_weight_zero_cores(self):
        f = factorize_kernel(np.zeros((8, 8, 3, 3)), RankChoice("spatial", r1=2, r2=2))
        assert np.abs(reconstruct_kernel(f)).max() == 0.0
        fp = factorize_kernel(np.zeros((8, 8, 1, 1)), RankChoice("pointwise", r=2))
        assert np.all(fp.g1 == 0) and np.all(fp.g2 == 0)

    def test_residual_equals_tt_svd_truncation(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((128, 128, 3, 3))
        spec = ConvSpec(128, 128, 3, padding=1)
        f = factorize_kernel(w, RankChoice("spatial", r1=2, r2=16), spec)
        err = np.linalg.norm(reconstruct_kernel(f) - w)
        t = w.transpose(2, 3, 1, 0).reshape(9, 128, 128)
        tt = tt_svd(t, max_ranks=(2, 16))
        err_tt = np.linalg.norm(tt_reconstruct(tt) - t)
        assert np.isclose(err, err_tt, rtol=1e-10)

    def test_projection_property(self):
        # factorize . reconstruct applied twice at fixed ranks is idempotent
        rng = np.random.default_rng(4)
        w = rng.standard_normal((16, 16, 3, 3))
        ranks = RankChoice("spatial", r1=2, r2=4)
        k1 = reconstruct_kernel(factorize_kernel(w, ranks))
        k2 = reconstruct_kernel(factorize_kernel(k1, ranks))
        assert np.linalg.norm(k2 - k1) / np.linalg.norm(k1) <= 1e-12

    def test_rank_capped_silently(self):
        w = np.random.default_rng(5).standard_normal((4, 4, 3, 3))
        f = factorize_kernel(w, RankChoice("spatial", r1=100, r2=100))
        assert f.r1 <= 9 and f.r2 <= 4 * 9

    def test_pointwise_balanced_factors(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((8, 8, 1, 1))
        f = factorize_kernel(w, RankChoice("pointwise", r=8))
        # full rank: exact, with singular values split evenly between factors
        assert np.allclose(reconstruct_kernel(f), w, atol=1e-12)
        assert np.isclose(np.linalg.norm(f.g1), np.linalg.norm(f.g2))


class TestLower:
    def test_stage_weight_layout(self):
        rng = np.random.default_rng(7)
        spec = ConvSpec(4, 5, 3)
        f = TTConvFactors(rng.standard_normal((3, 3, 2)),
                          rng.standard_normal((2, 4, 3)),
                          rng.standard_normal((3, 5)), spec)
        plan = lower(f)
        w1, k2, w3 = plan.stages[0].weight, plan.stages[1].weight, plan.stages[2].weight
        r1, r2 = 2, 3
        for a in range(r1):
            for b in range(r2):
                # group-major channel layout: (r1, r2) -> r2*R1 + r1
                assert np.array_equal(w1[b * r1 + a, :, 0, 0], f.g2[a, :, b])
            assert np.array_equal(k2[a], f.g1[:, :, a])
        assert np.array_equal(w3[:, :, 0, 0], f.g3.T)
        assert plan.stages[1].groups == r2 and plan.stages[1].shared_kernel

    @pytest.mark.parametrize("c,s,stride", [(128, 128, 1), (128, 256, 2)])
    def test_equivalence_spatial(self, c, s, stride):
        rng = np.random.default_rng(c + s + stride)
        spec = ConvSpec(c, s, 3, stride=stride, padding=1)
        w = rng.standard_normal((s, c, 3, 3))
        f = factorize_kernel(w, select_ranks(spec), spec)
        plan = lower(f)
        x = rng.standard_normal((1, c, 8, 8))
        dense = ops.conv2d(x, reconstruct_kernel(f), stride=stride, padding=1)
        got = apply_plan(plan, x)
        assert got.shape == dense.shape
        assert np.abs(got - dense).max() <= 1e-10

    def test_equivalence_pointwise_strided(self):
        rng = np.random.default_rng(8)
        spec = ConvSpec(128, 128, 1, stride=2)
        w = rng.standard_normal((128, 128, 1, 1))
        f = factorize_kernel(w, select_ranks(spec), spec)
        plan = lower(f)
        x = rng.standard_normal((1, 128, 8, 8))
        dense = ops.conv2d(x, reconstruct_kernel(f), stride=2)
        assert np.abs(apply_plan(plan, x) - dense).max() <= 1e-10

    def test_equivalence_f32(self):
        rng = np.random.default_rng(9)
        spec = ConvSpec(128, 128, 3, padding=1)
        w = rng.standard_normal((128, 128, 3, 3))
        f = factorize_kernel(w, select_ranks(spec), spec)
        plan = lower(f)
        plan32 = ttconv.ThreeConvPlan(
            tuple(ttconv.ConvStage(st.weight.astype(np.float32), st.stride,
                                   st.padding, st.groups, st.shared_kernel)
                  for st in plan.stages), spec)
        x = rng.standard_normal((1, 128, 8, 8)).astype(np.float32)
        dense = ops.conv2d(x, reconstruct_kernel(f).astype(np.float32), padding=1)
        assert np.abs(apply_plan(plan32, x) - dense).max() <= 1e-3

    def test_bias_on_last_stage(self):
        rng = np.random.default_rng(10)
        spec = ConvSpec(128, 128, 3, padding=1, has_bias=True)
        w = rng.standard_normal((128, 128, 3, 3))
        bias = rng.standard_normal(128)
        f = factorize_kernel(w, select_ranks(spec), spec, bias=bias)
        plan = lower(f)
        assert plan.stages[0].bias is None and plan.stages[1].bias is None
        assert np.array_equal(plan.stages[2].bias, bias)
        x = rng.standard_normal((1, 128, 6, 6))
        dense = ops.conv2d(x, reconstruct_kernel(f), bias=bias, padding=1)
        assert np.abs(apply_plan(plan, x) - dense).max() <= 1e-10

    @pytest.mark.parametrize("c", [128, 256, 512])
    @pytest.mark.parametrize("s", [128, 256, 512])
    @pytest.mark.parametrize("l", [1, 3])
    def test_heuristic_reduces_params(self, c, s, l):
        spec = ConvSpec(c, s, l, padding=l // 2)
        ranks = select_ranks(spec)
        rng = np.random.default_rng(c * 7 + s * 3 + l)
        w = rng.standard_normal((s, c, l, l))
        plan = lower(factorize_kernel(w, ranks, spec))
        assert plan.param_count < c * s * l * l
