import numpy as np
import pytest

from ttyard import nn, yard
from ttyard.archs import build_toy_model
from ttyard.data import gen_synthetic
from ttyard.ttconv import ConvSpec, select_ranks


def make_mixed(c=128, s=128, l=3, rng=None, dtype=np.float64):
    rng = rng or np.random.default_rng(0)
    conv = nn.Conv2d(c, s, l, padding=l // 2, rng=rng, dtype=dtype, name="conv")
    ranks = select_ranks(ConvSpec(c, s, l, padding=l // 2))
    branch = yard.build_tt_branch(conv, ranks)
    return yard.MixedOp(conv, branch, layer_id=0)


def small_yard_setup(seed=1, n_train=64, n_test=32):
    model = build_toy_model(np.random.default_rng(seed))
    tr = gen_synthetic(n_train, seed)
    te = gen_synthetic(n_test, seed + 1)
    return model, (tr.images, tr.labels), (te.images, te.labels)


class TestMixedOp:
    def test_alpha_initialized_half(self):
        op = make_mixed()
        assert float(op.alpha.data) == 0.5

    def test_affine_in_alpha(self):
        rng = np.random.default_rng(1)
        op = make_mixed(rng=rng)
        x = rng.standard_normal((1, 128, 6, 6))
        outs = {}
        for a in (0.0, 0.5, 1.0):
            op.alpha.data = np.asarray(a)
            outs[a] = op.forward(x)
        mid = 0.5 * outs[0.0] + 0.5 * outs[1.0]
        assert np.abs(outs[0.5] - mid).max() <= 1e-12

    def test_alpha_one_is_conv_branch(self):
        rng = np.random.default_rng(2)
        op = make_mixed(rng=rng)
        op.alpha.data = np.asarray(1.0)
        x = rng.standard_normal((1, 128, 6, 6))
        assert np.abs(op.forward(x) - op.conv_branch.forward(x)).max() <= 1e-12

    def test_alpha_zero_is_tt_branch_f32(self):
        rng = np.random.default_rng(3)
        op = make_mixed(rng=rng, dtype=np.float32)
        op.alpha.data = np.asarray(0.0, dtype=np.float32)
        x = rng.standard_normal((1, 128, 6, 6)).astype(np.float32)
        assert np.abs(op.forward(x) - op.tt_branch.forward(x)).max() <= 1e-6

    def test_branch_init_from_decomposition_close_to_conv(self):
        # tt branch starts as the rank-capped projection of the conv kernel,
        # so the two branches agree to within the truncation residual
        rng = np.random.default_rng(4)
        op = make_mixed(rng=rng)
        x = rng.standard_normal((1, 128, 6, 6))
        c = op.conv_branch.forward(x)
        t = op.tt_branch.forward(x)
        rel = np.linalg.norm(c - t) / np.linalg.norm(c)
        assert rel < 1.0

    def test_alpha_gradient_identity(self):
        rng = np.random.default_rng(5)
        op = make_mixed(rng=rng)
        x = rng.standard_normal((1, 128, 6, 6))
        gout = rng.standard_normal(op.forward(x).shape)
        nn.zero_grads(op)
        op.forward(x)
        op.backward(gout)
        c = op.conv_branch.forward(x)
        t = op.tt_branch.forward(x)
        expect = (gout * (c - t)).sum()
        assert np.isclose(float(op.alpha.grad), expect, rtol=1e-12)

    def test_alpha_gradient_finite_difference(self):
        rng = np.random.default_rng(6)
        op = make_mixed(c=128, s=128, l=1, rng=rng)
        model = nn.Sequential(op, nn.GlobalAvgPool(),
                              nn.Linear(128, 4, rng=rng, dtype=np.float64))
        x = rng.standard_normal((2, 128, 4, 4))
        y = np.array([1, 3])
        nn.zero_grads(model)
        logits = model.forward(x, train=True)
        loss, dlogits = nn.softmax_cross_entropy(logits, y)
        model.backward(dlogits)
        analytic = float(op.alpha.grad)
        eps = 1e-6
        vals = []
        for delta in (eps, -eps):
            op.alpha.data = np.asarray(0.5 + delta)
            l2, _ = nn.softmax_cross_entropy(model.forward(x, train=True), y)
            vals.append(l2)
        fd = (vals[0] - vals[1]) / (2 * eps)
        assert abs(analytic - fd) / max(abs(fd), 1e-8) <= 1e-5

    def test_input_gradient_blends_branches(self):
        rng = np.random.default_rng(7)
        op = make_mixed(rng=rng)
        op.alpha.data = np.asarray(0.3)
        x = rng.standard_normal((1, 128, 5, 5))
        gout = rng.standard_normal(op.forward(x).shape)
        gx = op.backward(gout)
        op.conv_branch.forward(x)
        gc = op.conv_branch.backward(gout)
        op.tt_branch.forward(x)
        gt = op.tt_branch.backward(gout)
        assert np.abs(gx - (0.3 * gc + 0.7 * gt)).max() <= 1e-12

    def test_alpha_excluded_from_weight_decay(self):
        op = make_mixed()
        assert op.alpha.weight_decay is False
        assert op.alpha.clamp01 is True

    def test_cost_walk_counts_both_branches(self):
        op = make_mixed()
        macs, params = nn.model_cost(nn.Sequential(op), 8, 8)
        mc, pc = nn.model_cost(nn.Sequential(op.conv_branch), 8, 8)
        mt, pt = nn.model_cost(op.tt_branch, 8, 8)
        assert macs == mc + mt
        assert params == pc + pt + 1  # + alpha itself


class TestBuildBranch:
    def test_random_init_requires_rng(self):
        conv = nn.Conv2d(128, 128, 3, padding=1, dtype=np.float64)
        ranks = select_ranks(ConvSpec(128, 128, 3, padding=1))
        with pytest.raises(ValueError, match="rng"):
            yard.build_tt_branch(conv, ranks, from_decomposition=False)
        branch = yard.build_tt_branch(conv, ranks, rng=np.random.default_rng(0),
                                      from_decomposition=False)
        assert len(branch.layers) == 3

    def test_bias_lands_on_last_stage(self):
        rng = np.random.default_rng(8)
        conv = nn.Conv2d(128, 128, 3, padding=1, bias=True, rng=rng,
                         dtype=np.float64)
        conv.bias.data[...] = rng.standard_normal(128)
        ranks = select_ranks(ConvSpec(128, 128, 3, padding=1))
        branch = yard.build_tt_branch(conv, ranks)
        assert branch.layers[0].bias is None
        assert np.allclose(branch.layers[2].bias.data, conv.bias.data)

    def test_stride_on_middle_stage(self):
        conv = nn.Conv2d(128, 256, 3, stride=2, padding=1, dtype=np.float64)
        ranks = select_ranks(ConvSpec(128, 256, 3, stride=2, padding=1))
        branch = yard.build_tt_branch(conv, ranks)
        assert branch.layers[0].stride == 1
        assert branch.layers[1].stride == 2
        assert branch.layers[1].shared_kernel and branch.layers[1].groups == 16


class TestWrapModel:
    def test_toy_model_has_six_eligible(self):
        model = build_toy_model(np.random.default_rng(0))
        mixed = yard.wrap_model(model)
        assert len(mixed) == 6
        assert [op.layer_id for op in mixed] == list(range(6))
        assert all(float(op.alpha.data) == 0.5 for op in mixed)

    def test_forward_still_runs_after_wrap(self):
        model = build_toy_model(np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((2, 3, 16, 16)) \
            .astype(np.float32)
        before = model.forward(x)
        yard.wrap_model(model)
        after = model.forward(x)
        assert after.shape == before.shape == (2, 4)

    def test_wrap_twice_rejected(self):
        model = build_toy_model(np.random.default_rng(3))
        yard.wrap_model(model)
        with pytest.raises(ValueError, match="already wrapped"):
            yard.wrap_model(model)

    def test_no_eligible_layer_rejected(self):
        rng = np.random.default_rng(4)
        model = nn.Sequential(nn.Conv2d(3, 16, 3, padding=1, rng=rng),
                              nn.GlobalAvgPool(), nn.Linear(16, 2, rng=rng))
        with pytest.raises(ValueError, match="no decomposable"):
            yard.wrap_model(model)


class TestIterationLogic:
    """Decision logic exercised with lr 0 so the alphas stay as planted."""

    def frozen_cfg(self, seed=0):
        train = nn.TrainConfig(batch_size=16, epochs=1, base_lr=0.0, seed=seed,
                               schedule="constant", warmup_epochs=0)
        return yard.YardConfig(m_epochs=1, iterations=1, fine_tune_epochs=1,
                               train=train)

    def planted(self, alphas, seed=11):
        model, train, test = small_yard_setup(seed, n_train=16, n_test=16)
        mixed = yard.wrap_model(model)
        for op, a in zip(mixed, alphas):
            op.alpha.data = np.asarray(a, dtype=op.alpha.data.dtype)
        return model, mixed, train, test

    def test_argmin_below_half_replaced(self):
        model, mixed, train, test = self.planted([0.9, 0.4, 0.6, 0.3, 0.7, 0.8])
        rec = yard.yard_iteration(model, mixed, train, test, self.frozen_cfg(), 0)
        assert rec.argmin_layer == 3 and rec.replaced
        assert not yard._contains(model, mixed[3])
        assert yard._contains(model, mixed[1])

    def test_no_replacement_when_all_at_least_half(self):
        model, mixed, train, test = self.planted([0.9, 0.5, 0.6, 0.5, 0.7, 0.8])
        rec = yard.yard_iteration(model, mixed, train, test, self.frozen_cfg(), 0)
        assert not rec.replaced
        assert all(yard._contains(model, op) for op in mixed)

    def test_tie_breaks_to_smaller_layer_id(self):
        model, mixed, train, test = self.planted([0.6, 0.3, 0.3, 0.6, 0.6, 0.6])
        rec = yard.yard_iteration(model, mixed, train, test, self.frozen_cfg(), 0)
        assert rec.argmin_layer == 1

    def test_record_snapshots_all_alphas(self):
        alphas = [0.6, 0.3, 0.35, 0.61, 0.62, 0.63]
        model, mixed, train, test = self.planted(alphas)
        rec = yard.yard_iteration(model, mixed, train, test, self.frozen_cfg(), 0)
        assert rec.alphas == {i: pytest.approx(a) for i, a in enumerate(alphas)}

    def test_replaced_layer_leaves_pool(self):
        model, mixed, train, test = self.planted([0.6, 0.1, 0.2, 0.6, 0.6, 0.6])
        cfg = self.frozen_cfg()
        r0 = yard.yard_iteration(model, mixed, train, test, cfg, 0)
        r1 = yard.yard_iteration(model, mixed, train, test, cfg, 1)
        assert r0.argmin_layer == 1 and r1.argmin_layer == 2
        assert 1 not in r1.alphas


class TestFinalize:
    def test_collapses_to_conv_branch_verbatim(self):
        model, mixed, train, test = small_yard_setup(21, 16, 16)[0], None, None, None
        model = build_toy_model(np.random.default_rng(21))
        mixed = yard.wrap_model(model)
        weights = [op.conv_branch.weight.data.copy() for op in mixed]
        yard.finalize(model, mixed)
        convs = [c for c in yard._iter_convs(model)]
        assert not any(True for _ in yard._iter_mixed(model))
        for op, w in zip(mixed, weights):
            assert any(np.array_equal(c.weight.data, w) for c in convs)

    def test_idempotent(self):
        model = build_toy_model(np.random.default_rng(22))
        mixed = yard.wrap_model(model)
        yard.finalize(model, mixed)
        yard.finalize(model, mixed)  # second call is a no-op


class TestRunYard:
    def test_k_exceeding_layers_rejected(self):
        model, train, test = small_yard_setup(31, 16, 16)
        cfg = yard.YardConfig(m_epochs=1, iterations=7, fine_tune_epochs=1,
                              train=nn.TrainConfig(batch_size=16, seed=0))
        with pytest.raises(ValueError, match="exceeds"):
            yard.run_yard(model, train, test, cfg, (16, 16))

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            yard.YardConfig(m_epochs=0)
        with pytest.raises(ValueError):
            yard.YardConfig(iterations=0)

    def test_small_run_properties(self):
        model, train, test = small_yard_setup(32, 64, 32)
        cfg = yard.YardConfig(m_epochs=1, iterations=2, fine_tune_epochs=2,
                              train=nn.TrainConfig(batch_size=32, seed=3))
        model, report, history = yard.run_yard(model, train, test, cfg, (16, 16))
        assert len(report.records) == 2
        assert not any(True for _ in yard._iter_mixed(model))
        assert set(report.assignment) == set(range(6))
        seq = report.replacement_sequence()
        assert len(seq) == len(set(seq)) <= 2
        for rec in report.records:
            if rec.replaced:
                assert rec.argmin_alpha < 0.5
        if seq:
            assert report.final_params < report.baseline_params
            assert report.final_macs < report.baseline_macs
        else:
            assert report.final_params == report.baseline_params
        assert len(history) == 2 and np.isfinite(history[-1]["loss"])

    def test_same_seed_reproduces_sequence(self):
        seqs = []
        for _ in range(2):
            model, train, test = small_yard_setup(33, 64, 32)
            cfg = yard.YardConfig(m_epochs=1, iterations=2, fine_tune_epochs=1,
                                  train=nn.TrainConfig(batch_size=32, seed=5))
            _, report, _ = yard.run_yard(model, train, test, cfg, (16, 16))
            seqs.append((report.replacement_sequence(),
                         [r.argmin_alpha for r in report.records]))
        assert seqs[0] == seqs[1]

    def test_report_serialization(self):
        import json
        model, train, test = small_yard_setup(34, 32, 16)
        cfg = yard.YardConfig(m_epochs=1, iterations=1, fine_tune_epochs=1,
                              train=nn.TrainConfig(batch_size=16, seed=7))
        _, report, _ = yard.run_yard(model, train, test, cfg, (16, 16))
        lines = report.to_csv().strip().split("\n")
        assert lines[0] == "iteration,layer_id,alpha,replaced"
        assert len(lines) == 2
        summary = json.loads(report.summary_json())
        assert set(summary) == {"assignment", "baseline", "final", "replacements"}
        assert summary["baseline"]["params"] == report.baseline_params
