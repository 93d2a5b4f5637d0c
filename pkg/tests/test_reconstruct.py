import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randprune.criteria import compute_scores, select_channels
from randprune.graph import ChannelConfig, config_from_units, mini_resnet, mini_vgg
from randprune.nn import Conv2d, Linear
from randprune.reconstruct import (FeaturePair, ReconSolution, collect_features, merge_solution,
                                   original_features, reconstruct_network, solve_ls)
from randprune.sampler import SamplerConfig, sample_config
from randprune.surgery import materialize_pruned

from conftest import calibrated


def ridge_oracle(fo, fp, eps):
    """(F_o F_p^T)(F_p F_p^T + eps I)^+ through a dense pseudo-inverse."""
    return (fo @ fp.T) @ np.linalg.pinv(fp @ fp.T + eps * np.eye(len(fp)))


def rank_deficient(rng, n, d, rank):
    return rng.normal(size=(n, rank)) @ rng.normal(size=(rank, d))


def pruned_pair(graph, seed, dtype=np.float64, gamma=0.5):
    net, x = calibrated(graph, dtype=dtype, n=48)
    cfg = sample_config(graph, SamplerConfig(gamma=gamma, granularity=2, seed=seed), 0)
    cfg = select_channels(compute_scores(net, "L1"), cfg, graph)
    return net, materialize_pruned(graph, net, cfg), cfg, x


class TestSolve:
    def test_identity_solution(self, rng):
        f = rng.normal(size=(6, 50))
        sol = solve_ls(FeaturePair(f, f.copy()))
        np.testing.assert_allclose(sol.x, np.eye(6), atol=1e-8)
        assert sol.residual_before == 0 and sol.residual_after < 1e-12

    def test_square_inverse_oracle(self, rng):
        fp = rng.normal(size=(5, 5)) + 3 * np.eye(5)
        fo = rng.normal(size=(5, 5))
        sol = solve_ls(FeaturePair(fo, fp), ridge=0.0)
        np.testing.assert_allclose(sol.x, fo @ np.linalg.inv(fp), atol=1e-6)
        assert sol.residual_after < 1e-12

    def test_rank_deficient_pinv_oracle(self, rng):
        fp = rank_deficient(rng, 8, 40, 5)
        fo = rng.normal(size=(8, 40))
        sol = solve_ls(FeaturePair(fo, fp), ridge=1e-4)
        assert not sol.failed
        np.testing.assert_allclose(sol.x, ridge_oracle(fo, fp, 1e-4), atol=1e-6)

    def test_default_ridge_scale(self, rng):
        fp = rng.normal(size=(4, 30))
        sol = solve_ls(FeaturePair(rng.normal(size=(4, 30)), fp))
        assert sol.ridge == pytest.approx(1e-6 * np.trace(fp @ fp.T) / 4)

    def test_singular_without_ridge_retries(self, rng):
        fp = np.zeros((3, 10))
        fp[0] = rng.normal(size=10)
        sol = solve_ls(FeaturePair(rng.normal(size=(3, 10)), fp), ridge=0.0)
        assert sol.ridge > 0 and np.isfinite(sol.x).all()
        assert sol.residual_after <= sol.residual_before + 1e-9

    def test_all_zero_features(self):
        sol = solve_ls(FeaturePair(np.ones((2, 5)), np.zeros((2, 5))), ridge=0.0)
        assert np.isfinite(sol.x).all() and sol.residual_after == sol.residual_before

    def test_solver_failure_flagged(self, rng, monkeypatch):
        calls = []

        def broken(*a, **k):
            calls.append(1)
            raise np.linalg.LinAlgError("not positive definite")

        monkeypatch.setattr("scipy.linalg.solve", broken)
        sol = solve_ls(FeaturePair(rng.normal(size=(3, 9)), rng.normal(size=(3, 9))), retries=3)
        assert sol.failed and np.array_equal(sol.x, np.eye(3))
        assert len(calls) == 4

    def test_non_finite_rejected(self):
        f = np.ones((2, 4))
        f[0, 0] = np.nan
        with pytest.raises(ValueError):
            solve_ls(FeaturePair(f, np.ones((2, 4))))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            FeaturePair(np.ones((2, 4)), np.ones((3, 4)))

    def test_underdetermined_warns(self, caplog):
        FeaturePair(np.ones((4, 2)), np.ones((4, 2)))
        assert "underdetermined" in caplog.text

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 40), st.integers(0, 2 ** 32 - 1), st.booleans())
    def test_residual_monotone(self, n, extra, seed, deficient):
        rng = np.random.default_rng(seed)
        d = n + extra
        fp = rank_deficient(rng, n, d, max(1, n // 2)) if deficient else rng.normal(size=(n, d))
        fo = fp + rng.normal(scale=0.5, size=(n, d))
        sol = solve_ls(FeaturePair(fo, fp))
        assert sol.residual_after <= sol.residual_before + 1e-9

    def test_perturbation_never_improves(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, d = rng.integers(2, 9), rng.integers(20, 80)
            fp, fo = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            sol = solve_ls(FeaturePair(fo, fp), ridge=0.0)
            dx = rng.normal(size=(n, n))
            dx *= 1e-3 / np.linalg.norm(dx)
            r = fo - (sol.x + dx) @ fp
            assert np.sum(r * r) >= sol.residual_after - 1e-9


class TestMerge:
    def conv(self, rng, dtype=np.float64):
        return Conv2d("c", rng.normal(size=(4, 3, 3, 3)).astype(dtype), rng.normal(size=4).astype(dtype),
                      padding=1)

    def test_identity_bit_identical(self, rng):
        layer = self.conv(rng, np.float32)
        w, b = layer.weight.value.copy(), layer.bias.value.copy()
        merge_solution(layer, ReconSolution(np.eye(4), 0, 0, 0))
        assert np.array_equal(layer.weight.value, w) and np.array_equal(layer.bias.value, b)

    def test_scaling(self, rng):
        layer = self.conv(rng)
        w, b = layer.weight.value.copy(), layer.bias.value.copy()
        merge_solution(layer, 2 * np.eye(4))
        np.testing.assert_array_equal(layer.weight.value, 2 * w)
        np.testing.assert_array_equal(layer.bias.value, 2 * b)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
    def test_forward_composition(self, dtype, tol):
        rng = np.random.default_rng(1)
        for _ in range(20):
            layer = self.conv(rng, dtype)
            x = rng.normal(size=(2, 3, 5, 5)).astype(dtype)
            y = layer.forward(x).astype(np.float64)
            xm = rng.normal(scale=0.5, size=(4, 4))
            merge_solution(layer, xm)
            np.testing.assert_allclose(layer.forward(x), np.einsum("oj,njhw->nohw", xm, y), atol=tol, rtol=0)

    def test_linear(self, rng):
        layer = Linear("l", rng.normal(size=(3, 5)), rng.normal(size=3))
        x = rng.normal(size=(4, 5))
        xm = rng.normal(size=(3, 3))
        y = layer.forward(x)
        merge_solution(layer, xm)
        np.testing.assert_allclose(layer.forward(x), y @ xm.T, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="output channels"):
            merge_solution(self.conv(rng), np.eye(3))


class TestCollect:
    def test_shapes(self):
        g = mini_vgg(widths=(6, "M", 12), input_shape=(3, 12, 12))
        net, x = calibrated(g, dtype=np.float64)
        idx = {"conv1": tuple(range(6)), "conv2": tuple(range(0, 12, 2))[:4] + (9, 11, 3, 5)}
        idx["conv2"] = tuple(sorted(set(idx["conv2"])))
        cfg = ChannelConfig({l: len(i) for l, i in idx.items()}, idx)
        pruned = materialize_pruned(g, net, cfg)
        pair = collect_features(net, pruned, x[:4], "conv2", idx["conv2"])
        assert pair.f_pruned.shape == pair.f_original.shape == (8, 144)

    def test_unpruned_exact(self, resnet_graph):
        net, x = calibrated(resnet_graph)
        copy = materialize_pruned(resnet_graph, net, ChannelConfig.full(resnet_graph, with_indices=True))
        pair = collect_features(net, copy, x[:8], "s2b1.conv1", range(32))
        np.testing.assert_array_equal(pair.f_original, pair.f_pruned)

    def test_rejects_non_conv(self, resnet_graph):
        net, x = calibrated(resnet_graph)
        with pytest.raises(ValueError, match="conv"):
            collect_features(net, net, x[:2], "s1b1.bn1", range(16))
        with pytest.raises(ValueError):
            collect_features(net, net, x[:2], "nope", range(16))

    def test_deterministic(self, resnet_graph):
        net, pruned, cfg, x = pruned_pair(resnet_graph, 0, np.float32)
        a = collect_features(net, pruned, x, "s1b1.conv1", cfg.keep_indices["s1b1.conv1"])
        b = collect_features(net, pruned, x, "s1b1.conv1", cfg.keep_indices["s1b1.conv1"])
        assert np.array_equal(a.f_pruned, b.f_pruned) and np.array_equal(a.f_original, b.f_original)


class TestReconstructNetwork:
    def test_identity_config(self, resnet_graph):
        net, x = calibrated(resnet_graph)
        full = ChannelConfig.full(resnet_graph, with_indices=True)
        copy = materialize_pruned(resnet_graph, net, full)
        _, report = reconstruct_network(net, copy, x, full, recalibrate=False)
        assert len(report) == len(resnet_graph.prunable)
        assert all(r["residual_before"] == 0 and r["residual_after"] == 0 for r in report)
        np.testing.assert_allclose(copy(x), net(x), atol=1e-6)

    def test_residuals_shrink(self, resnet_graph):
        for seed in range(3):
            net, pruned, cfg, x = pruned_pair(resnet_graph, seed)
            _, report = reconstruct_network(net, pruned, x, cfg)
            for r in report:
                assert r["residual_after"] <= r["residual_before"] + 1e-9
                assert not r["failed"]
            assert any(r["residual_after"] < r["residual_before"] for r in report)

    def test_matches_sequential_oracle(self):
        """Streaming sweep equals collect -> solve -> merge layer by layer with fresh forward passes."""
        g = mini_resnet(input_shape=(3, 8, 8), base_width=8)
        net, pruned, cfg, x = pruned_pair(g, 4)
        oracle = materialize_pruned(g, net, cfg)
        for layer in (s.id for s in g.layers):
            if layer in g.prunable:
                pair = collect_features(net, oracle, x, layer, cfg.keep_indices[layer])
                merge_solution(oracle.layers[layer], solve_ls(pair))
        reconstruct_network(net, pruned, x, cfg, recalibrate=False)
        for layer in g.prunable:
            np.testing.assert_allclose(pruned.layers[layer].weight.value, oracle.layers[layer].weight.value,
                                       atol=1e-8)

    def test_deterministic(self, resnet_graph):
        outs = []
        for _ in range(2):
            net, pruned, cfg, x = pruned_pair(resnet_graph, 9, np.float32)
            reconstruct_network(net, pruned, x, cfg)
            outs.append(pruned(x))
        np.testing.assert_array_equal(*outs)

    def test_cached_taps_equivalent(self, resnet_graph):
        net, a, cfg, x = pruned_pair(resnet_graph, 2, np.float32)
        b = materialize_pruned(resnet_graph, net, cfg)
        reconstruct_network(net, a, x, cfg)
        reconstruct_network(net, b, x, cfg, cached_original=original_features(net, x))
        np.testing.assert_array_equal(a(x), b(x))

    def test_shape_and_cost_unchanged(self, resnet_graph):
        net, pruned, cfg, x = pruned_pair(resnet_graph, 1, np.float32)
        shapes = {k: p.value.shape for k, p in pruned.named_parameters()}
        reconstruct_network(net, pruned, x, cfg)
        assert {k: p.value.shape for k, p in pruned.named_parameters()} == shapes


def test_units_config_helper(resnet_graph):
    cfg = config_from_units(resnet_graph, {u: 4 for u in resnet_graph.units})
    assert set(cfg.keep_count.values()) == {4}
