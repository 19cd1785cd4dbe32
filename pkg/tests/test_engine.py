"""Kernel-vs-oracle equivalence, work proportionality, and plan selection."""

import numpy as np
import pytest

from tinycsi import channel as ch
from tinycsi import compress as C
from tinycsi import engine as E
from tinycsi import model as M
from tinycsi.errors import ShapeError
from tinycsi.weights import Clustered, DenseF32, QuantizedI8, SparseBitmap, make_sparse


def random_sparse_layer(rng, n, m, sparsity):
    w = rng.normal(size=(n, m)).astype(np.float32)
    mask = rng.uniform(size=(n, m)) >= sparsity
    return M.DenseLayer(make_sparse(w * mask, mask), rng.normal(size=m).astype(np.float32))


def run_step(layer, x, force_dense=False):
    counters = E.RunCounters()
    step = E._compile_dense(layer, force_dense)
    E.warm_up_kernels()
    return E.run_dense_step(step, x, counters), counters


class TestSparseKernel:
    def test_all_zero_layer_outputs_bias(self):
        rng = np.random.default_rng(0)
        layer = random_sparse_layer(rng, 12, 6, sparsity=1.1)  # mask everything
        x = rng.normal(size=(3, 12)).astype(np.float32)
        out, counters = run_step(layer, x)
        for row in out:
            np.testing.assert_allclose(row, layer.bias, atol=1e-7)
        assert counters.macs == 0

    def test_matches_densified_oracle_100_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n, m = rng.integers(4, 40), rng.integers(3, 30)
            layer = random_sparse_layer(rng, int(n), int(m), 0.5)
            x = rng.uniform(-1, 1, (2, int(n))).astype(np.float32)
            out, _ = run_step(layer, x)
            oracle = x.astype(np.float64) @ layer.store.to_dense().astype(np.float64)
            oracle = oracle + layer.bias
            np.testing.assert_allclose(out, oracle, atol=1e-6)

    def test_mac_count_is_nnz_times_batch(self):
        rng = np.random.default_rng(2)
        layer = random_sparse_layer(rng, 64, 32, 0.5)
        x = rng.normal(size=(5, 64)).astype(np.float32)
        _, counters = run_step(layer, x)
        assert counters.macs == 5 * layer.store.nnz

    def test_work_proportionality_exact(self):
        # at sparsity s the counter equals (1 - s) * dense count exactly
        rng = np.random.default_rng(3)
        w = rng.normal(size=(40, 50)).astype(np.float32)
        net_dense_macs = 40 * 50
        for s in (0.0, 0.3, 0.5, 0.9):
            n_zero = int(np.floor(w.size * s))
            order = C.prune_order(w)
            mask = np.ones(w.size, bool)
            mask[order[:n_zero]] = False
            layer = M.DenseLayer(make_sparse(w * mask.reshape(w.shape), mask.reshape(w.shape)),
                                 np.zeros(50, np.float32))
            _, counters = run_step(layer, np.ones((1, 40), np.float32))
            assert counters.macs == net_dense_macs - n_zero


class TestQuantKernel:
    def test_zero_input_outputs_bias(self):
        rng = np.random.default_rng(4)
        q, scale = C.quantize_tensor(rng.normal(size=(10, 7)).astype(np.float32))
        layer = M.DenseLayer(QuantizedI8(q, scale), rng.normal(size=7).astype(np.float32))
        out, _ = run_step(layer, np.zeros((2, 10), np.float32))
        for row in out:
            np.testing.assert_allclose(row, layer.bias, atol=1e-7)

    def test_error_within_analytic_bound_100_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n, m = int(rng.integers(8, 64)), int(rng.integers(4, 32))
            w = rng.normal(size=(n, m)).astype(np.float32)
            q, sw = C.quantize_tensor(w)
            layer = M.DenseLayer(QuantizedI8(q, sw), np.zeros(m, np.float32))
            x = rng.uniform(-2, 2, (1, n)).astype(np.float32)
            out, _ = run_step(layer, x)
            _, params = E.quantize_activations(x)
            sx = params.scale
            oracle = x.astype(np.float64) @ w.astype(np.float64)
            bound = (np.abs(x).max() * sw / 2 + np.abs(w).max() * sx / 2 + sw * sx / 4) * n
            assert np.abs(out - oracle).max() <= bound + 1e-9

    def test_deterministic_activation_quantization(self):
        rng = np.random.default_rng(6)
        q, scale = C.quantize_tensor(rng.normal(size=(16, 8)).astype(np.float32))
        layer = M.DenseLayer(QuantizedI8(q, scale), np.zeros(8, np.float32))
        x = rng.normal(size=(3, 16)).astype(np.float32)
        a, _ = run_step(layer, x)
        b, _ = run_step(layer, x)
        assert np.array_equal(a, b)

    def test_constant_activation_represented_exactly(self):
        # degenerate range: output equals bias plus the constant term exactly
        rng = np.random.default_rng(7)
        q, scale = C.quantize_tensor(rng.normal(size=(6, 4)).astype(np.float32))
        layer = M.DenseLayer(QuantizedI8(q, scale), rng.normal(size=4).astype(np.float32))
        c = 0.73
        x = np.full((1, 6), c, np.float32)
        out, _ = run_step(layer, x)
        w = layer.store.to_dense().astype(np.float64)
        expect = np.float32(c) * w.sum(axis=0) + layer.bias
        np.testing.assert_allclose(out[0], expect, rtol=1e-5)

    def test_zero_point_fits_int8_for_positive_ranges(self):
        x = np.random.default_rng(8).uniform(0.2, 0.9, (4, 16)).astype(np.float32)
        q, params = E.quantize_activations(x)
        assert -128 <= params.zero_point <= 127
        recon = params.scale * (q.astype(np.float64) - params.zero_point)
        assert np.abs(recon - x).max() <= params.scale / 2 + 1e-9


class TestSparseQuantKernel:
    def test_bit_exact_vs_densified_quant_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n, m = int(rng.integers(8, 48)), int(rng.integers(4, 24))
            layer = random_sparse_layer(rng, n, m, 0.5)
            vals = layer.store.values
            q, scale = C.quantize_tensor(vals)
            layer.store = SparseBitmap(layer.store.shape, layer.store.bitmap, q, scale)
            x = rng.uniform(-1, 1, (2, n)).astype(np.float32)
            sparse_out, _ = run_step(layer, x)
            dense_out, _ = run_step(layer, x, force_dense=True)
            assert np.array_equal(sparse_out, dense_out)

    def test_all_zero_layer_bias_only(self):
        bitmap = np.zeros(2, np.uint8)
        store = SparseBitmap((4, 3), bitmap, np.zeros(0, np.int8), 1.0)
        layer = M.DenseLayer(store, np.array([1.0, 2.0, 3.0], np.float32))
        out, counters = run_step(layer, np.ones((1, 4), np.float32))
        np.testing.assert_allclose(out[0], layer.bias, atol=1e-7)
        assert counters.macs == 0

    def test_mac_count_equals_nnz(self):
        rng = np.random.default_rng(10)
        layer = random_sparse_layer(rng, 32, 16, 0.7)
        q, scale = C.quantize_tensor(layer.store.values)
        layer.store = SparseBitmap(layer.store.shape, layer.store.bitmap, q, scale)
        _, counters = run_step(layer, np.ones((1, 32), np.float32))
        assert counters.macs == layer.store.nnz


class TestClusteredKernel:
    def test_bitwise_equal_to_expanded_dense_kernel(self):
        rng = np.random.default_rng(11)
        w = rng.normal(size=(24, 12)).astype(np.float32)
        store = C.cluster_layer(w, C.ClusterConfig(k=8, seed=0))
        clustered = M.DenseLayer(store, rng.normal(size=12).astype(np.float32))
        expanded = M.DenseLayer(DenseF32(store.to_dense()), clustered.bias)
        x = rng.normal(size=(3, 24)).astype(np.float32)
        a, _ = run_step(clustered, x)
        b, _ = run_step(expanded, x)
        assert np.array_equal(a, b)

    def test_matches_f64_expansion_oracle(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(20, 10)).astype(np.float32)
        store = C.cluster_layer(w, C.ClusterConfig(k=4, seed=1))
        layer = M.DenseLayer(store, np.zeros(10, np.float32))
        x = rng.normal(size=(2, 20)).astype(np.float32)
        out, _ = run_step(layer, x)
        oracle = x.astype(np.float64) @ store.to_dense().astype(np.float64)
        np.testing.assert_allclose(out, oracle, atol=1e-6)

    def test_single_effective_centroid_rank_one(self):
        # both centroids equal: out_j = c * sum(x) + bias_j for every column
        idx = np.zeros(12, np.uint32)
        idx[0] = 1
        store = Clustered((4, 3), np.array([0.5, 0.5], np.float32), idx)
        layer = M.DenseLayer(store, np.zeros(3, np.float32))
        x = np.random.default_rng(13).normal(size=(2, 4)).astype(np.float32)
        out, _ = run_step(layer, x)
        expect = 0.5 * x.sum(axis=1, keepdims=True) * np.ones((1, 3))
        np.testing.assert_allclose(out, expect, atol=1e-6)

    def test_cluster_macs_equal_dense_macs(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(16, 8)).astype(np.float32)
        store = C.cluster_layer(w, C.ClusterConfig(k=4, seed=0))
        layer = M.DenseLayer(store, np.zeros(8, np.float32))
        _, counters = run_step(layer, np.ones((1, 16), np.float32))
        assert counters.macs == 16 * 8


@pytest.fixture(scope="module")
def trained_small():
    cfg = ch.ScenarioConfig("indoor", n_paths=4, n_tx=8, n_sub=32, n_delay=8,
                            delay_spread=1.0, delay_max=3.5, seed=2)
    data = ch.make_dataset(cfg, 96)
    net = M.build(M.ModelSpec(n_delay=8, n_tx=8, gamma=0.25), seed=1)
    M.train(net, data, epochs=2, batch_size=16, lr=1e-3, seed=0)
    return net, data


class TestPlanAndRun:
    def test_dense_model_selects_dense_kernels(self, trained_small):
        net, _ = trained_small
        p = E.plan(net)
        assert p.kernels == [E.KERNEL_DENSE, E.KERNEL_DENSE]

    def test_sparse_layer_selects_sparse_kernel(self, trained_small):
        net, _ = trained_small
        pruned = C.prune_magnitude(net, C.PruneConfig(0.5))
        p = E.plan(pruned)
        assert p.kernels == [E.KERNEL_SPARSE, E.KERNEL_SPARSE]

    def test_force_dense_on_pruned_model(self, trained_small):
        net, _ = trained_small
        pruned = C.prune_magnitude(net, C.PruneConfig(0.5))
        p = E.plan(pruned, force_dense=True)
        assert p.kernels == [E.KERNEL_DENSE, E.KERNEL_DENSE]

    def test_variant_kernel_map(self, trained_small):
        net, data = trained_small
        quantized = C.quantize(net, "i8")
        assert E.plan(quantized).kernels == [E.KERNEL_QUANT, E.KERNEL_QUANT]
        clustered = C.cluster_weights(net, C.ClusterConfig(k=4, seed=0))
        assert E.plan(clustered).kernels == [E.KERNEL_CLUSTER, E.KERNEL_CLUSTER]
        pq = C.prune_quantize(net, data, 0.5, "i8")
        assert E.plan(pq).kernels == [E.KERNEL_SPARSE_QUANT, E.KERNEL_SPARSE_QUANT]

    def test_forced_and_specialized_plans_agree(self, trained_small):
        net, data = trained_small
        pruned = C.prune_magnitude(net, C.PruneConfig(0.5))
        out_sparse, _ = E.run(E.plan(pruned), data.planes[:4])
        out_dense, _ = E.run(E.plan(pruned, force_dense=True), data.planes[:4])
        assert np.abs(out_sparse - out_dense).max() < 1e-5

    def test_engine_matches_reference_forward(self, trained_small):
        net, data = trained_small
        out, _ = E.run(E.plan(net), data.planes[:4])
        ref = M.reconstruct(net, data.planes[:4])
        assert np.abs(out - ref).max() < 1e-5

    def test_batch_equals_concatenated_singles(self, trained_small):
        net, data = trained_small
        p = E.plan(net)
        batch_out, _ = E.run(p, data.planes[:5])
        singles = np.stack([E.run(p, data.planes[i])[0] for i in range(5)])
        assert np.array_equal(batch_out, singles)

    def test_quantized_model_within_propagated_bound(self, trained_small):
        net, data = trained_small
        quantized = C.quantize(net, "i8")
        out_q, _ = E.run(E.plan(quantized), data.planes[:8])
        out_f, _ = E.run(E.plan(net), data.planes[:8])
        # loose envelope: per-layer bounds compose; reconstruction is in (0,1)
        assert np.abs(out_q - out_f).max() < 0.05

    def test_shape_mismatch_rejected(self, trained_small):
        net, _ = trained_small
        with pytest.raises(ShapeError):
            E.run(E.plan(net), np.zeros((1, 2, 4, 4), np.float32))

    def test_mac_counter_identical_across_runs(self, trained_small):
        net, data = trained_small
        p = E.plan(net)
        counts = {E.run(p, data.planes[:2])[1].macs for _ in range(5)}
        assert len(counts) == 1
