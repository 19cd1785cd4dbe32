"""Serialization round-trips, closed-form sizes, and the size ordering."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinycsi import channel as ch
from tinycsi import compress as C
from tinycsi import model as M
from tinycsi import model_io as io
from tinycsi.errors import FormatError
from tinycsi.weights import (
    Clustered,
    DenseF32,
    QuantizedI8,
    SparseBitmap,
    make_sparse,
    pack_uint_bits,
    unpack_uint_bits,
)


@pytest.fixture(scope="module")
def desk_model():
    return M.build(M.ModelSpec(n_delay=16, n_tx=16, gamma=0.25), seed=3)


@pytest.fixture(scope="module")
def tiny_dataset():
    cfg = ch.ScenarioConfig("indoor", n_paths=4, n_tx=16, n_sub=64, n_delay=16,
                            delay_spread=1.5, delay_max=7.0, seed=4)
    return ch.make_dataset(cfg, 48)


class TestBitPacking:
    @given(st.lists(st.integers(0, 31), min_size=0, max_size=200))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_5_bit(self, values):
        arr = np.asarray(values, np.uint32)
        back = unpack_uint_bits(pack_uint_bits(arr, 5), len(values), 5)
        np.testing.assert_array_equal(back, arr)

    @given(st.integers(1, 16), st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_packed_length_formula(self, bits, count):
        rng = np.random.default_rng(count)
        arr = rng.integers(0, 2**bits, count, dtype=np.uint32)
        packed = pack_uint_bits(arr, bits)
        assert len(packed) == (count * bits + 7) // 8


class TestPayloadFormulas:
    def test_dense_f32_payload(self):
        store = DenseF32(np.zeros((2048, 512), np.float32))
        assert io.store_payload_bytes(store) == 4_194_304

    def test_sparse_half_payload(self):
        # T = 2048*512 at 50% sparsity: 131072 bitmap + 2097152 value bytes
        total = 2048 * 512
        mask = np.zeros(total, bool)
        mask[: total // 2] = True
        store = make_sparse(np.ones((2048, 512), np.float32) * mask.reshape(2048, 512),
                            mask.reshape(2048, 512))
        got = io.store_payload_bytes(store)
        assert got == 131_072 + 2_097_152
        assert got / 4_194_304 == pytest.approx(0.53125)

    def test_clustered_k32_payload(self):
        total = 2048 * 512
        store = Clustered((2048, 512), np.linspace(-1, 1, 32).astype(np.float32),
                          np.zeros(total, np.uint32) + 1)
        got = io.store_payload_bytes(store)
        assert got == 128 + 655_360
        assert got / 4_194_304 == pytest.approx(0.15625, rel=1e-3)


class TestSaveLoad:
    def test_save_load_save_byte_identical(self, desk_model, tmp_path):
        p1, p2 = tmp_path / "a.csim", tmp_path / "b.csim"
        io.save(desk_model, p1)
        loaded = io.load(p1)
        io.save(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_model_evaluates_bitwise_identically(self, desk_model, tmp_path):
        path = tmp_path / "m.csim"
        io.save(desk_model, path)
        loaded = io.load(path)
        x = np.random.default_rng(0).uniform(0, 1, (3, 2, 16, 16)).astype(np.float32)
        assert np.array_equal(M.reconstruct(desk_model, x), M.reconstruct(loaded, x))

    def test_all_variants_round_trip(self, desk_model, tiny_dataset, tmp_path):
        variants = {
            "prune": C.prune_magnitude(desk_model, C.PruneConfig(0.5)),
            "quant": C.quantize(desk_model, "i8"),
            "f16": C.quantize(desk_model, "f16"),
            "cluster": C.cluster_weights(desk_model, C.ClusterConfig(k=32, seed=0)),
            "pq": C.prune_quantize(desk_model, tiny_dataset, 0.5, "i8"),
            "cq": C.cluster_quantize(desk_model, tiny_dataset,
                                     C.ClusterConfig(k=32, seed=0), "i8"),
        }
        for name, net in variants.items():
            path = tmp_path / f"{name}.csim"
            io.save(net, path)
            loaded = io.load(path)
            for a, b in zip(net.dense_layers(), loaded.dense_layers()):
                np.testing.assert_array_equal(a.store.to_dense(), b.store.to_dense())
            x = tiny_dataset.planes[:2]
            assert np.array_equal(M.reconstruct(net, x), M.reconstruct(loaded, x))

    def test_truncated_file_rejected(self, desk_model, tmp_path):
        path = tmp_path / "m.csim"
        io.save(desk_model, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(FormatError):
            io.load(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.csim"
        path.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(FormatError) as err:
            io.load(path)
        assert err.value.offset == 0

    def test_version_bump_rejected(self, desk_model, tmp_path):
        path = tmp_path / "m.csim"
        io.save(desk_model, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            io.load(path)

    def test_trailing_garbage_rejected(self, desk_model, tmp_path):
        path = tmp_path / "m.csim"
        io.save(desk_model, path)
        path.write_bytes(path.read_bytes() + b"\0\0")
        with pytest.raises(FormatError):
            io.load(path)


class TestSizeOf:
    def test_matches_file_size_for_randomized_models(self, desk_model, tiny_dataset, tmp_path):
        rng = np.random.default_rng(7)
        cases = [desk_model]
        for i in range(19):
            base = M.build(M.ModelSpec(n_delay=16, n_tx=16,
                                       gamma=float(rng.choice([0.25, 1 / 16, 1 / 64]))),
                           seed=int(rng.integers(100)))
            choice = i % 6
            if choice == 1:
                base = C.prune_magnitude(base, C.PruneConfig(float(rng.uniform(0.1, 0.9))))
            elif choice == 2:
                base = C.quantize(base, "i8")
            elif choice == 3:
                base = C.quantize(base, "f16")
            elif choice == 4:
                base = C.cluster_weights(base, C.ClusterConfig(k=int(rng.integers(2, 64)),
                                                               seed=0))
            elif choice == 5:
                base = C.prune_quantize(base, tiny_dataset,
                                        float(rng.uniform(0.1, 0.9)), "i8")
            cases.append(base)
        for idx, net in enumerate(cases):
            path = tmp_path / f"{idx}.csim"
            written = io.save(net, path)
            assert written == path.stat().st_size == io.size_of(net)

    def test_quantization_never_increases_size(self, desk_model):
        assert io.size_of(C.quantize(desk_model, "i8")) < io.size_of(desk_model)
        assert io.size_of(C.quantize(desk_model, "f16")) < io.size_of(desk_model)

    def test_combined_smaller_than_either_alone(self, desk_model, tiny_dataset):
        pq = io.size_of(C.prune_quantize(desk_model, tiny_dataset, 0.5, "i8"))
        prune_only = io.size_of(C.prune_magnitude(desk_model, C.PruneConfig(0.5)))
        quant_only = io.size_of(C.quantize(desk_model, "i8"))
        assert pq < min(prune_only, quant_only)

    def test_size_ordering_matches_expected(self, desk_model, tiny_dataset):
        # prune+quantize < cluster+quantize < cluster < quantize < prune < original
        cfg = C.ClusterConfig(k=32, seed=0)
        sizes = {
            "pq": io.size_of(C.prune_quantize(desk_model, tiny_dataset, 0.5, "i8")),
            "cq": io.size_of(C.cluster_quantize(desk_model, tiny_dataset, cfg, "i8")),
            "cluster": io.size_of(C.cluster_weights(desk_model, cfg)),
            "quant": io.size_of(C.quantize(desk_model, "i8")),
            "prune": io.size_of(C.prune_magnitude(desk_model, C.PruneConfig(0.5))),
            "orig": io.size_of(desk_model),
        }
        assert (sizes["pq"] < sizes["cq"] < sizes["cluster"]
                < sizes["quant"] < sizes["prune"] < sizes["orig"])
