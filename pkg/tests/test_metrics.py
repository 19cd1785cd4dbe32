"""NMSE / cosine-similarity analytic cases and the timing protocol."""

import json

import numpy as np
import pytest

from tinycsi import channel as ch
from tinycsi import engine as E
from tinycsi import metrics as MX
from tinycsi import model as M
from tinycsi.errors import ConfigError, DataError, ShapeError


def random_batch(rng, s=4, rows=8, cols=6):
    return rng.normal(size=(s, rows, cols)) + 1j * rng.normal(size=(s, rows, cols))


class TestNmse:
    def test_perfect_reconstruction_hits_sentinel_floor(self):
        h = random_batch(np.random.default_rng(0))
        value, excluded = MX.nmse(h, h.copy())
        assert value == MX.NMSE_FLOOR_DB
        assert excluded == 0

    def test_zero_reconstruction_is_zero_db(self):
        h = random_batch(np.random.default_rng(1))
        value, _ = MX.nmse(h, np.zeros_like(h))
        assert value == pytest.approx(0.0, abs=1e-9)

    def test_one_percent_error_is_minus_twenty_db(self):
        h = random_batch(np.random.default_rng(2))
        value, _ = MX.nmse(h, h + 0.1 * h)
        assert value == pytest.approx(-20.0, abs=1e-9)

    def test_zero_norm_samples_excluded_with_count(self):
        h = random_batch(np.random.default_rng(3))
        h[1] = 0.0
        value, excluded = MX.nmse(h, h + 0.1 * h)
        assert excluded == 1
        assert value == pytest.approx(-20.0, abs=1e-9)

    def test_all_zero_originals_rejected(self):
        h = np.zeros((2, 4, 4), complex)
        with pytest.raises(DataError):
            MX.nmse(h, h)

    def test_invariant_under_unitary_domain_transform(self):
        rng = np.random.default_rng(4)
        h = random_batch(rng, s=6, rows=16, cols=8)
        rec = h + 0.05 * random_batch(rng, s=6, rows=16, cols=8)
        a, _ = MX.nmse(h, rec)
        b, _ = MX.nmse(ch.to_angular_delay(h), ch.to_angular_delay(rec))
        assert a == pytest.approx(b, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            MX.nmse(np.zeros((1, 2, 2), complex), np.zeros((1, 3, 2), complex))


class TestCosineSimilarity:
    def test_identity_reconstruction_is_one(self):
        h = random_batch(np.random.default_rng(5))
        rho, _ = MX.cosine_similarity(h, h.copy())
        assert rho == pytest.approx(1.0, abs=1e-12)

    def test_invariant_under_complex_scaling(self):
        rng = np.random.default_rng(6)
        h = random_batch(rng)
        rec = h + 0.2 * random_batch(rng)
        base, _ = MX.cosine_similarity(h, rec)
        for c in (2.0, -3.5, 1j, 0.3 - 0.8j):
            scaled, _ = MX.cosine_similarity(h, c * rec)
            assert scaled == pytest.approx(base, abs=1e-12)

    def test_per_row_scaling_invariance(self):
        rng = np.random.default_rng(7)
        h = random_batch(rng)
        rec = h + 0.2 * random_batch(rng)
        base, _ = MX.cosine_similarity(h, rec)
        row_scales = (rng.normal(size=(h.shape[0], h.shape[1], 1))
                      + 1j * rng.normal(size=(h.shape[0], h.shape[1], 1)))
        scaled, _ = MX.cosine_similarity(h, rec * row_scales)
        assert scaled == pytest.approx(base, abs=1e-9)

    def test_orthogonal_reconstruction_is_zero(self):
        h = np.zeros((1, 2, 2), complex)
        h[0, :, 0] = 1.0
        rec = np.zeros((1, 2, 2), complex)
        rec[0, :, 1] = 1.0
        rho, _ = MX.cosine_similarity(h, rec)
        assert rho == pytest.approx(0.0, abs=1e-12)

    def test_rho_in_unit_interval(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            h = random_batch(rng)
            rec = random_batch(rng)
            rho, _ = MX.cosine_similarity(h, rec)
            assert 0.0 <= rho <= 1.0

    def test_all_zero_vectors_rejected(self):
        with pytest.raises(DataError):
            MX.cosine_similarity(np.zeros((1, 2, 2), complex),
                                 np.zeros((1, 2, 2), complex))


@pytest.fixture(scope="module")
def small_plan():
    net = M.build(M.ModelSpec(n_delay=8, n_tx=8, gamma=0.25), seed=0)
    cfg = ch.ScenarioConfig("indoor", n_paths=3, n_tx=8, n_sub=32, n_delay=8,
                            delay_spread=1.0, delay_max=3.5, seed=5)
    data = ch.make_dataset(cfg, 32)
    return E.plan(net), data


class TestBenchInference:
    def test_rejects_too_few_runs(self, small_plan):
        plan, data = small_plan
        with pytest.raises(ConfigError):
            MX.bench_inference(plan, data.planes[0], warmup=1, runs=5)

    def test_report_fields_consistent(self, small_plan):
        plan, data = small_plan
        report = MX.bench_inference(plan, data.planes[0], warmup=3, runs=20)
        assert report.p5_us <= report.median_us <= report.p95_us
        assert report.measured_runs == 20
        assert report.macs > 0

    def test_mac_counter_stable_across_repeats(self, small_plan):
        plan, data = small_plan
        a = MX.bench_inference(plan, data.planes[0], warmup=2, runs=12)
        b = MX.bench_inference(plan, data.planes[0], warmup=2, runs=12)
        assert a.macs == b.macs

    def test_quality_evaluation_on_empty_dataset_rejected(self, small_plan):
        plan, data = small_plan
        empty = data.slice(0, 0)
        with pytest.raises(DataError):
            MX.evaluate_quality(plan, empty)


def make_report(name="m", gamma=0.25):
    timing = MX.TimingReport(warmup_runs=2, measured_runs=10, median_us=10.0,
                             p5_us=9.0, p95_us=12.0, mean_us=10.5, macs=1234)
    quality = MX.QualityReport(nmse_db=-10.5, rho=0.97, sample_count=16)
    return MX.BenchReport(model=name, gamma=gamma, technique="original",
                          size_bytes=1000, timing=timing, indoor=quality)


class TestEmitReport:
    def test_empty_list_writes_header_only(self, tmp_path):
        MX.emit_report([], tmp_path / "r.csv", tmp_path / "r.json")
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines == [",".join(MX.CSV_COLUMNS)]
        assert json.loads((tmp_path / "r.json").read_text()) == []

    def test_row_count_matches_reports(self, tmp_path):
        reports = [make_report(f"m{i}") for i in range(3)]
        MX.emit_report(reports, tmp_path / "r.csv", tmp_path / "r.json")
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert len(lines) == 4

    def test_json_round_trip_recovers_values(self, tmp_path):
        reports = [make_report()]
        MX.emit_report(reports, tmp_path / "r.csv", tmp_path / "r.json")
        rows = json.loads((tmp_path / "r.json").read_text())
        assert rows[0]["inference_us_median"] == 10.0
        assert rows[0]["indoor_nmse_db"] == -10.5
        assert rows[0]["macs"] == 1234

    def test_missing_environment_leaves_blank_cells(self, tmp_path):
        report = make_report()
        report.outdoor = None
        MX.emit_report([report], tmp_path / "r.csv", tmp_path / "r.json")
        rows = json.loads((tmp_path / "r.json").read_text())
        assert rows[0]["outdoor_nmse_db"] == ""
