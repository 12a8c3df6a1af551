import math

import numpy as np
import pytest

import mipserve.optimizer as opt
from mipserve import (
    ThroughputSample,
    calibrate_h0,
    decide,
    estimate_walk_length,
    hardware_factor,
    pruning_fraction,
    query_batch,
    run_pipeline,
    topk_naive,
)

from conftest import assert_results_match, build, make_model


class TestHardwareFactor:
    def test_top1_is_base_factor(self):
        assert hardware_factor(1, 0.05) == pytest.approx(0.05, abs=1e-12)

    def test_top5(self):
        assert hardware_factor(5, 0.05) == pytest.approx(0.1161, abs=5e-4)

    def test_top50(self):
        assert hardware_factor(50, 0.05) == pytest.approx(0.2822, abs=5e-4)

    def test_monotone_in_k(self):
        vals = [hardware_factor(k, 0.05) for k in (1, 2, 5, 10, 50, 500)]
        assert vals == sorted(vals)

    def test_validation(self):
        with pytest.raises(ValueError):
            hardware_factor(0, 0.05)
        with pytest.raises(ValueError):
            hardware_factor(5, 0.0)


class TestDecide:
    def test_small_fraction_picks_index(self):
        # fraction 0.032 at K=1 with base factor 0.05
        assert decide(0.032 * 1024, 1024, 0, 1, 0.05) == opt.INDEX

    def test_large_fraction_picks_matmul(self):
        assert decide(0.375 * 1024, 1024, 0, 1, 0.05) == opt.MATMUL

    def test_boundary_goes_to_index(self):
        # power-of-two item count makes the fraction land exactly on h
        assert decide(0.05 * 1024, 1024, 0, 1, 0.05) == opt.INDEX

    def test_prefix_covering_everything_is_matmul(self):
        assert decide(1.0, 100, 100, 1, 0.9) == opt.MATMUL
        assert decide(1.0, 100, 4096, 1, 0.9) == opt.MATMUL

    def test_visits_below_prefix_clamp_to_zero(self):
        assert pruning_fraction(10.0, 1000, 100) == 0.0
        assert decide(10.0, 1000, 100, 1, 1e-9) == opt.INDEX

    def test_fraction_clamped(self):
        assert pruning_fraction(10_000.0, 1000, 100) == 1.0


class TestCalibration:
    def test_median_of_repeats(self, monkeypatch):
        samples = iter(
            [
                ThroughputSample(10.0, 1.0),
                ThroughputSample(10.0, 3.0),
                ThroughputSample(10.0, 2.0),
            ]
        )
        monkeypatch.setattr(opt.brute, "measure_throughput", lambda *a, **k: next(samples))
        with pytest.warns(UserWarning, match="unstable"):
            h0 = calibrate_h0(make_model(2, 2, 2, seed=0), repeats=3)
        assert h0 == pytest.approx(0.2)

    def test_self_ratio_is_one_for_identical_loops(self, monkeypatch):
        # when the blocked and unblocked loops are made literally identical,
        # the fitted factor is a self-ratio and must come out near 1
        import mipserve.brute as brute

        model = make_model(120, 300, 6, seed=1)
        monkeypatch.setattr(brute, "topk_matmul", lambda m, k, blocks=None, counters=None: brute._perpair_scan(m, k))
        ratios = [calibrate_h0(model, repeats=1) for _ in range(3)]
        assert 0.5 <= float(np.median(ratios)) <= 2.0

    def test_persists_to_config(self, tmp_path, monkeypatch):
        monkeypatch.setattr(
            opt.brute, "measure_throughput", lambda *a, **k: ThroughputSample(100.0, 5.0)
        )
        path = tmp_path / "calib.conf"
        h0 = calibrate_h0(make_model(2, 2, 2, seed=0), repeats=1, config_path=path)
        cfg = opt.load_config(path)
        assert cfg["h0"] == pytest.approx(h0) == pytest.approx(0.05)


class TestWalkEstimate:
    def test_census_equals_population_mean(self, medium_model, medium_index):
        est = estimate_walk_length(medium_index, medium_model, sample_fraction=1.0, k=5, seed=0)
        everyone = query_batch(medium_index, medium_model, None, 5, work_sharing=False)
        true_mean = np.mean([r.visited for r in everyone])
        assert est.mean_visited == pytest.approx(true_mean, rel=1e-12)
        assert est.sample_size == medium_model.num_users

    def test_identical_users_have_zero_width_interval(self):
        model = make_model(80, 60, 5, archetypes=1, spread=0.0, norms=(1.0, 1.0), seed=2)
        _, idx = build(model, clusters=1, seed=0)
        est = estimate_walk_length(idx, model, sample_fraction=0.5, k=3, seed=1)
        assert est.ci_low == est.ci_high == est.mean_visited

    def test_sample_floor_applies(self, medium_model, medium_index):
        est = estimate_walk_length(medium_index, medium_model, sample_fraction=0.001, k=2, seed=3)
        assert est.sample_size == 30
        assert len(est.sampled) == 30

    def test_fraction_validated(self, medium_model, medium_index):
        with pytest.raises(ValueError):
            estimate_walk_length(medium_index, medium_model, sample_fraction=0.0)
        with pytest.raises(ValueError):
            estimate_walk_length(medium_index, medium_model, sample_fraction=1.5)


class TestPipeline:
    def test_high_similarity_model_uses_index(self):
        model = make_model(900, 2000, 16, archetypes=6, spread=0.03, norms=(1.0, 1.1), seed=4)
        results, report = run_pipeline(model, k=5, block_size=256, seed=0, h0=0.02)
        assert report.decision == opt.INDEX
        assert_results_match(results, topk_naive(model, 5))

    def test_low_similarity_model_uses_matmul(self):
        model = make_model(600, 1500, 16, archetypes=600, spread=0.0, norms=(0.5, 5.0), seed=5)
        results, report = run_pipeline(model, k=5, block_size=256, seed=0, h0=0.02)
        assert report.decision == opt.MATMUL
        assert_results_match(results, topk_naive(model, 5))

    def test_forced_branches_agree(self):
        model = make_model(180, 420, 8, seed=6)
        res_i, rep_i = run_pipeline(model, k=7, num_clusters=6, block_size=64, seed=2, force="index")
        res_m, rep_m = run_pipeline(model, k=7, num_clusters=6, block_size=64, seed=2, force="matmul")
        assert rep_i.decision == opt.INDEX and rep_m.decision == opt.MATMUL
        assert_results_match(res_i, res_m)

    def test_report_contents(self):
        model = make_model(100, 200, 6, seed=7)
        _, report = run_pipeline(model, k=3, num_clusters=4, block_size=64, seed=1)
        assert report.num_users == 100 and report.num_items == 200 and report.k == 3
        assert report.cluster_seconds >= 0 and report.serve_seconds >= 0
        assert 0.0 <= report.overhead_fraction <= 1.0
        stages = dict(report.csv_rows())
        assert {"cluster", "build", "estimate", "serve", "total", "decision"} <= set(stages)

    def test_cluster_count_clamped_to_users(self):
        model = make_model(5, 40, 4, seed=8)
        _, report = run_pipeline(model, k=2, num_clusters=8, seed=0)
        assert report.num_clusters == 5

    def test_force_validated(self):
        model = make_model(10, 10, 3, seed=9)
        with pytest.raises(ValueError):
            run_pipeline(model, k=1, force="both")


class TestDecisionSoundness:
    def test_picks_faster_branch_on_separated_regimes(self):
        # regimes whose forced-branch serve times differ by >= 2x; after local
        # calibration the rule must pick the empirically faster branch in at
        # least 90% of kept trials
        h0 = calibrate_h0(make_model(700, 1500, 16, seed=20), repeats=1)
        trials = []
        for seed in range(4):
            trials.append(make_model(1200, 2500, 16, archetypes=8, spread=0.02, norms=(1.0, 1.1), seed=30 + seed))
            trials.append(make_model(1200, 6000, 16, archetypes=1200, spread=0.0, norms=(0.5, 5.0), seed=40 + seed))
        kept = correct = 0
        for model in trials:
            _, rep_i = run_pipeline(model, k=1, block_size=512, seed=1, h0=h0, force="index")
            _, rep_m = run_pipeline(model, k=1, block_size=512, seed=1, h0=h0, force="matmul")
            fast, slow = sorted([rep_i.serve_seconds, rep_m.serve_seconds])
            if slow < 2.0 * fast:
                continue
            kept += 1
            faster = opt.INDEX if rep_i.serve_seconds < rep_m.serve_seconds else opt.MATMUL
            picked = decide(
                rep_i.estimate.mean_visited, model.num_items, 512, 1, h0
            )
            correct += picked == faster
        assert kept >= 4, "expected clearly separated regimes"
        assert correct / kept >= 0.9


class TestConfig:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "cfg"
        opt.save_config(path, {"h0": 0.031, "clusters": 8, "note": "local"})
        cfg = opt.load_config(path)
        assert cfg == {"h0": 0.031, "clusters": 8, "note": "local"}

    def test_resolve_h0_prefers_explicit(self, tmp_path, monkeypatch):
        path = tmp_path / "cfg"
        opt.save_config(path, {"h0": 0.2})
        monkeypatch.setenv(opt.CONFIG_ENV, str(path))
        assert opt.resolve_h0(0.4) == 0.4
        assert opt.resolve_h0(None) == 0.2
        monkeypatch.delenv(opt.CONFIG_ENV)
        assert opt.resolve_h0(None) == opt.DEFAULT_H0
