import numpy as np
import pytest

from mipserve import (
    FactorMatrix,
    ModelPair,
    add_user,
    build_index,
    insert_item,
    item_bound,
    kmeans,
    load_index,
    query_batch,
    query_user,
    query_vector,
    save_index,
    topk_naive,
)
from mipserve.model_io import DimensionMismatchError

from conftest import assert_results_match, assert_same_topk, assert_same_topk_canonical, build, make_model


def ceilings_monotone(index) -> bool:
    return all(np.all(np.diff(index.bounds[c]) <= 0.0) for c in range(index.num_clusters))


def ceiling_margin(index, model) -> float:
    """Smallest bound-minus-scaled-score over all (user, item) pairs."""
    users = model.users.values
    unorms = np.linalg.norm(users, axis=1)
    safe = np.where(unorms > 0, unorms, 1.0)
    scaled = (users @ model.items.values.T) / safe[:, None]
    worst = np.inf
    for c, members in enumerate(index.clustering.members):
        if members.size == 0:
            continue
        by_id = np.empty(index.num_items)
        by_id[index.item_ids[c]] = index.bounds[c]
        worst = min(worst, float((by_id[None, :] - scaled[members]).min()))
    return worst


class TestItemBound:
    def test_slack_covers_angle(self):
        assert item_bound(2.0, 0.5, 1.0) == 2.0

    def test_partial_slack(self):
        expected = 2.0 * np.cos(np.pi / 3 - np.pi / 6)
        got = item_bound(2.0, np.pi / 3, np.pi / 6)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(np.sqrt(3.0), abs=1e-6)

    def test_zero_slack_is_exact_scaled_score(self):
        assert item_bound(1.0, np.pi / 2, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_angle_domain_checked(self):
        with pytest.raises(ValueError):
            item_bound(1.0, -0.1, 0.0)
        with pytest.raises(ValueError):
            item_bound(1.0, 0.5, 3.5)
        with pytest.raises(ValueError):
            item_bound(-1.0, 0.5, 0.5)


class TestBuildIndex:
    def test_covered_items_sort_by_norm(self):
        # both users within 45 degrees of the centroid direction; items right
        # on the centroid direction, so every ceiling hits the norm branch
        users = FactorMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        d = np.array([1.0, 1.0]) / np.sqrt(2.0)
        items = FactorMatrix(np.vstack([3.0 * d, 1.0 * d, 2.0 * d]))
        model = ModelPair(users, items)
        cl = kmeans(model.users, 1, seed=0)
        idx = build_index(model, cl)
        assert idx.item_ids[0].tolist() == [0, 2, 1]
        np.testing.assert_allclose(idx.bounds[0], [3.0, 2.0, 1.0], rtol=1e-12)

    def test_zero_slack_orders_by_scaled_centroid_score(self):
        model = make_model(1, 120, 6, seed=3)
        cl = kmeans(model.users, 1, seed=0)
        assert cl.max_angle[0] == pytest.approx(0.0, abs=1e-12)
        idx = build_index(model, cl)
        c = cl.centroids.values[0]
        truth = model.items.values @ (c / np.linalg.norm(c))
        order = np.lexsort((np.arange(120), -truth))
        assert np.array_equal(idx.item_ids[0], order)

    def test_ceilings_dominate_all_pairs(self):
        model = make_model(60, 150, 5, archetypes=60, spread=0.0, seed=9)
        _, idx = build(model, clusters=5, seed=4)
        assert ceiling_margin(idx, model) >= -1e-9

    def test_entry_count(self):
        model = make_model(40, 77, 4, seed=1)
        _, idx = build(model, clusters=6, seed=0)
        assert idx.entry_count == 6 * 77

    def test_deterministic(self):
        model = make_model(50, 90, 5, seed=2)
        cl = kmeans(model.users, 4, seed=7)
        a = build_index(model, cl)
        b = build_index(model, cl)
        assert np.array_equal(a.item_ids, b.item_ids)
        assert np.array_equal(a.bounds, b.bounds)

    def test_zero_norm_item_gets_zero_bound(self):
        users = FactorMatrix(np.array([[1.0, 0.0], [0.8, 0.3]]))
        items = FactorMatrix(np.array([[2.0, 1.0], [0.0, 0.0], [-1.0, 0.5]]))
        model = ModelPair(users, items)
        cl = kmeans(model.users, 1, seed=0)
        idx = build_index(model, cl)
        pos = np.flatnonzero(idx.item_ids[0] == 1)[0]
        assert idx.bounds[0][pos] == 0.0
        assert_results_match([query_user(idx, model, 0, 3)], [topk_naive(model, 3)[0]])


class TestQueryUser:
    def test_k_equal_to_item_count_is_full_sort(self, medium_model, medium_index):
        n = medium_model.num_items
        oracle = topk_naive(medium_model, n)
        for uid in (0, 17, 101):
            assert_same_topk(query_user(medium_index, medium_model, uid, n), oracle[uid])

    def test_k_larger_than_item_count_relaxation(self, medium_model, medium_index):
        res = query_user(medium_index, medium_model, 3, medium_model.num_items + 50)
        assert res.item_ids.size == medium_model.num_items

    def test_zero_slack_visits_exactly_k(self):
        # one user per cluster makes every user colinear with its centroid
        model = make_model(3, 400, 8, seed=10)
        cl = kmeans(model.users, 3, seed=0)
        idx = build_index(model, cl)
        for uid in range(3):
            for k in (1, 5, 20):
                assert query_user(idx, model, uid, k).visited == k

    def test_exact_against_oracle(self, medium_model, medium_index):
        for k in (1, 5, 10):
            oracle = topk_naive(medium_model, k)
            for uid in range(medium_model.num_users):
                assert_same_topk(query_user(medium_index, medium_model, uid, k), oracle[uid])

    def test_validation(self, medium_model, medium_index):
        with pytest.raises(ValueError):
            query_user(medium_index, medium_model, 0, 0)
        with pytest.raises(ValueError):
            query_user(medium_index, medium_model, 10_000, 1)

    def test_zero_norm_user_returns_lowest_ids(self):
        users = FactorMatrix(np.vstack([np.zeros(4), np.ones(4)]))
        items = FactorMatrix(np.random.default_rng(0).normal(size=(30, 4)))
        model = ModelPair(users, items)
        _, idx = build(model, clusters=2, seed=0)
        res = query_user(idx, model, 0, 5)
        assert res.item_ids.tolist() == [0, 1, 2, 3, 4]
        assert np.all(res.scores == 0.0)


class TestQueryBatch:
    def test_work_sharing_transparent(self, medium_model, medium_index):
        for k in (1, 7, 50):
            on = query_batch(medium_index, medium_model, None, k, work_sharing=True)
            off = query_batch(medium_index, medium_model, None, k, work_sharing=False)
            assert_results_match(on, off)

    def test_block_beyond_item_count_degenerates(self, medium_model):
        _, idx = build(medium_model, clusters=6, seed=1, block=10_000)
        oracle = topk_naive(medium_model, 5)
        on = query_batch(idx, medium_model, None, 5, work_sharing=True)
        assert_results_match(on, oracle)
        assert all(r.visited == medium_model.num_items for r in on)

    def test_default_block_on_10k_items(self):
        model = make_model(120, 10_000, 8, archetypes=10, spread=0.4, seed=12)
        _, idx = build(model, clusters=8, seed=3)  # block 4096 default
        oracle = topk_naive(model, 10)
        assert_results_match(query_batch(idx, model, None, 10, work_sharing=True), oracle)

    def test_tiny_block_forces_seed_completion(self, medium_model):
        _, idx = build(medium_model, clusters=6, seed=1, block=1)
        oracle = topk_naive(medium_model, 10)
        assert_results_match(query_batch(idx, medium_model, None, 10, work_sharing=True), oracle)

    def test_user_subset_and_order_preserved(self, medium_model, medium_index):
        subset = [40, 3, 199, 3]
        res = query_batch(medium_index, medium_model, subset, 4)
        assert [r.user_id for r in res] == subset

    def test_precomputed_results_reused(self, medium_model, medium_index):
        cached = query_user(medium_index, medium_model, 5, 4)
        res = query_batch(medium_index, medium_model, [5, 6], 4, precomputed={5: cached})
        assert res[0] is cached


class TestScaleInvariance:
    def test_positive_scaling_preserves_order(self, medium_model, medium_index):
        rng = np.random.default_rng(31)
        for _ in range(100):
            uid = int(rng.integers(0, medium_model.num_users))
            alpha = float(rng.uniform(1e-3, 10.0))
            base = query_user(medium_index, medium_model, uid, 10)
            scaled = query_vector(
                medium_index, medium_model, alpha * medium_model.users.values[uid], 10
            )
            assert np.array_equal(base.item_ids, scaled.item_ids)
            np.testing.assert_allclose(scaled.scores, alpha * base.scores, rtol=1e-9, atol=1e-12)


class TestQueryVector:
    def test_novel_vector_exact(self, medium_model, medium_index):
        rng = np.random.default_rng(8)
        ids = np.arange(medium_model.num_items)
        for _ in range(25):
            v = rng.normal(size=medium_model.factors) * rng.uniform(0.1, 4.0)
            res = query_vector(medium_index, medium_model, v, 7)
            scores = medium_model.items.values @ v
            expect = np.lexsort((ids, -scores))[:7]
            assert np.array_equal(res.item_ids, expect)

    def test_dimension_checked(self, medium_model, medium_index):
        with pytest.raises(DimensionMismatchError):
            query_vector(medium_index, medium_model, [1.0, 2.0], 3)


class TestInsertItem:
    def test_duplicate_sits_adjacent(self, medium_model, medium_index):
        dup = medium_model.items.values[33].copy()
        idx2, model2 = insert_item(medium_index, medium_model, dup)
        new_id = medium_model.num_items
        for c in range(idx2.num_clusters):
            where_orig = int(np.flatnonzero(idx2.item_ids[c] == 33)[0])
            where_dup = int(np.flatnonzero(idx2.item_ids[c] == new_id)[0])
            assert where_dup == where_orig + 1

    def test_monotone_after_insert(self, medium_model, medium_index):
        rng = np.random.default_rng(5)
        idx2, model2 = medium_index, medium_model
        for _ in range(5):
            idx2, model2 = insert_item(idx2, model2, rng.normal(size=medium_model.factors))
        assert ceilings_monotone(idx2)
        assert idx2.entry_count == idx2.num_clusters * model2.num_items

    def test_new_dominant_item_is_returned(self, medium_model, medium_index):
        u = medium_model.users.values[11]
        giant = 50.0 * u / np.linalg.norm(u)
        idx2, model2 = insert_item(medium_index, medium_model, giant)
        res = query_user(idx2, model2, 11, 1)
        assert res.item_ids[0] == medium_model.num_items
        assert_results_match([res], [topk_naive(model2, 1)[11]])

    def test_exact_after_insert(self, medium_model, medium_index):
        idx2, model2 = insert_item(medium_index, medium_model, np.full(medium_model.factors, 0.7))
        oracle = topk_naive(model2, 6)
        assert_results_match(query_batch(idx2, model2, None, 6, work_sharing=True), oracle)
        assert_results_match(query_batch(idx2, model2, None, 6, work_sharing=False), oracle)


class TestAddUser:
    def test_existing_member_fits(self, medium_model, medium_index):
        idx2, model2, fits = add_user(medium_index, medium_model, medium_model.users.values[0].copy())
        assert fits is True
        assert np.array_equal(idx2.bounds, medium_index.bounds)
        assert np.array_equal(idx2.item_ids, medium_index.item_ids)
        assert model2.num_users == medium_model.num_users + 1
        assert int(idx2.clustering.assignment[-1]) == int(medium_index.clustering.assignment[0])

    def test_outlier_raises_slack_and_stays_sound(self):
        model = make_model(40, 120, 6, archetypes=2, spread=0.01, seed=13)
        _, idx = build(model, clusters=2, seed=0)
        outlier = np.full(6, -3.0)
        idx2, model2, fits = add_user(idx, model, outlier)
        c = int(idx2.clustering.assignment[-1])
        assert fits is False
        assert idx2.clustering.max_angle[c] > idx.clustering.max_angle[c]
        assert ceilings_monotone(idx2)
        assert ceiling_margin(idx2, model2) >= -1e-9

    def test_new_user_query_matches_oracle(self, medium_model, medium_index):
        rng = np.random.default_rng(77)
        idx2, model2 = medium_index, medium_model
        for _ in range(4):
            idx2, model2, _ = add_user(idx2, model2, rng.normal(size=medium_model.factors) * 2.0)
        oracle = topk_naive(model2, 5)
        for uid in range(medium_model.num_users, model2.num_users):
            assert_same_topk(query_user(idx2, model2, uid, 5), oracle[uid])


class TestSidecar:
    def test_round_trip(self, tmp_path, medium_model, medium_index):
        path = tmp_path / "model.idx"
        save_index(medium_index, path)
        loaded = load_index(path)
        assert np.array_equal(loaded.item_ids, medium_index.item_ids)
        assert np.array_equal(loaded.bounds, medium_index.bounds)
        assert np.array_equal(loaded.item_norms, medium_index.item_norms)
        assert loaded.block_size == medium_index.block_size
        assert np.array_equal(loaded.clustering.assignment, medium_index.clustering.assignment)
        np.testing.assert_allclose(loaded.clustering.max_angle, medium_index.clustering.max_angle)
        oracle = topk_naive(medium_model, 3)
        for uid in (0, 50, 150):
            assert_same_topk(query_user(loaded, medium_model, uid, 3), oracle[uid])


class TestResultShape:
    def test_scores_sorted_with_id_tiebreak(self):
        # duplicated items force exact score ties
        base = np.random.default_rng(3).normal(size=(10, 4))
        items = FactorMatrix(np.vstack([base, base[2:5]]))
        users = FactorMatrix(np.random.default_rng(4).normal(size=(6, 4)))
        model = ModelPair(users, items)
        _, idx = build(model, clusters=2, seed=0)
        oracle = topk_naive(model, 8)
        for uid in range(6):
            res = query_user(idx, model, uid, 8)
            assert np.all(np.diff(res.scores) <= 0.0)
            ties = np.flatnonzero(np.diff(res.scores) == 0.0)
            for t in ties:
                assert res.item_ids[t] < res.item_ids[t + 1]
            assert_same_topk_canonical(model, res, oracle[uid])
