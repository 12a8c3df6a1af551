import numpy as np
import pytest

from mipserve import (
    ModelPair,
    SyntheticSpec,
    build_index,
    generate_synthetic,
    kmeans,
)


def make_model(
    num_users,
    num_items,
    factors,
    *,
    archetypes=8,
    spread=0.3,
    norms=(0.5, 2.5),
    seed=0,
) -> ModelPair:
    spec = SyntheticSpec(
        num_users=num_users,
        num_items=num_items,
        factors=factors,
        archetype_count=min(archetypes, num_users),
        angular_spread=spread,
        norm_low=norms[0],
        norm_high=norms[1],
        seed=seed,
    )
    return generate_synthetic(spec)


def build(model, clusters=4, seed=0, block=4096):
    cl = kmeans(model.users, min(clusters, model.num_users), seed=seed)
    return cl, build_index(model, cl, block)


def assert_same_topk(actual, expected, *, score_rtol=1e-9, score_atol=1e-9):
    """Same selected items in the same order; scores equal up to kernel rounding."""
    __tracebackhide__ = True
    assert np.array_equal(actual.item_ids, expected.item_ids), (
        f"user {expected.user_id}: ids {actual.item_ids} != {expected.item_ids}"
    )
    np.testing.assert_allclose(actual.scores, expected.scores, rtol=score_rtol, atol=score_atol)


def assert_results_match(actual_list, expected_list, **kw):
    __tracebackhide__ = True
    assert len(actual_list) == len(expected_list)
    for a, e in zip(actual_list, expected_list):
        assert_same_topk(a, e, **kw)


def assert_same_topk_canonical(model, actual, expected):
    """Like assert_same_topk, but indifferent to order among items whose
    vectors are bit-identical: duplicated rows score 1 ulp apart under
    different BLAS shapes, which can flip a mathematical tie either way."""
    __tracebackhide__ = True
    rep: dict[bytes, int] = {}
    for iid in range(model.num_items):
        rep.setdefault(model.items.values[iid].tobytes(), iid)
    canon = lambda ids: [rep[model.items.values[i].tobytes()] for i in ids]
    assert canon(actual.item_ids) == canon(expected.item_ids)
    np.testing.assert_allclose(actual.scores, expected.scores, rtol=1e-9, atol=1e-9)


@pytest.fixture(scope="session")
def medium_model():
    return make_model(200, 500, 8, archetypes=6, spread=0.5, seed=42)


@pytest.fixture(scope="session")
def medium_index(medium_model):
    cl, idx = build(medium_model, clusters=6, seed=1, block=64)
    return idx
