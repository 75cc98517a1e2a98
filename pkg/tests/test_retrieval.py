import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabvpr.aggregation import DimensionMismatchError
from collabvpr.retrieval import (
    INDOOR_THRESHOLD_M,
    OUTDOOR_THRESHOLD_M,
    DuplicateIdError,
    RankedEntry,
    RetrievalResult,
    build_database,
    evaluate,
    mean_report,
    query_reordering,
    query_topk,
)


def brute_force(descriptors, q):
    """Sort (squared distance, insertion index) pairs in pure Python."""
    pairs = []
    for i, row in enumerate(descriptors):
        pairs.append((sum((float(a) - float(b)) ** 2 for a, b in zip(row, q)), i))
    return [i for _, i in sorted(pairs)]


def result_at(*poses):
    return RetrievalResult(tuple(RankedEntry(i, 0.0, p) for i, p in enumerate(poses)))


AB = build_database([("A", (0, 0), [1.0, 0.0]), ("B", (1, 0), [0.0, 1.0])])


class TestBuild:
    def test_size_and_order(self):
        db = build_database([(3, (0, 0), [1, 0]), (1, (1, 1), [0, 1]), (2, (2, 2), [1, 1])])
        assert len(db) == 3 and db.ids == (3, 1, 2)

    def test_duplicate_id(self):
        with pytest.raises(DuplicateIdError):
            build_database([(1, (0, 0), [1, 0]), (1, (1, 1), [0, 1])])

    def test_empty(self):
        with pytest.raises(ValueError):
            build_database([])

    def test_mixed_dimensions(self):
        with pytest.raises(DimensionMismatchError):
            build_database([(1, (0, 0), [1, 0]), (2, (1, 1), [0, 1, 0])])

    def test_immutable(self):
        with pytest.raises(AttributeError):
            AB._ids = ("x",)
        with pytest.raises(ValueError):
            AB.descriptors[0, 0] = 5.0


class TestQuery:
    def test_exact_match(self):
        assert query_topk(AB, [1.0, 0.0], 1).ids == ["A"]

    def test_dot_product_ordering(self):
        res = query_topk(AB, [0.6, 0.8], 2)
        assert res.ids == ["B", "A"]
        assert [r.score for r in res.ranked] == pytest.approx([0.8, 0.6], abs=1e-15)

    def test_truncation(self):
        assert query_topk(AB, [0.6, 0.8], 10).ids == ["B", "A"]

    def test_ties_follow_insertion_order(self):
        db = build_database([(9, (0, 0), [0.0, 1.0]), (4, (0, 0), [1.0, 0.0]), (7, (0, 0), [0.0, 1.0])])
        assert query_topk(db, [0.0, 1.0], 3).ids == [9, 7, 4]
        assert query_topk(db, np.ones(2) / np.sqrt(2), 3).ids == [9, 4, 7]

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            query_topk(AB, [1.0, 0.0, 0.0], 1)

    def test_k_top_positive(self):
        with pytest.raises(ValueError):
            query_topk(AB, [1.0, 0.0], 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            n, d = int(rng.integers(1, 30)), int(rng.integers(2, 8))
            desc = rng.normal(size=(n, d))
            desc /= np.linalg.norm(desc, axis=1, keepdims=True)
            if rng.random() < 0.2:
                desc[rng.integers(n)] = desc[0]  # inject exact ties
            q = rng.normal(size=d)
            q /= np.linalg.norm(q)
            db = build_database((i, (0, 0), desc[i]) for i in range(n))
            k = int(rng.integers(1, n + 3))
            assert query_topk(db, q, k).ids == brute_force(desc, q)[:k]

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), transform=st.sampled_from([np.exp, lambda s: s**3, lambda s: 7 * s - 2]))
    def test_ranking_invariant_under_monotone_transform(self, seed, transform):
        rng = np.random.default_rng(seed)
        desc = rng.normal(size=(12, 4))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        q = desc[0] + 0.3 * rng.normal(size=4)
        q /= np.linalg.norm(q)
        db = build_database((i, (0, 0), desc[i]) for i in range(12))
        scores = np.array([r.score for r in query_topk(db, q, 12).ranked])
        ids = query_topk(db, q, 12).ids
        assert np.all(np.diff(scores) <= 0)
        t = transform(scores)
        assert [ids[i] for i in np.argsort(-t, kind="stable")] == ids


class TestReordering:
    def test_cumulative_score(self):
        db = build_database([("R1", (0, 0), [1.0, 0.0]), ("R2", (5, 0), [0.0, 1.0])])
        # per-agent dot scores: ego (0.9, 0.5), collaborator (0.2, 0.8); sums (1.1, 1.3)
        res = query_reordering(db, [[0.9, 0.5], [0.2, 0.8]], 2)
        assert res.ids == ["R2", "R1"]
        assert query_topk(db, [0.9, 0.5], 1).ids == ["R1"]

    def test_cumulative_scores_for_unit_agents(self):
        db = build_database([("R1", (0, 0), [1.0, 0.0]), ("R2", (5, 0), [0.0, 1.0])])
        a, b = np.array([0.6, 0.8]), np.array([0.28, 0.96])
        res = query_reordering(db, [a, b], 2)
        assert [r.score for r in res.ranked] == pytest.approx([1.76, 0.88], abs=1e-14)

    def test_single_agent_equals_topk(self):
        rng = np.random.default_rng(0)
        desc = rng.normal(size=(20, 5))
        db = build_database((i, (i, 0), desc[i]) for i in range(20))
        for _ in range(50):
            q = rng.normal(size=5)
            assert query_reordering(db, [q], 7) == query_topk(db, q, 7)

    def test_duplicate_agents_same_ranking(self):
        rng = np.random.default_rng(1)
        desc = rng.normal(size=(20, 5))
        db = build_database((i, (i, 0), desc[i]) for i in range(20))
        q = rng.normal(size=5)
        assert query_reordering(db, [q, q], 20).ids == query_topk(db, q, 20).ids

    def test_empty_group(self):
        with pytest.raises(ValueError):
            query_reordering(AB, [], 1)


class TestEvaluate:
    def test_outdoor_threshold(self):
        rep = evaluate(AB, [((0, 0), result_at((5, 0)))], OUTDOOR_THRESHOLD_M, ks=(1,))
        assert rep.recall_at[1] == 1.0 and rep.error_at[1] == 0.0

    def test_indoor_threshold(self):
        rep = evaluate(AB, [((0, 0), result_at((5, 0)))], INDOOR_THRESHOLD_M, ks=(1,))
        assert rep.recall_at[1] == 0.0 and rep.error_at[1] == 1.0

    def test_counts(self):
        far, near = (100, 0), (1, 0)
        queries = [
            ((0, 0), result_at(near, far, far, far, far)),
            ((0, 0), result_at(far, far, near, far, far)),
        ]
        rep = evaluate(AB, queries, 20.0, ks=(1, 5))
        assert rep.recall_at == {1: 0.5, 5: 1.0}
        assert rep.error_at[5] == 0.0
        assert rep.correct_at == {1: 1, 5: 2}

    def test_threshold_is_strict(self):
        rep = evaluate(AB, [((0, 0), result_at((20, 0)))], 20.0, ks=(1,))
        assert rep.recall_at[1] == 0.0

    def test_empty_queries(self):
        with pytest.raises(ValueError):
            evaluate(AB, [], 20.0)

    def test_short_result_rejected(self):
        db = build_database((i, (i, 0), [float(i), 1.0]) for i in range(12))
        with pytest.raises(ValueError):
            evaluate(db, [((0, 0), result_at((0, 0)))], 20.0, ks=(1, 5))

    def test_full_ranking_of_small_db_accepted(self):
        rep = evaluate(AB, [((0, 0), result_at((50, 0), (1, 0)))], 20.0)
        assert rep.recall_at == {1: 0.0, 5: 1.0, 10: 1.0}

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_and_complementary(self, seed):
        rng = np.random.default_rng(seed)
        n = 15
        poses = rng.uniform(0, 100, size=(n, 2))
        desc = rng.normal(size=(n, 3))
        db = build_database((i, poses[i], desc[i]) for i in range(n))
        queries = [(rng.uniform(0, 100, size=2), query_topk(db, rng.normal(size=3), 10)) for _ in range(8)]
        rep = evaluate(db, queries, 20.0)
        assert rep.recall_at[1] <= rep.recall_at[5] <= rep.recall_at[10]
        for k in (1, 5, 10):
            assert rep.error_at[k] == 1.0 - rep.recall_at[k]

    def test_mean_report(self):
        r1 = evaluate(AB, [((0, 0), result_at((1, 0), (1, 0)))], 20.0, ks=(1,))
        r2 = evaluate(AB, [((0, 0), result_at((90, 0), (90, 0)))], 20.0, ks=(1,))
        assert mean_report([r1, r2]) == {1: 0.5}
