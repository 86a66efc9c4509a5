import heapq
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshcomplete.completion import CompletionTrace, RigidTransform
from meshcomplete.evaluation import (RESULT_FIELDS, convergence_report, correspondence_quality_curve,
                                     geodesic_distances, nn_baseline, read_results_csv, score, write_results_csv)
from meshcomplete.mesh import Correspondence, icosphere, shape_radius
from meshcomplete.partiality import hyperplane_cut


def dijkstra_oracle(mesh, source):
    """Textbook heap Dijkstra over the edge graph."""
    adj = {i: [] for i in range(mesh.n_vertices)}
    for a, b in mesh.edges().tolist():
        w = math.dist(mesh.vertices[a], mesh.vertices[b])
        adj[a].append((b, w))
        adj[b].append((a, w))
    dist = [math.inf] * mesh.n_vertices
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, v = heapq.heappop(heap)
        if d > dist[v]:
            continue
        for u, w in adj[v]:
            if d + w < dist[u]:
                dist[u] = d + w
                heapq.heappush(heap, (dist[u], u))
    return dist


def trace(seen, unseen=None, refinements=(), rigid_steps=()):
    n = len(seen)
    unseen = [float("nan")] * n if unseen is None else list(unseen)
    return CompletionTrace(seen_error=list(seen), unseen_error=unseen, dissimilarity=list(seen),
                           z_hash=[""] * n, rotations=[np.eye(3)] * n, rigid_steps=list(rigid_steps),
                           refinements=list(refinements))


class TestScore:
    def test_identical(self, sphere):
        mask = np.arange(sphere.n_vertices) % 2 == 0
        s = score(sphere, sphere, mask)
        assert s.err_seen == s.err_unseen == s.err_total == 0.0 and s.vol_err_pct == 0.0

    def test_uniform_offset(self, sphere):
        delta = np.array([0.1, -0.2, 0.3])
        moved = sphere.with_vertices(sphere.vertices + delta)
        s = score(moved, sphere, np.arange(sphere.n_vertices) < 5)
        for v in (s.err_seen, s.err_unseen, s.err_total):
            assert v == pytest.approx(np.linalg.norm(delta), rel=1e-12)
        assert s.radius_pct["total"] == pytest.approx(100 * np.linalg.norm(delta) / shape_radius(sphere), rel=1e-12)

    def test_matches_loop_oracle(self, sphere, rng):
        moved = sphere.with_vertices(sphere.vertices + 0.05 * rng.normal(size=sphere.vertices.shape))
        mask = rng.random(sphere.n_vertices) < 0.4
        seen, unseen = [], []
        for i in range(sphere.n_vertices):
            d = math.dist(moved.vertices[i], sphere.vertices[i])
            (seen if mask[i] else unseen).append(d)
        s = score(moved, sphere, mask)
        assert s.err_seen == pytest.approx(sum(seen) / len(seen), rel=1e-12)
        assert s.err_unseen == pytest.approx(sum(unseen) / len(unseen), rel=1e-12)
        # the total is the count-weighted mean of the two regions
        assert s.err_total == pytest.approx((sum(seen) + sum(unseen)) / sphere.n_vertices, rel=1e-12)

    def test_all_seen_has_no_unseen_error(self, sphere):
        s = score(sphere, sphere, np.ones(sphere.n_vertices, dtype=bool))
        assert s.err_unseen is None and s.radius_pct["unseen"] is None

    def test_euclidean_terms_symmetric(self, sphere, rng):
        other = sphere.with_vertices(sphere.vertices * 1.1 + 0.01 * rng.normal(size=sphere.vertices.shape))
        mask = rng.random(sphere.n_vertices) < 0.5
        a, b = score(other, sphere, mask), score(sphere, other, mask)
        assert (a.err_seen, a.err_unseen, a.err_total) == pytest.approx((b.err_seen, b.err_unseen, b.err_total))
        assert a.vol_err_pct != pytest.approx(b.vol_err_pct)

    def test_volume_error_of_scaled_shape(self, sphere):
        s = score(sphere.with_vertices(2 * sphere.vertices), sphere, np.ones(sphere.n_vertices, dtype=bool))
        assert s.vol_err_pct == pytest.approx(700.0, rel=1e-12)

    def test_shape_mismatch(self, sphere, tube):
        with pytest.raises(ValueError):
            score(tube, sphere, np.ones(sphere.n_vertices, dtype=bool))


class TestNNBaseline:
    def test_member_query(self, small_family):
        train = small_family.train[:6]
        ps = hyperplane_cut(train[3], seed=0)
        res = nn_baseline(ps, train)
        assert res.index == 3 and res.distances[3] < 1e-12
        assert np.allclose(res.mesh.vertices, train[3].vertices, atol=1e-10)

    def test_moved_member_returned_in_partial_frame(self, small_family):
        train = small_family.train[:4]
        T = RigidTransform.from_dict({"R": np.eye(3)[[1, 2, 0]].tolist(), "t": [1.0, 2.0, 3.0]})
        moved = train[2].with_vertices(T.apply(train[2].vertices))
        res = nn_baseline(hyperplane_cut(moved, seed=1), train)
        assert res.index == 2
        assert np.allclose(res.mesh.vertices, moved.vertices, atol=1e-9)

    def test_single_shape(self, small_family):
        ps = hyperplane_cut(small_family.test[0], seed=0)
        assert nn_baseline(ps, small_family.train[:1]).index == 0

    def test_matches_two_loop_reference(self, small_family):
        from meshcomplete.completion import solve_rigid
        train = small_family.train[:8]
        ps = hyperplane_cut(small_family.test[0], seed=4)
        best, best_d = None, math.inf
        for k, shape in enumerate(train):
            src = shape.vertices[ps.ground_truth_corr.reference_index]
            dst = ps.points[ps.ground_truth_corr.partial_index]
            moved = solve_rigid(src, dst).apply(src)
            d = sum(math.dist(a, b) for a, b in zip(moved, dst)) / len(dst)
            if d < best_d:
                best, best_d = k, d
        res = nn_baseline(ps, train)
        assert res.index == best and res.distances[best] == pytest.approx(best_d, rel=1e-12)
        assert np.all(res.distances >= res.distances[res.index])

    def test_empty_training_set(self, small_family):
        with pytest.raises(ValueError):
            nn_baseline(hyperplane_cut(small_family.test[0], seed=0), [])


class TestQualityCurve:
    def test_geodesics_match_heap_dijkstra(self):
        mesh = icosphere(1)
        D = geodesic_distances(mesh, [0, 7])
        assert np.allclose(D[0], dijkstra_oracle(mesh, 0), atol=1e-12)
        assert np.allclose(D[1], dijkstra_oracle(mesh, 7), atol=1e-12)

    def test_ground_truth_is_perfect(self, sphere):
        gt = Correspondence.identity(np.arange(0, sphere.n_vertices, 3))
        assert np.all(correspondence_quality_curve(gt, gt, sphere, [0.0, 0.01, 0.5, 2.0]) == 1.0)

    def test_zero_threshold_counts_exact_matches(self, sphere, rng):
        ref = np.arange(20)
        gt = Correspondence.identity(ref)
        assigned = ref.copy()
        assigned[:5] = rng.permutation(assigned[:5])
        n_exact = int(np.sum(assigned == ref))
        corr = Correspondence(np.stack([np.arange(20), assigned], axis=1))
        assert correspondence_quality_curve(corr, gt, sphere, [0.0])[0] == pytest.approx(n_exact / 20)

    def test_scrambled_matches_all_pairs_oracle(self):
        mesh = icosphere(1)
        rng = np.random.default_rng(0)
        n = mesh.n_vertices
        gt = Correspondence.identity(np.arange(n))
        corr = Correspondence(np.stack([np.arange(n), rng.permutation(n)], axis=1))
        all_pairs = np.array([dijkstra_oracle(mesh, s) for s in range(n)])
        errors = all_pairs[corr.reference_index, np.arange(n)] / shape_radius(mesh)
        taus = np.linspace(0, 3, 13)
        want = [np.mean(errors <= t) for t in taus]
        assert np.allclose(correspondence_quality_curve(corr, gt, mesh, taus), want, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_and_bounded(self, seed):
        mesh = icosphere(1)
        r = np.random.default_rng(seed)
        k = int(r.integers(1, mesh.n_vertices))
        p = r.choice(mesh.n_vertices, size=k, replace=False)
        gt = Correspondence(np.stack([np.arange(k), p], axis=1))
        corr = Correspondence(np.stack([np.arange(k), r.choice(mesh.n_vertices, size=k, replace=False)], axis=1))
        curve = correspondence_quality_curve(corr, gt, mesh, np.linspace(0, 2, 21))
        assert np.all(np.diff(curve) >= 0) and np.all((curve >= 0) & (curve <= 1))


class TestConvergenceReport:
    def test_constant_trace(self):
        r = convergence_report([trace([0.5] * 10, [1.0] * 10)])
        assert np.all(r.mean_seen == 0.5) and np.all(r.mean_unseen == 1.0)
        assert r.drop_size == 0.0 and r.endpoint_improvement_fraction == 0.0

    def test_injected_drop_is_localized(self):
        seen = [1.0] * 30
        seen[17:] = [0.2] * 13
        r = convergence_report([trace(seen, refinements=[17]), trace(seen, refinements=[17])], window=5)
        assert r.drop_iteration == 17 and r.drop_size == pytest.approx(0.8)
        assert r.refinement_drop == pytest.approx(0.8)

    def test_endpoint_fraction_and_monotone_flag(self):
        a = trace([1, 1], [2.0, 1.0], rigid_steps=[(1, 1.0, 0.5)])
        b = trace([1, 1], [1.0, 3.0], rigid_steps=[(1, 1.0, 1.0 + 1e-12)])
        r = convergence_report([a, b])
        assert r.endpoint_improvement_fraction == 0.5 and r.rigid_monotone
        assert not convergence_report([trace([1, 1], rigid_steps=[(1, 1.0, 1.1)])]).rigid_monotone

    def test_unequal_lengths_are_resampled(self):
        r = convergence_report([trace([1.0, 0.0]), trace([1.0, 0.5, 0.0])])
        assert np.allclose(r.mean_seen, [1.0, 0.5, 0.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            convergence_report([])


class TestResultsCsv:
    def test_round_trip(self, tmp_path):
        rows = [{"case_id": "cut-000", "method": "ours", "err_seen": 0.1, "err_unseen": None, "err_total": 0.1,
                 "vol_err_pct": 2.5, "runtime_ms": 12.0}]
        write_results_csv(tmp_path / "r.csv", rows)
        back = read_results_csv(tmp_path / "r.csv")
        assert tuple(back[0]) == RESULT_FIELDS
        assert back[0]["err_unseen"] == "" and float(back[0]["vol_err_pct"]) == 2.5
