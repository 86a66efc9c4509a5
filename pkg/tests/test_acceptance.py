"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale criteria share a model trained once per session on the bending
cylinder family (see ``desk_model`` in ``conftest.py``).
"""
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from meshcomplete import autograd as ag
from meshcomplete.bench import BenchConfig, make_cases, run_bench
from meshcomplete.completion import (CompletionConfig, RigidTransform, complete, filter_correspondence, fuse,
                                     solve_rigid)
from meshcomplete.evaluation import correspondence_quality_curve
from meshcomplete.feast_conv import assignment_weights, conv_forward
from meshcomplete.mesh import shape_radius
from meshcomplete.partiality import hyperplane_cut, ring_viewpoints, virtual_scan
from meshcomplete.vae import MeshVAE, kl_divergence
from helpers import check_gradients
from test_autograd import KERNELS, _param, _weighted
from test_feast_conv import loop_oracle, random_graph, random_layer


VERDICTS = []


@pytest.fixture
def report(capsys):
    """Print the verdict line for a criterion, bypassing pytest's capture."""

    def emit(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


@pytest.fixture(scope="module")
def bench_result(desk_model, desk_family):
    """24 cases: 12 test shapes under a hyperplane cut and a virtual scan."""
    t0 = time.perf_counter()
    result = run_bench(desk_model, desk_family, BenchConfig(n_shapes=12, completion={"max_iter": 1000}))
    return result, time.perf_counter() - t0


@pytest.fixture(scope="module")
def noisy_cases(desk_family):
    """Cut and scan cases with a quarter of the correspondences permuted."""
    return make_cases(desk_family.test, BenchConfig(n_shapes=6, corruption=0.25, seed=1))


class TestAcceptance:
    def test_01_gradients(self, report):
        t0 = time.perf_counter()
        worst = 0.0
        for name, (fn, shapes, opts) in KERNELS.items():
            for seed in range(20):
                rng = np.random.default_rng(seed)
                params = [_param(rng, s, **opts) for s in shapes]
                worst = max(worst, check_gradients(lambda: _weighted(fn(*params), rng), params))
        for seed in range(20):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(4, 11))
            g = random_graph(rng, n)
            layer = random_layer(rng, 3, 2, int(rng.integers(1, 5)))
            x = ag.Parameter(rng.normal(size=(n, 3)))
            R = rng.normal(size=(n, 2))
            worst = max(worst, check_gradients(lambda: ag.sum(conv_forward(x, g, layer) * R),
                                               [x] + layer.parameters()))
        dt = time.perf_counter() - t0
        ok = worst < 1e-5 and dt < 30
        assert report(1, ok, f"max relative error {worst:.2e} over {len(KERNELS)} kernels + layer, {dt:.1f} s")

    def test_02_conv_oracle(self, report):
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            n = int(rng.integers(3, 11))
            g = random_graph(rng, n)
            in_dim, out_dim, M = (int(v) for v in rng.integers(1, 5, size=3))
            include_self = bool(seed % 2)
            layer = random_layer(rng, in_dim, out_dim, M, include_self)
            x = rng.normal(size=(n, in_dim))
            want = loop_oracle(x.tolist(), g.neighbors, layer.W.data.tolist(), layer.u.data.tolist(),
                               layer.c.data.tolist(), layer.b.data.tolist(), include_self)
            worst = max(worst, float(np.max(np.abs(conv_forward(x, g, layer).data - want))))
        dt = time.perf_counter() - t0
        ok = worst <= 1e-12 and dt < 5
        assert report(2, ok, f"max deviation {worst:.1e} on 50 instances, {dt:.2f} s")

    def test_03_assignment_weights(self, report):
        worst = [0.0, 0.0]

        @settings(max_examples=200, deadline=None)
        @given(arrays(np.float64, 3, elements=st.floats(-10, 10)),
               arrays(np.float64, 3, elements=st.floats(-10, 10)),
               arrays(np.float64, 3, elements=st.floats(-10, 10)),
               st.integers(0, 2**31 - 1))
        def check(xi, xj, t, seed):
            r = np.random.default_rng(seed)
            u, c = r.normal(size=(4, 3)), r.normal(size=4)
            q = assignment_weights(xi, xj, u, c)
            worst[0] = max(worst[0], abs(q.sum() - 1.0))
            worst[1] = max(worst[1], float(np.max(np.abs(q - assignment_weights(xi + t, xj + t, u, c)))))
            assert worst[0] <= 1e-12 and worst[1] <= 1e-12

        try:
            check()
            ok = True
        except AssertionError:
            ok = False
        assert report(3, ok, f"|sum q - 1| <= {worst[0]:.1e}, translation deviation <= {worst[1]:.1e}")

    def test_04_kl_closed_form(self, report):
        rng = np.random.default_rng(0)
        mu, lv = np.array([0.5, -1.0, 0.2, 1.5]), np.array([0.3, -0.5, 0.0, 0.8])
        sd = np.exp(0.5 * lv)
        z = mu + sd * rng.standard_normal((1_000_000, 4))
        log_q = -0.5 * np.sum(((z - mu) / sd) ** 2 + lv, axis=1)
        log_p = -0.5 * np.sum(z * z, axis=1)
        mc = float(np.mean(log_q - log_p))
        exact = float(kl_divergence(mu, lv))
        rel = abs(mc - exact) / exact
        zero = float(kl_divergence(np.zeros(4), np.zeros(4)))
        others = kl_divergence(rng.normal(size=(1000, 4)), rng.normal(size=(1000, 4)))
        ok = rel < 0.01 and zero == 0.0 and np.all(others > 0)
        assert report(4, ok, f"closed form {exact:.5f} vs Monte-Carlo {mc:.5f} (rel {rel:.2e}); KL(0,0) = {zero}")

    def test_05_procrustes(self, report):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst_exact, worst_margin = 0.0, -np.inf
        rotations = Rotation.random(10_000, random_state=1).as_matrix()
        for k in range(100):
            src = rng.normal(size=(int(rng.integers(4, 20)), 3))
            T = RigidTransform(Rotation.random(random_state=k).as_matrix(), rng.normal(size=3))
            got = solve_rigid(src, T.apply(src))
            worst_exact = max(worst_exact, np.max(np.abs(got.R - T.R)), np.max(np.abs(got.t - T.t)))
            dst = T.apply(src) + 0.2 * rng.normal(size=src.shape)
            best = solve_rigid(src, dst)
            res = np.sum((best.apply(src) - dst) ** 2)
            cs, cd = src.mean(axis=0), dst.mean(axis=0)
            moved = np.einsum("kij,pj->kpi", rotations, src - cs)
            sampled = np.sum((moved - (dst - cd)) ** 2, axis=(1, 2)).min()
            worst_margin = max(worst_margin, res - sampled)
        dt = time.perf_counter() - t0
        ok = worst_exact <= 1e-9 and worst_margin <= 1e-12 and dt < 60
        assert report(5, ok, f"recovery error {worst_exact:.1e}; residual minus best sampled <= {worst_margin:.1e}; "
                              f"{dt:.1f} s")

    def test_06_overfit(self, report, desk_family):
        t0 = time.perf_counter()
        shape = desk_family.train[:1]
        kw = dict(random_state=0, noise_scale=0.0, translation_range=0.0, scale_range=(1.0, 1.0))
        initial = MeshVAE.from_preset("desk", n_iter=0, **kw).fit(shape).loss(shape)[1][0]
        final = MeshVAE.from_preset("desk", n_iter=5000, **kw).fit(shape).loss(shape)[1][0]
        dt = time.perf_counter() - t0
        ratio = final / initial
        ok = ratio < 0.01 and dt < 600
        assert report(6, ok, f"L_r {initial:.4f} -> {final:.4f} (ratio {ratio:.4f}) in 5000 iterations, {dt:.0f} s")

    def test_07_lower_prior_weight(self, report, desk_model, desk_family):
        low = MeshVAE.from_preset("desk", random_state=0, prior_weight=1e-8).fit(desk_family.train)
        l_low = float(np.mean(low.loss(desk_family.test)[1]))
        l_high = float(np.mean(desk_model.loss(desk_family.test)[1]))
        ok = l_low <= l_high
        assert report(7, ok, f"mean test L_r: lambda=1e-8 {l_low:.4f}, lambda=1e-2 {l_high:.4f}")

    def test_08_beats_nearest_neighbor(self, report, bench_result):
        result, dt = bench_result
        ours, nn = result.mean_unseen("ours"), result.mean_unseen("nn")
        wins = result.win_fraction()
        n = len(result.methods("ours"))
        ok = n >= 20 and ours < nn and wins >= 0.7 and dt < 1200
        assert report(8, ok, f"{n} cases: mean unseen ours {ours:.4f} vs NN {nn:.4f}, ours wins {wins:.0%}, "
                             f"{dt:.0f} s")

    def test_09_convergence(self, report, bench_result):
        rep = bench_result[0].report
        ok = rep.endpoint_improvement_fraction >= 0.95 and rep.rigid_monotone
        assert report(9, ok, f"endpoint improved in {rep.endpoint_improvement_fraction:.0%} of runs; "
                             f"rigid steps monotone: {rep.rigid_monotone}")

    def test_10_refinement_drop(self, report, desk_model, noisy_cases):
        drops = []
        for case in noisy_cases:
            ps = case.partial
            cfg = CompletionConfig(max_iter=300, refine="fixed", refine_at=200, seed=case.seed)
            trace = complete(ps.points, ps.correspondence, desk_model, cfg).trace
            k = trace.refinements[0]
            drops.append(np.mean(trace.seen_error[k:k + 20]) < np.mean(trace.seen_error[k - 20:k]))
        frac = float(np.mean(drops))
        ok = frac >= 0.8
        assert report(10, ok, f"seen error dropped after refinement in {frac:.0%} of {len(drops)} runs "
                              f"(25% corrupted)")

    def test_11_filtered_correspondences(self, report, desk_model, noisy_cases):
        taus = np.linspace(0.0, 0.5, 26)
        failures = 0
        kept, total = 0, 0
        for case in noisy_cases:
            ps = case.partial
            res = complete(ps.points, ps.correspondence, desk_model, CompletionConfig(max_iter=300, seed=case.seed))
            filtered = filter_correspondence(ps.points, res.decoded, ps.correspondence, res.transform)
            before = correspondence_quality_curve(ps.correspondence, ps.ground_truth_corr, case.ground_truth, taus)
            after = correspondence_quality_curve(filtered, ps.ground_truth_corr, case.ground_truth, taus)
            failures += int(np.any(after < before))
            kept += len(filtered)
            total += len(ps.correspondence)
        ok = failures == 0
        assert report(11, ok, f"filtered curve >= unfiltered on {len(noisy_cases) - failures}/{len(noisy_cases)} "
                              f"cases, {kept / total:.0%} of pairs kept")

    def test_12_fusion(self, report, desk_model, desk_family):
        per_view, fused, every = [], [], True
        for i in range(6):
            gt = desk_family.test[i]
            zs = []
            for view in ring_viewpoints(gt, count=3):
                ps = virtual_scan(gt, view)
                zs.append(complete(ps.points, ps.correspondence, desk_model,
                                   CompletionConfig(max_iter=1000, init="zero", seed=i)).z)

            def err(X):
                moved = solve_rigid(X, gt.vertices).apply(X)
                return float(np.linalg.norm(moved - gt.vertices, axis=1).mean())

            errs = [err(desk_model.decode(z[None])[0]) for z in zs]
            f = err(fuse(zs, desk_model).vertices)
            every &= f <= max(errs)
            per_view += errs
            fused.append(f)
        ok = every and np.mean(fused) < np.mean(per_view)
        assert report(12, ok, f"fused mean error {np.mean(fused):.4f} vs per-view {np.mean(per_view):.4f}; "
                              f"fused <= worst view on every case: {every}")

    def test_13_variability(self, report, desk_model, desk_family):
        gt = desk_family.test[0]
        ps = hyperplane_cut(gt, seed=0)
        unseen = ~ps.visibility_mask
        outs = [complete(ps.points, ps.correspondence, desk_model, CompletionConfig(max_iter=1000, seed=s)).mesh
                for s in range(3)]
        radius = shape_radius(gt)
        gaps = [float(np.sqrt(np.mean(np.sum((outs[a].vertices[unseen] - outs[b].vertices[unseen]) ** 2, axis=1))))
                / radius for a, b in ((0, 1), (0, 2), (1, 2))]
        ok = max(gaps) > 0.05
        assert report(13, ok, "pairwise unseen RMS / radius: " + ", ".join(f"{g:.3f}" for g in gaps))

    def test_14_determinism(self, report, desk_family):
        def train():
            return MeshVAE.from_preset("desk", random_state=7, n_iter=40).fit(desk_family.train[:8])

        a, b = train(), train()
        same_params = all(a.named_parameters()[k].data.tobytes() == b.named_parameters()[k].data.tobytes()
                          for k in a.named_parameters())
        ps = hyperplane_cut(desk_family.test[0], seed=3)
        cfg = CompletionConfig(max_iter=50, seed=11)
        ra = complete(ps.points, ps.correspondence, a, cfg)
        rb = complete(ps.points, ps.correspondence, b, cfg)
        same_completion = ra.mesh.vertices.tobytes() == rb.mesh.vertices.tobytes() and ra.z.tobytes() == rb.z.tobytes()
        ok = same_params and same_completion
        assert report(14, ok, f"train bit-exact: {same_params}; complete bit-exact: {same_completion}")
