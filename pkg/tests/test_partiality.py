import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshcomplete.mesh import Correspondence, icosphere, signed_volume
from meshcomplete.partiality import (CORRESPONDENCE_NOISE, EmptyPartialError, PartialShape, ShapeFamilyConfig,
                                     corrupt_correspondence, deform, generate_family, hyperplane_cut,
                                     remove_patches, ring_viewpoints, virtual_scan)


def check_consistent(ps):
    """Points, mask and identity ground truth agree."""
    idx = np.flatnonzero(ps.visibility_mask)
    assert ps.n_points == len(idx) == len(ps.ground_truth_corr)
    assert np.array_equal(np.sort(ps.ground_truth_corr.reference_index), idx)


def backface_oracle(mesh, viewpoint):
    """On a convex mesh a vertex is visible iff one of its faces points towards the viewer."""
    tri = mesh.vertices[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    facing = np.einsum("ij,ij->i", normals, viewpoint - tri.mean(axis=1)) > 0
    visible = np.zeros(mesh.n_vertices, dtype=bool)
    for f, ok in zip(mesh.faces, facing):
        if ok:
            visible[f] = True
    return visible


class TestFamily:
    def test_deterministic(self):
        a = generate_family(ShapeFamilyConfig(n_samples=10, seed=4))
        b = generate_family(ShapeFamilyConfig(n_samples=10, seed=4))
        assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a.train + a.test, b.train + b.test))

    def test_neutral_parameters_give_template(self):
        cfg = ShapeFamilyConfig()
        t = cfg.template_mesh()
        assert np.allclose(deform(t).vertices, t.vertices, atol=1e-14)

    def test_fixed_topology(self):
        fam = generate_family(ShapeFamilyConfig(n_samples=20))
        assert all(m.same_topology(fam.template) for m in fam.train + fam.test)

    def test_holdout_bands_are_disjoint(self):
        cfg = ShapeFamilyConfig(n_samples=100, seed=0)
        fam = generate_family(cfg)
        assert fam.train and fam.test
        for p in fam.train_params:
            assert not any(lo <= p[name] <= hi for name, lo, hi in cfg.holdout)
        for p in fam.test_params:
            assert any(lo <= p[name] <= hi for name, lo, hi in cfg.holdout)

    def test_bend_keeps_axis_length(self):
        t = ShapeFamilyConfig().template_mesh()
        bent = deform(t, bend_upper=1.0, bend_lower=-0.7)
        axis = np.isclose(t.vertices[:, 0], 0) & np.isclose(t.vertices[:, 1], 0)
        # cap centers lie on the arc: their distance from the origin is a chord of the bend
        top = bent.vertices[axis & (t.vertices[:, 2] > 0)][0]
        h = t.vertices[:, 2].max()
        assert np.linalg.norm(top) == pytest.approx(2 * h / 1.0 * math.sin(0.5), rel=1e-9)

    def test_volume_stays_positive(self):
        fam = generate_family(ShapeFamilyConfig(n_samples=20))
        assert all(signed_volume(m) > 0 for m in fam.train + fam.test)

    def test_config_dict_round_trip(self):
        cfg = ShapeFamilyConfig(n_samples=7, seed=2)
        assert ShapeFamilyConfig.from_dict(cfg.to_dict()) == cfg


class TestVirtualScan:
    @pytest.mark.parametrize("k", range(6))
    def test_convex_matches_backface_oracle(self, k):
        mesh = icosphere(2)
        d = np.random.default_rng(k).normal(size=3)
        view = 50.0 * d / np.linalg.norm(d)
        ps = virtual_scan(mesh, view)
        assert np.array_equal(ps.visibility_mask, backface_oracle(mesh, view))
        check_consistent(ps)

    def test_opposite_views_cover_convex_shape(self):
        mesh = icosphere(2)
        a = virtual_scan(mesh, [0, 0, 10.0]).visibility_mask
        b = virtual_scan(mesh, [0, 0, -10.0]).visibility_mask
        assert (a | b).mean() >= 0.99

    def test_ten_views_deterministic(self, tube):
        views = ring_viewpoints(tube, count=10)
        assert len(views) == 10
        first = [virtual_scan(tube, v).visibility_mask for v in views]
        second = [virtual_scan(tube, v).visibility_mask for v in views]
        assert all(np.array_equal(x, y) for x, y in zip(first, second))

    def test_inside_viewpoint(self, sphere):
        with pytest.raises(ValueError, match="inside"):
            virtual_scan(sphere, [0.0, 0.0, 0.0])

    def test_occlusion_on_bent_shape(self):
        fam = generate_family(ShapeFamilyConfig(n_samples=5))
        mesh = fam.train[0]
        ps = virtual_scan(mesh, ring_viewpoints(mesh)[0])
        assert 0.2 < ps.visibility_mask.mean() < 0.8


class TestPatches:
    def test_zero_patches(self, sphere):
        assert remove_patches(sphere, count=0, seed=0).visibility_mask.all()

    def test_full_patch_empties(self, sphere):
        with pytest.raises(EmptyPartialError, match="empty partial shape"):
            remove_patches(sphere, count=1, w_frac=1.0, h_frac=1.0, seed=0)

    def test_defaults_remove_a_proper_subset(self, sphere):
        for seed in range(100):
            ps = remove_patches(sphere, seed=seed)
            assert 0 < ps.visibility_mask.mean() < 1
            check_consistent(ps)


class TestHyperplaneCut:
    def test_fraction_near_half(self, sphere):
        frac = np.mean([hyperplane_cut(sphere, seed=s).visibility_mask.mean() for s in range(100)])
        assert abs(frac - 0.5) <= 0.1

    def test_fixed_normal_predicate(self, tube):
        ps = hyperplane_cut(tube, normal=[1.0, 0.0, 0.0])
        c = tube.vertices - tube.vertices.mean(axis=0)
        strict = c[:, 0] > 0
        ties = c[:, 0] == 0
        assert np.array_equal(ps.visibility_mask & ~ties, strict)

    def test_opposite_normals_are_complements(self, tube):
        n = np.array([1.0, 0.0, 0.0])  # the tube has vertices exactly on this plane
        a = hyperplane_cut(tube, normal=n).visibility_mask
        b = hyperplane_cut(tube, normal=-n).visibility_mask
        assert not np.any(a & b) and np.all(a | b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_random_cuts_keep_invariants(self, seed):
        check_consistent(hyperplane_cut(icosphere(1), seed=seed))


class TestCorruption:
    def _partial(self):
        return hyperplane_cut(icosphere(2), seed=1)

    def test_zero_fraction_unchanged(self):
        ps = self._partial()
        out = corrupt_correspondence(ps, 0.0, seed=0)
        assert np.array_equal(out.correspondence.pairs, ps.correspondence.pairs)

    @pytest.mark.parametrize("fraction", [0.05, 0.3, 1.0])
    def test_changes_exactly_the_chosen_subset(self, fraction):
        ps = self._partial()
        out = corrupt_correspondence(ps, fraction, seed=3)
        changed = np.flatnonzero(out.correspondence.reference_index != ps.correspondence.reference_index)
        assert len(changed) == math.ceil(fraction * ps.n_points)
        assert changed.tolist() == out.provenance["corruption"]["changed"]
        # targets are permuted among themselves
        assert set(out.correspondence.reference_index[changed]) == set(ps.correspondence.reference_index[changed])
        assert np.array_equal(out.ground_truth_corr.pairs, ps.ground_truth_corr.pairs)

    def test_presets(self):
        assert CORRESPONDENCE_NOISE == {"low": 0.05, "high": 0.30}

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            corrupt_correspondence(self._partial(), 1.5)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        ps = corrupt_correspondence(hyperplane_cut(icosphere(1), seed=2), 0.2, seed=1)
        ps.save(tmp_path / "p.ply")
        back = PartialShape.load(tmp_path / "p.ply")
        assert np.allclose(back.points, ps.points, atol=1e-12)
        assert np.array_equal(back.correspondence.pairs, ps.correspondence.pairs)
        assert np.array_equal(back.ground_truth_corr.pairs, ps.ground_truth_corr.pairs)
        assert np.array_equal(back.visibility_mask, ps.visibility_mask)
        assert back.provenance["generator"] == "hyperplane_cut"

    def test_empty_mask(self, sphere):
        with pytest.raises(EmptyPartialError):
            PartialShape.from_mask(sphere, np.zeros(sphere.n_vertices, dtype=bool), {})

    def test_correspondence_is_identity_style(self, sphere):
        ps = hyperplane_cut(sphere, seed=0)
        assert np.array_equal(ps.correspondence.partial_index, np.arange(ps.n_points))
        assert isinstance(ps.correspondence, Correspondence)
