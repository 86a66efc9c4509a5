"""Synthetic deformable shape families and partial-shape generators.

The family bends, twists and bulges a template laid out along the z axis. Each
generator returns a :class:`PartialShape` whose ground-truth correspondence into
the template topology is exact by construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Correspondence, Mesh, cylinder, icosphere, load_mesh, read_ply_points, shape_radius, write_ply

__all__ = [
    "ShapeFamilyConfig",
    "ShapeFamily",
    "PartialShape",
    "EmptyPartialError",
    "deform",
    "generate_family",
    "virtual_scan",
    "ring_viewpoints",
    "remove_patches",
    "hyperplane_cut",
    "corrupt_correspondence",
    "CORRESPONDENCE_NOISE",
]

# fraction of permuted correspondences in the two noisy face settings
CORRESPONDENCE_NOISE = {"low": 0.05, "high": 0.30}

POSE_PARAMS = ("bend_upper", "bend_lower", "twist", "bulge")
SUBJECT_PARAMS = ("radius_scale", "length_scale")


class EmptyPartialError(ValueError):
    """A generator removed every vertex."""


@dataclass
class ShapeFamilyConfig:
    """Parameter ranges of the synthetic family.

    Angles are in radians. ``holdout`` lists ``(parameter, low, high)`` bands;
    every sample with a parameter inside a band goes to the test split.
    """

    template: str = "cylinder"
    n_around: int = 12
    n_along: int = 16
    radius: float = 0.25
    length: float = 2.0
    bend_upper: tuple = (-math.pi / 3, math.pi / 3)
    bend_lower: tuple = (-math.pi / 3, math.pi / 3)
    twist: tuple = (-math.pi / 4, math.pi / 4)
    bulge: tuple = (-0.3, 0.3)
    radius_scale: tuple = (0.8, 1.2)
    length_scale: tuple = (0.9, 1.1)
    n_samples: int = 100
    seed: int = 0
    holdout: list = field(default_factory=lambda: [("bend_upper", 0.2, 0.4), ("radius_scale", 1.1, 1.2)])

    def to_dict(self):
        d = asdict(self)
        d["holdout"] = [list(b) for b in self.holdout]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in POSE_PARAMS + SUBJECT_PARAMS:
            if k in d:
                d[k] = tuple(d[k])
        if "holdout" in d:
            d["holdout"] = [tuple(b) for b in d["holdout"]]
        return cls(**d)

    def template_mesh(self):
        if self.template == "cylinder":
            return cylinder(self.n_around, self.n_along, self.radius, self.length)
        if self.template == "icosphere":
            sphere = icosphere(2)
            return sphere.with_vertices(sphere.vertices * np.array([self.radius, self.radius, self.length / 2]))
        return load_mesh(self.template)


@dataclass
class ShapeFamily:
    template: Mesh
    train: list
    test: list
    train_params: list
    test_params: list
    config: ShapeFamilyConfig


def deform(template, bend_upper=0.0, bend_lower=0.0, twist=0.0, bulge=0.0,
           radius_scale=1.0, length_scale=1.0):
    """Deform a z-aligned template.

    Each half of the axis bends in the x-z plane with constant curvature so its
    end tangent turns by ``bend_upper`` (z > 0) or ``bend_lower`` (z < 0). The
    cross-section twists linearly along the axis and bulges around z = 0.
    """
    v = template.vertices if isinstance(template, Mesh) else np.asarray(template, dtype=np.float64)
    half = max(np.abs(v[:, 2]).max(), 1e-12)
    s = v[:, 2] / half  # normalized axial coordinate in [-1, 1]
    ang = twist * s
    x = v[:, 0] * np.cos(ang) - v[:, 1] * np.sin(ang)
    y = v[:, 0] * np.sin(ang) + v[:, 1] * np.cos(ang)
    swell = radius_scale * (1.0 + bulge * np.exp(-(s / 0.3) ** 2))
    x, y = x * swell, y * swell

    h = half * length_scale
    arc = s * h
    k = np.where(s >= 0, bend_upper, bend_lower) / h  # curvature per half
    theta = k * arc
    small = np.abs(k) < 1e-12
    safe_k = np.where(small, 1.0, k)
    cx = np.where(small, 0.0, (1.0 - np.cos(theta)) / safe_k)
    cz = np.where(small, arc, np.sin(theta) / safe_k)
    out = np.column_stack([cx + x * np.cos(theta), y, cz - x * np.sin(theta)])
    return template.with_vertices(out) if isinstance(template, Mesh) else out


def generate_family(config=None):
    """Sample a deterministic family and split it by held-out parameter bands."""
    config = config or ShapeFamilyConfig()
    template = config.template_mesh()
    rng = np.random.default_rng(config.seed)
    train, test, train_p, test_p = [], [], [], []
    for _ in range(config.n_samples):
        p = {k: float(rng.uniform(*getattr(config, k))) for k in POSE_PARAMS + SUBJECT_PARAMS}
        mesh = deform(template, **p)
        held = any(lo <= p[name] <= hi for name, lo, hi in config.holdout)
        (test if held else train).append(mesh)
        (test_p if held else train_p).append(p)
    return ShapeFamily(template, train, test, train_p, test_p, config)


# ---------------------------------------------------------------------------
# Partial shapes
# ---------------------------------------------------------------------------

@dataclass
class PartialShape:
    """Observed points with their (possibly noisy) and true correspondences.

    Attributes
    ----------
    points : ndarray (P, 3)
    correspondence : Correspondence
        What the completion is given.
    ground_truth_corr : Correspondence
        True pairing, kept for scoring.
    visibility_mask : ndarray of bool (N,)
        Reference vertices that were observed.
    provenance : dict
        Generator name and arguments.
    """

    points: np.ndarray
    correspondence: Correspondence
    ground_truth_corr: Correspondence
    visibility_mask: np.ndarray
    provenance: dict

    @classmethod
    def from_mask(cls, mesh, mask, provenance):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyPartialError("empty partial shape")
        idx = np.flatnonzero(mask)
        corr = Correspondence.identity(idx)
        return cls(mesh.vertices[idx].copy(), corr, corr, mask, provenance)

    @property
    def n_points(self):
        return len(self.points)

    def save(self, path):
        """Write the points as PLY and the rest as a JSON sidecar next to it."""
        path = Path(path)
        write_ply(path, self.points)
        sidecar = {
            "correspondence": self.correspondence.to_dict(),
            "ground_truth_corr": self.ground_truth_corr.to_dict(),
            "visibility_mask": self.visibility_mask.astype(int).tolist(),
            "provenance": self.provenance,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        points = read_ply_points(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(
            points,
            Correspondence.from_dict(meta["correspondence"]),
            Correspondence.from_dict(meta["ground_truth_corr"]),
            np.asarray(meta["visibility_mask"], dtype=bool),
            meta.get("provenance", {}),
        )


def _segment_hits(origin, targets, tri, eps):
    """For each target, whether the open segment origin->target crosses a triangle.

    ``tri`` is ``(F, 3, 3)``; ``exclude`` handling is done by the caller via masks.
    Returns a boolean matrix ``(len(targets), F)``.
    """
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    d = targets - origin  # (T, 3)
    length = np.linalg.norm(d, axis=1)
    pvec = np.cross(d[:, None, :], e2[None])  # (T, F, 3)
    det = np.einsum("fk,tfk->tf", e1, pvec)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - tri[:, 0]  # (F, 3)
    u = np.einsum("fk,tfk->tf", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)  # (F, 3)
    v = np.einsum("tk,fk->tf", d, qvec) * inv
    t = np.einsum("fk,fk->f", e2, qvec)[None] * inv
    t_eps = (eps / length)[:, None]
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_eps) & (t < 1 - t_eps)


def _winding_number(mesh, point):
    """Generalized winding number of a closed mesh around ``point``."""
    tri = mesh.vertices[mesh.faces] - point
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = la * lb * lc + np.einsum("ij,ij->i", a, b) * lc + np.einsum("ij,ij->i", b, c) * la \
        + np.einsum("ij,ij->i", c, a) * lb
    return float(2.0 * np.arctan2(num, den).sum() / (4 * np.pi))


def virtual_scan(mesh, viewpoint, eps=None, chunk=256):
    """Keep the vertices a pinhole at ``viewpoint`` can see.

    A vertex is visible when the segment from the viewpoint to it crosses no
    triangle other than those incident to the vertex. ``eps`` (default
    ``1e-6 * radius``) trims both segment ends.
    """
    viewpoint = np.asarray(viewpoint, dtype=np.float64)
    if _winding_number(mesh, viewpoint) > 0.5:
        raise ValueError("viewpoint lies inside the mesh")
    if eps is None:
        eps = 1e-6 * shape_radius(mesh)
    V, F = mesh.vertices, mesh.faces
    tri = V[F]
    mask = np.zeros(len(V), dtype=bool)
    for start in range(0, len(V), chunk):
        ids = np.arange(start, min(start + chunk, len(V)))
        hits = _segment_hits(viewpoint, V[ids], tri, eps)
        incident = (F[None, :, :] == ids[:, None, None]).any(axis=2)
        mask[ids] = ~(hits & ~incident).any(axis=1)
    return PartialShape.from_mask(mesh, mask, {
        "generator": "virtual_scan", "viewpoint": viewpoint.tolist(), "eps": float(eps)})


def ring_viewpoints(mesh, count=10, distance=3.0, elevation=0.0, axis_offset=0.0):
    """``count`` viewpoints equally spaced in azimuth about the z axis.

    ``distance`` is in units of the shape radius, measured from the centroid.
    """
    center = mesh.vertices.mean(axis=0)
    r = distance * shape_radius(mesh)
    az = 2 * np.pi * (np.arange(count) / count + axis_offset)
    pts = np.column_stack([np.cos(az) * np.cos(elevation), np.sin(az) * np.cos(elevation),
                           np.full(count, np.sin(elevation))])
    return center + r * pts


def _principal_frame(vertices):
    centered = vertices - vertices.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T  # coordinates along the two dominant directions


def remove_patches(mesh, count=4, w_frac=0.3, h_frac=0.3, seed=None):
    """Drop vertices inside ``count`` random axis-aligned rectangles, overlap allowed.

    Rectangles live in the plane of the two dominant principal directions and are
    sized as fractions of the bounding-box extents there.
    """
    rng = np.random.default_rng(seed)
    uv = _principal_frame(mesh.vertices)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    size = (hi - lo) * np.array([w_frac, h_frac])
    if np.any(hi - lo <= 0):
        raise ValueError("mesh has a degenerate bounding box")
    keep = np.ones(mesh.n_vertices, dtype=bool)
    rects = []
    for _ in range(count):
        corner = lo + rng.uniform(0.0, 1.0, size=2) * np.maximum(hi - lo - size, 0.0)
        inside = np.all((uv >= corner) & (uv <= corner + size), axis=1)
        keep &= ~inside
        rects.append((corner.tolist(), size.tolist()))
    return PartialShape.from_mask(mesh, keep, {
        "generator": "remove_patches", "count": count, "w_frac": w_frac, "h_frac": h_frac,
        "seed": seed, "rectangles": rects})


def _canonical_sign(normal):
    nz = normal[np.abs(normal) > 0]
    return 1.0 if nz.size == 0 or nz[0] > 0 else -1.0


def hyperplane_cut(mesh, seed=None, normal=None):
    """Keep the vertices on the positive side of a random plane through the centroid.

    Vertices exactly on the plane are kept when the first non-zero component of
    the normal is positive, so opposite normals give complementary masks.
    """
    if mesh.n_vertices < 2:
        raise ValueError("hyperplane_cut needs at least two vertices")
    if normal is None:
        rng = np.random.default_rng(seed)
        normal = rng.normal(size=3)
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    side = (mesh.vertices - mesh.vertices.mean(axis=0)) @ normal
    keep = (side > 0) | ((side == 0) & (_canonical_sign(normal) > 0))
    return PartialShape.from_mask(mesh, keep, {
        "generator": "hyperplane_cut", "seed": seed, "normal": normal.tolist()})


def corrupt_correspondence(ps, fraction, seed=None):
    """Shuffle the reference indices of a random ``ceil(fraction * P)`` subset of pairs.

    The chosen pairs are permuted along a single cycle, so each of them changes
    whenever at least two are selected; every other pair is untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pairs = ps.correspondence.pairs.copy()
    P = len(pairs)
    k = min(P, math.ceil(fraction * P))
    chosen = rng.choice(P, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    if k >= 2:
        order = rng.permutation(chosen)
        pairs[order, 1] = pairs[np.roll(order, -1), 1]
    corr = Correspondence(pairs, ps.correspondence.weights)
    prov = dict(ps.provenance)
    prov["corruption"] = {"fraction": fraction, "seed": seed, "changed": sorted(chosen.tolist())}
    return PartialShape(ps.points, corr, ps.ground_truth_corr, ps.visibility_mask, prov)
