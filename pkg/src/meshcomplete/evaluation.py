"""Completion metrics, the nearest-neighbor baseline and convergence summaries."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse import csgraph, csr_matrix

from .completion import solve_rigid
from .mesh import Mesh, shape_radius, signed_volume

__all__ = [
    "CompletionScore",
    "score",
    "NNResult",
    "nn_baseline",
    "geodesic_distances",
    "correspondence_quality_curve",
    "ConvergenceReport",
    "convergence_report",
    "RESULT_FIELDS",
    "write_results_csv",
    "read_results_csv",
]

RESULT_FIELDS = ("case_id", "method", "err_seen", "err_unseen", "err_total", "vol_err_pct", "runtime_ms")


@dataclass
class CompletionScore:
    """Errors of a completed shape against its ground truth.

    Mean vertex distances are in model units; ``None`` marks an empty region.
    ``radius_pct`` repeats them as percentages of the ground-truth shape radius.
    The volume error is relative to the ground-truth volume of the whole shape.
    """

    err_seen: float | None
    err_unseen: float | None
    err_total: float
    vol_err_pct: float
    radius_pct: dict

    def to_dict(self):
        return asdict(self)


def _verts(x):
    return x.vertices if isinstance(x, Mesh) else np.asarray(x, dtype=np.float64)


def score(completed, ground_truth, mask):
    """Score ``completed`` against ``ground_truth`` (same topology, same frame).

    ``mask`` flags the observed vertices.
    """
    C, G = _verts(completed), _verts(ground_truth)
    mask = np.asarray(mask, dtype=bool)
    if C.shape != G.shape or mask.shape != (len(G),):
        raise ValueError("completed, ground truth and mask must agree in vertex count")
    dist = np.linalg.norm(C - G, axis=1)
    seen = float(dist[mask].mean()) if mask.any() else None
    unseen = float(dist[~mask].mean()) if (~mask).any() else None
    total = float(dist.mean())
    vol_err = float("nan")
    if isinstance(completed, Mesh) and isinstance(ground_truth, Mesh):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            vg = signed_volume(ground_truth)
            vc = signed_volume(completed)
        vol_err = abs(vc - vg) / abs(vg) * 100.0 if vg != 0 else float("nan")
    radius = shape_radius(G)

    def pct(x):
        return None if x is None or radius == 0 else 100.0 * x / radius

    return CompletionScore(seen, unseen, total, vol_err,
                           {"seen": pct(seen), "unseen": pct(unseen), "total": pct(total)})


@dataclass
class NNResult:
    mesh: Mesh
    """Selected training shape, rigidly moved into the partial's frame."""
    index: int
    distances: np.ndarray
    """Mean aligned distance for every training shape."""


def nn_baseline(partial, training_set):
    """Training shape closest to the partial after rigid alignment on the true correspondence."""
    if not training_set:
        raise ValueError("training set is empty")
    gt = partial.ground_truth_corr
    Y = partial.points[gt.partial_index]
    ref = gt.reference_index
    dists, transforms = [], []
    for shape in training_set:
        src = shape.vertices[ref]
        T = solve_rigid(src, Y)
        dists.append(float(np.linalg.norm(T.apply(src) - Y, axis=1).mean()))
        transforms.append(T)
    best = int(np.argmin(dists))
    chosen = training_set[best]
    return NNResult(chosen.with_vertices(transforms[best].apply(chosen.vertices)), best, np.asarray(dists))


def geodesic_distances(mesh, sources):
    """Shortest edge-path lengths from each source vertex, shape ``(len(sources), N)``."""
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    graph = csr_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n))
    return csgraph.dijkstra(graph, directed=False, indices=np.asarray(sources, dtype=np.int64))


def correspondence_quality_curve(corr, ground_truth, mesh, thresholds):
    """Fraction of pairs whose geodesic error, relative to the shape radius, is at most each threshold.

    Pairs are matched to the ground truth by partial index; pairs without a
    ground-truth partner are ignored.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    truth = dict(zip(ground_truth.partial_index.tolist(), ground_truth.reference_index.tolist()))
    assigned, true = [], []
    for p, r in corr.pairs.tolist():
        if p in truth:
            assigned.append(r)
            true.append(truth[p])
    if not assigned:
        return np.zeros_like(thresholds)
    errors = normalized_geodesic_errors(np.asarray(assigned), np.asarray(true), mesh)
    return (errors[None, :] <= thresholds[:, None]).mean(axis=1)


def normalized_geodesic_errors(assigned, true, mesh):
    sources, inverse = np.unique(assigned, return_inverse=True)
    D = geodesic_distances(mesh, sources)
    return D[inverse, np.asarray(true)] / shape_radius(mesh)


@dataclass
class ConvergenceReport:
    mean_seen: np.ndarray
    mean_unseen: np.ndarray
    drop_iteration: int
    """Iteration with the largest single-step fall of the mean seen error."""
    drop_size: float
    refinement_drop: float | None
    """Mean seen error over the window before refinement minus the window after."""
    endpoint_improvement_fraction: float | None
    """Share of runs whose final unseen error is below the initial one."""
    rigid_monotone: bool
    """No rigid step increased the seen error (tolerance 1e-10)."""

    def to_dict(self):
        d = asdict(self)
        d["mean_seen"] = self.mean_seen.tolist()
        d["mean_unseen"] = self.mean_unseen.tolist()
        return d


def _resample(values, length):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == length:
        return values
    return np.interp(np.linspace(0, 1, length), np.linspace(0, 1, len(values)), values)


def convergence_report(traces, window=20):
    """Average traces on a common grid and summarize their convergence."""
    if not traces:
        raise ValueError("no traces to summarize")
    length = max(len(t) for t in traces)
    seen = np.stack([_resample(t.seen_error, length) for t in traces])
    unseen = np.stack([_resample(t.unseen_error, length) for t in traces])
    mean_seen = seen.mean(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_unseen = np.nanmean(unseen, axis=0)
    steps = -np.diff(mean_seen)
    drop_it = int(np.argmax(steps)) + 1 if len(steps) else 0
    drop = float(steps.max()) if len(steps) else 0.0

    drops = []
    for t in traces:
        for k in t.refinements:
            before = t.seen_error[max(0, k - window):k]
            after = t.seen_error[k:k + window]
            if before and after:
                drops.append(np.mean(before) - np.mean(after))
    finite = [t for t in traces if len(t) and not math.isnan(t.unseen_error[0]) and not math.isnan(t.unseen_error[-1])]
    improved = (float(np.mean([t.unseen_error[-1] < t.unseen_error[0] for t in finite])) if finite else None)
    monotone = all(after <= before + 1e-10 for t in traces for _, before, after in t.rigid_steps)
    return ConvergenceReport(mean_seen, mean_unseen, drop_it, drop,
                             float(np.mean(drops)) if drops else None, improved, monotone)


def write_results_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in RESULT_FIELDS})


def read_results_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
