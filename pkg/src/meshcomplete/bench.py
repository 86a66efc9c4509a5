"""Benchmark pipeline: partial shapes, completion and NN baseline, scoring, convergence.

Every case is generated from a held-out family shape with its own seed, so a
case list is fully described by :class:`BenchConfig`.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .completion import CompletionConfig, complete
from .evaluation import convergence_report, nn_baseline, score, write_results_csv
from .partiality import corrupt_correspondence, hyperplane_cut, ring_viewpoints, virtual_scan

__all__ = ["BenchConfig", "BenchCase", "BenchResult", "make_cases", "run_case", "run_bench", "write_bench"]

GENERATORS = ("hyperplane_cut", "virtual_scan")


@dataclass
class BenchConfig:
    """Which cases to build and how to complete them.

    ``n_shapes`` test shapes are each turned into one partial per entry of
    ``generators``. ``corruption`` permutes that fraction of every case's
    correspondences before completion.
    """

    n_shapes: int = 12
    generators: tuple = GENERATORS
    n_views: int = 10
    view_distance: float = 3.0
    corruption: float = 0.0
    seed: int = 0
    completion: dict = field(default_factory=lambda: {"max_iter": 1000})

    def completion_config(self):
        return CompletionConfig(**self.completion)

    def to_dict(self):
        d = asdict(self)
        d["generators"] = list(self.generators)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bench keys: {sorted(unknown)}")
        d = dict(d)
        if "generators" in d:
            d["generators"] = tuple(d["generators"])
            bad = set(d["generators"]) - set(GENERATORS)
            if bad:
                raise ValueError(f"unknown generators: {sorted(bad)}")
        return cls(**d)


@dataclass
class BenchCase:
    case_id: str
    shape_index: int
    ground_truth: object
    partial: object
    seed: int


def make_cases(test_shapes, config):
    """Build the partial shapes of the benchmark from ``test_shapes``."""
    if config.n_shapes > len(test_shapes):
        raise ValueError(f"need {config.n_shapes} test shapes, family has {len(test_shapes)}")
    cases = []
    for i in range(config.n_shapes):
        gt = test_shapes[i]
        for g, name in enumerate(config.generators):
            seed = config.seed * 100_003 + i * len(GENERATORS) + g
            if name == "hyperplane_cut":
                ps = hyperplane_cut(gt, seed=seed)
            else:
                views = ring_viewpoints(gt, count=config.n_views, distance=config.view_distance)
                ps = virtual_scan(gt, views[i % config.n_views])
            if config.corruption > 0:
                ps = corrupt_correspondence(ps, config.corruption, seed=seed)
            cases.append(BenchCase(f"{name}-{i:03d}", i, gt, ps, seed))
    return cases


@dataclass
class CaseOutcome:
    rows: list
    trace: object
    z: np.ndarray


def run_case(case, model, training_set, completion_config):
    """Complete one case, run the NN baseline and return both result rows."""
    ps = case.partial
    cfg = replace(completion_config, seed=case.seed)
    t0 = time.perf_counter()
    res = complete(ps.points, ps.correspondence, model, cfg, ground_truth=case.ground_truth,
                   mask=ps.visibility_mask)
    t_ours = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    nn = nn_baseline(ps, training_set)
    t_nn = (time.perf_counter() - t0) * 1e3

    rows = []
    for method, mesh, ms in (("ours", res.mesh, t_ours), ("nn", nn.mesh, t_nn)):
        s = score(mesh, case.ground_truth, ps.visibility_mask)
        rows.append({"case_id": case.case_id, "method": method, "err_seen": s.err_seen,
                     "err_unseen": s.err_unseen, "err_total": s.err_total,
                     "vol_err_pct": s.vol_err_pct, "runtime_ms": round(ms, 3)})
    return CaseOutcome(rows, res.trace, res.z)


def _run_case_star(args):
    return run_case(*args)


@dataclass
class BenchResult:
    rows: list
    traces: list
    latents: list
    report: object
    config: BenchConfig

    def methods(self, name):
        return [r for r in self.rows if r["method"] == name]

    def win_fraction(self):
        """Share of cases where ours has the lower unseen error."""
        ours = {r["case_id"]: r["err_unseen"] for r in self.methods("ours")}
        nn = {r["case_id"]: r["err_unseen"] for r in self.methods("nn")}
        cases = [c for c in ours if ours[c] is not None and nn.get(c) is not None]
        return float(np.mean([ours[c] < nn[c] for c in cases])) if cases else float("nan")

    def mean_unseen(self, method):
        vals = [r["err_unseen"] for r in self.methods(method) if r["err_unseen"] is not None]
        return float(np.mean(vals)) if vals else float("nan")


def run_bench(model, family, config=None, workers=1):
    """Run every case of ``config`` against ``model`` and the NN baseline."""
    config = config or BenchConfig()
    cases = make_cases(family.test, config)
    cc = config.completion_config()
    cc.validate()
    jobs = [(case, model, family.train, cc) for case in cases]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_case_star, jobs))
    else:
        outcomes = [run_case(*job) for job in jobs]
    rows = [r for o in outcomes for r in o.rows]
    traces = [o.trace for o in outcomes]
    return BenchResult(rows, traces, [o.z for o in outcomes], convergence_report(traces), config)


def write_bench(result, out_dir):
    """Write ``results.csv``, ``convergence.json``, ``cases.json`` and per-case traces."""
    out = Path(out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    write_results_csv(out / "results.csv", result.rows)
    summary = result.report.to_dict()
    summary.update({"win_fraction": result.win_fraction(),
                    "mean_unseen_ours": result.mean_unseen("ours"),
                    "mean_unseen_nn": result.mean_unseen("nn")})
    (out / "convergence.json").write_text(json.dumps(summary, indent=1))
    case_ids = [r["case_id"] for r in result.methods("ours")]
    (out / "cases.json").write_text(json.dumps({"config": result.config.to_dict(), "cases": case_ids}, indent=1))
    for cid, trace in zip(case_ids, result.traces):
        trace.to_csv(out / "traces" / f"{cid}.csv")
    return out
