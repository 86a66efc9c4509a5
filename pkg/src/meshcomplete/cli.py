"""Command-line entry point: ``meshcomplete <command> [options]``.

Every command accepts ``--config`` (JSON or TOML), ``--seed``, ``--out-dir``,
``--preset`` and ``--workers``; flags override values from the config file.
Each run writes ``manifest.json`` into its output directory. A manifest can be
passed back as ``--config`` to repeat the run.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .bench import BenchConfig, run_bench, write_bench
from .completion import CompletionConfig, complete, fuse
from .evaluation import nn_baseline, score
from .mesh import Mesh, load_mesh, save_mesh
from .partiality import (ShapeFamilyConfig, PartialShape, corrupt_correspondence, generate_family,
                         hyperplane_cut, remove_patches, ring_viewpoints, virtual_scan)
from .validation import TopologyError
from .vae import PRESETS, MeshVAE

logger = logging.getLogger("meshcomplete")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# config sections and the flags that override them
MODEL_FLAGS = ("M", "latent_dim", "prior_weight", "learning_rate", "batch_size", "n_iter")
COMPLETION_FLAGS = ("max_iter", "refine", "refine_at", "rigid_period", "init")


class UsageError(Exception):
    """Invalid combination of command-line arguments."""


@dataclass
class RunManifest:
    """Record of one CLI invocation."""

    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_time_s: float = 0.0
    version: str = __version__

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, default=_json_default))
        return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def version_string():
    """Package version, with the short commit hash appended when available."""
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def file_hash(path):
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        h.update(q.read_bytes())
    return h.hexdigest()


def load_config(path):
    """Read a JSON or TOML config; a run manifest yields its config snapshot."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    if p.suffix.lower() == ".toml":
        with open(p, "rb") as fh:
            cfg = tomli.load(fh)
    else:
        cfg = json.loads(p.read_text())
    if "command" in cfg and "config" in cfg:
        cfg = cfg["config"]
    return cfg


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON or TOML config file (or a previous manifest.json)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out-dir", help="output directory (default: runs/<command>)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model hyperparameter preset")
    p.add_argument("--workers", type=int, help="parallel workers (default 1)")
    p.add_argument("--progress", type=int, help="log training loss every k iterations")


def _model_flags(p):
    p.add_argument("--M", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--prior-weight", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-iter", type=int)


def _completion_flags(p):
    p.add_argument("--max-iter", type=int)
    p.add_argument("--refine", choices=["none", "plateau", "fixed", "both"])
    p.add_argument("--refine-at", type=int)
    p.add_argument("--rigid-period", type=int)
    p.add_argument("--init", choices=["random-prior", "zero", "provided"])


def build_parser():
    parser = argparse.ArgumentParser(prog="meshcomplete", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape family")
    _common(p)
    p.add_argument("--n-samples", type=int)

    p = sub.add_parser("train", help="train the autoencoder on a generated family")
    _common(p)
    p.add_argument("--data", required=True, help="directory written by gen-data")
    _model_flags(p)

    p = sub.add_parser("sample", help="decode random latent codes")
    _common(p)
    p.add_argument("--model", help="trained model directory")
    p.add_argument("--n", type=int, default=4)

    p = sub.add_parser("interpolate", help="decode a latent interpolation between two meshes")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--a", required=True, help="first mesh")
    p.add_argument("--b", required=True, help="second mesh")
    p.add_argument("--steps", type=int, default=5)

    p = sub.add_parser("gen-partial", help="make a partial shape from a mesh")
    _common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--generator", choices=["hyperplane_cut", "virtual_scan", "remove_patches"],
                   default="hyperplane_cut")
    p.add_argument("--view", type=int, default=0, help="viewpoint index for virtual_scan")
    p.add_argument("--corruption", type=float, default=0.0, help="fraction of permuted correspondences")

    p = sub.add_parser("complete", help="complete a partial shape")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--partial", required=True, help="partial .ply with its .json sidecar")
    p.add_argument("--ground-truth", help="full mesh for unseen-error tracking")
    _completion_flags(p)

    p = sub.add_parser("fuse", help="complete several views and fuse their latent codes")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--partial", required=True, nargs="+")
    _completion_flags(p)

    p = sub.add_parser("eval", help="score a completed mesh")
    _common(p)
    p.add_argument("--completed", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--partial", required=True, help="partial shape supplying the visibility mask")
    p.add_argument("--nn-data", help="gen-data directory; also score the nearest-neighbor baseline")

    p = sub.add_parser("bench", help="run the completion benchmark against the NN baseline")
    _common(p)
    p.add_argument("--model", help="trained model (trained from the config when omitted)")
    p.add_argument("--n-shapes", type=int)
    p.add_argument("--corruption", type=float)
    _completion_flags(p)
    _model_flags(p)
    return parser


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def resolve(args):
    """Merge the config file with command-line overrides into one snapshot."""
    cfg = load_config(args.config)
    out = {
        "seed": cfg.get("seed", 0),
        "preset": cfg.get("preset", "full"),
        "workers": cfg.get("workers", 1),
        "progress": cfg.get("progress", 0),
        "family": dict(cfg.get("family", {})),
        "model": dict(cfg.get("model", {})),
        "completion": dict(cfg.get("completion", {})),
        "bench": dict(cfg.get("bench", {})),
    }
    for key in ("seed", "preset", "workers", "progress"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    if out["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {out['preset']!r}")
    for key in MODEL_FLAGS:
        if getattr(args, key, None) is not None:
            out["model"][key] = getattr(args, key)
    for key in COMPLETION_FLAGS:
        if getattr(args, key, None) is not None:
            out["completion"][key] = getattr(args, key)
    if getattr(args, "n_samples", None) is not None:
        out["family"]["n_samples"] = args.n_samples
    for key in ("n_shapes", "corruption"):
        if args.command == "bench" and getattr(args, key, None) is not None:
            out["bench"][key] = getattr(args, key)
    out["family"].setdefault("seed", out["seed"])
    return out


def _family_config(cfg):
    try:
        return ShapeFamilyConfig.from_dict(cfg["family"])
    except TypeError as exc:
        raise UsageError(f"bad family config: {exc}") from exc


def _completion_config(cfg, seed):
    d = dict(cfg["completion"])
    d.setdefault("seed", seed)
    try:
        return CompletionConfig(**d)
    except TypeError as exc:
        raise UsageError(f"bad completion config: {exc}") from exc


def _new_model(cfg):
    try:
        return MeshVAE.from_preset(cfg["preset"], random_state=cfg["seed"], verbose=cfg["progress"], **cfg["model"])
    except TypeError as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def _require_model(args):
    if not getattr(args, "model", None):
        raise UsageError("model required")
    return MeshVAE.load(args.model)


def _load_family_dir(path):
    path = Path(path)
    meta = path / "family.json"
    if not meta.exists():
        raise FileNotFoundError(f"not a gen-data directory: {path}")
    train = [load_mesh(p) for p in sorted((path / "train").glob("*.obj"))]
    test = [load_mesh(p) for p in sorted((path / "test").glob("*.obj"))]
    if not train:
        raise ValueError(f"no training meshes in {path / 'train'}")
    return train, test


def _check_topology(model, mesh):
    if mesh.n_vertices != model.n_vertices_ or not np.array_equal(mesh.faces, model.faces_):
        raise TopologyError("topology mismatch between checkpoint and mesh")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg, out, man):
    fam = generate_family(_family_config(cfg))
    for split, shapes in (("train", fam.train), ("test", fam.test)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(shapes):
            save_mesh(m, out / split / f"{i:04d}.obj")
    save_mesh(fam.template, out / "template.obj")
    params = {"train": fam.train_params, "test": fam.test_params}
    (out / "family.json").write_text(json.dumps({"config": fam.config.to_dict(), "params": params},
                                                indent=1, default=_json_default))
    man.outputs += [str(out / "train"), str(out / "test"), str(out / "template.obj"), str(out / "family.json")]
    logger.info("wrote %d train and %d test shapes", len(fam.train), len(fam.test))


def cmd_train(args, cfg, out, man):
    train, _ = _load_family_dir(args.data)
    man.inputs[args.data] = file_hash(args.data)
    model = _new_model(cfg).fit(train)
    model.save(out / "model")
    man.outputs.append(str(out / "model"))
    logger.info("final loss %.6g", model.loss_curve_[-1][1] if model.loss_curve_ else float("nan"))


def cmd_sample(args, cfg, out, man):
    model = _require_model(args)
    man.inputs[args.model] = file_hash(args.model)
    for i, v in enumerate(model.sample(args.n, random_state=cfg["seed"])):
        p = out / f"sample_{i:03d}.obj"
        save_mesh(Mesh(v, model.faces_), p)
        man.outputs.append(str(p))


def cmd_interpolate(args, cfg, out, man):
    model = _require_model(args)
    a, b = load_mesh(args.a), load_mesh(args.b)
    for m in (a, b):
        _check_topology(model, m)
    man.inputs.update({args.model: file_hash(args.model), args.a: file_hash(args.a), args.b: file_hash(args.b)})
    za, zb = model.transform([a, b])
    for k, alpha in enumerate(np.linspace(0.0, 1.0, args.steps)):
        p = out / f"interp_{k:03d}.obj"
        save_mesh(model.interpolate(za, zb, alpha), p)
        man.outputs.append(str(p))


def cmd_gen_partial(args, cfg, out, man):
    mesh = load_mesh(args.mesh)
    man.inputs[args.mesh] = file_hash(args.mesh)
    seed = cfg["seed"]
    if args.generator == "hyperplane_cut":
        ps = hyperplane_cut(mesh, seed=seed)
    elif args.generator == "virtual_scan":
        views = ring_viewpoints(mesh)
        ps = virtual_scan(mesh, views[args.view % len(views)])
    else:
        ps = remove_patches(mesh, seed=seed)
    if args.corruption > 0:
        ps = corrupt_correspondence(ps, args.corruption, seed=seed)
    p = ps.save(out / "partial.ply")
    man.outputs += [str(p), str(p.with_suffix(".json"))]
    logger.info("%d of %d vertices observed", ps.n_points, mesh.n_vertices)


def _run_completion(model, ps, config, gt=None):
    return complete(ps.points, ps.correspondence, model, config, ground_truth=gt, mask=ps.visibility_mask)


def cmd_complete(args, cfg, out, man):
    model = _require_model(args)
    ps = PartialShape.load(args.partial)
    man.inputs.update({args.model: file_hash(args.model), args.partial: file_hash(args.partial)})
    gt = None
    if args.ground_truth:
        gt = load_mesh(args.ground_truth)
        _check_topology(model, gt)
        man.inputs[args.ground_truth] = file_hash(args.ground_truth)
    res = _run_completion(model, ps, _completion_config(cfg, cfg["seed"]), gt)
    save_mesh(res.mesh, out / "completed.obj")
    res.trace.to_csv(out / "trace.csv")
    summary = {"z": res.z, "transform": res.transform.to_dict(),
               "final_seen_error": res.trace.seen_error[-1], "final_unseen_error": res.trace.unseen_error[-1],
               "init_hash": res.trace.z_hash[0]}
    (out / "result.json").write_text(json.dumps(summary, indent=1, default=_json_default))
    man.outputs += [str(out / n) for n in ("completed.obj", "trace.csv", "result.json")]


def cmd_fuse(args, cfg, out, man):
    model = _require_model(args)
    man.inputs[args.model] = file_hash(args.model)
    latents = []
    base = _completion_config(cfg, cfg["seed"])
    for k, path in enumerate(args.partial):
        ps = PartialShape.load(path)
        man.inputs[path] = file_hash(path)
        seed = None if base.seed is None else base.seed + k
        res = _run_completion(model, ps, CompletionConfig(**{**base.to_dict(), "seed": seed}))
        save_mesh(res.mesh, out / f"view_{k:02d}.obj")
        latents.append(res.z)
    fused = fuse(latents, model)
    save_mesh(fused, out / "fused.obj")
    (out / "latents.json").write_text(json.dumps({"views": latents, "fused": np.mean(latents, axis=0)},
                                                 default=_json_default))
    man.outputs += [str(out / f"view_{k:02d}.obj") for k in range(len(latents))]
    man.outputs += [str(out / "fused.obj"), str(out / "latents.json")]


def cmd_eval(args, cfg, out, man):
    completed, gt = load_mesh(args.completed), load_mesh(args.ground_truth)
    ps = PartialShape.load(args.partial)
    if not completed.same_topology(gt):
        raise TopologyError("completed and ground-truth meshes differ in topology")
    for p in (args.completed, args.ground_truth, args.partial):
        man.inputs[p] = file_hash(p)
    report = {"ours": score(completed, gt, ps.visibility_mask).to_dict()}
    if args.nn_data:
        train, _ = _load_family_dir(args.nn_data)
        nn = nn_baseline(ps, train)
        report["nn"] = score(nn.mesh, gt, ps.visibility_mask).to_dict()
        report["nn"]["index"] = nn.index
    (out / "scores.json").write_text(json.dumps(report, indent=1, default=_json_default))
    man.outputs.append(str(out / "scores.json"))


def cmd_bench(args, cfg, out, man):
    fam = generate_family(_family_config(cfg))
    if args.model:
        model = MeshVAE.load(args.model)
        man.inputs[args.model] = file_hash(args.model)
        _check_topology(model, fam.template)
    else:
        model = _new_model(cfg).fit(fam.train)
        model.save(out / "model")
        man.outputs.append(str(out / "model"))
    bc = dict(cfg["bench"])
    bc.setdefault("seed", cfg["seed"])
    bc["completion"] = {**bc.get("completion", {"max_iter": 1000}), **cfg["completion"]}
    try:
        config = BenchConfig.from_dict(bc)
    except TypeError as exc:
        raise UsageError(f"bad bench config: {exc}") from exc
    result = run_bench(model, fam, config, workers=cfg["workers"])
    write_bench(result, out)
    man.outputs += [str(out / n) for n in ("results.csv", "convergence.json", "cases.json", "traces")]
    logger.info("mean unseen error: ours %.4f, nn %.4f; ours wins %.0f%% of cases",
                result.mean_unseen("ours"), result.mean_unseen("nn"), 100 * result.win_fraction())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "gen-partial": cmd_gen_partial,
    "complete": cmd_complete,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def _setup_logging(out):
    logger.setLevel(logging.INFO)
    pkg = logging.getLogger("meshcomplete")
    for h in list(pkg.handlers):
        pkg.removeHandler(h)
        h.close()
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(logging.Formatter("%(message)s"))
    log = logging.FileHandler(out / "log.txt", mode="w")
    log.setFormatter(logging.Formatter("%(asctime)s\t%(levelname)s\t%(name)s\t%(message)s"))
    pkg.addHandler(err)
    pkg.addHandler(log)
    return log


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.perf_counter()
    handler = None
    try:
        cfg = resolve(args)
        out = Path(args.out_dir or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        handler = _setup_logging(out)
        man = RunManifest(args.command, cfg, cfg["seed"], version=version_string())
        COMMANDS[args.command](args, cfg, out, man)
        man.wall_time_s = round(time.perf_counter() - started, 3)
        man.write(out)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if handler is not None:
            logging.getLogger("meshcomplete").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
