"""Shape completion by optimizing a latent code against a partial observation.

The decoder of a trained :class:`~meshcomplete.vae.MeshVAE` is inverted: starting
from some code ``z``, alternate a closed-form rigid alignment of the partial
points onto the decoded shape with gradient steps on ``z`` that pull the
corresponded decoded vertices toward the aligned points.

Point sets are row-major ``(P, 3)`` arrays throughout. A :class:`RigidTransform`
returned here maps partial-shape coordinates into the decoder's frame.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from . import autograd as ag
from .mesh import Correspondence, Mesh

__all__ = [
    "RigidTransform",
    "DegenerateConfigurationError",
    "solve_rigid",
    "dissimilarity",
    "CompletionConfig",
    "CompletionTrace",
    "CompletionResult",
    "complete",
    "refine_correspondence",
    "filter_correspondence",
    "correspondence_residuals",
    "fuse",
    "ShapeCompleter",
]


class DegenerateConfigurationError(ValueError):
    """Point configuration does not determine a rotation."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rotation ``R`` followed by translation ``t``: ``x -> R x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("R must be 3x3 and t a 3-vector")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def inverse(self):
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other):
        """``self`` after ``other``."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def to_dict(self):
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["R"]), np.asarray(d["t"]))


def solve_rigid(source, target, weights=None):
    """Weighted least-squares rigid transform taking ``source`` onto ``target``.

    Minimizes ``sum_p w_p |R s_p + t - x_p|^2`` over proper rotations (Kabsch):
    the SVD of the weighted cross-covariance with the reflection case flipped.
    """
    S = np.asarray(source, dtype=np.float64)
    X = np.asarray(target, dtype=np.float64)
    if S.shape != X.shape or S.ndim != 2 or S.shape[1] != 3:
        raise ValueError(f"source and target must both be (P, 3), got {S.shape} and {X.shape}")
    if len(S) < 3:
        raise DegenerateConfigurationError("degenerate configuration: fewer than 3 points")
    w = np.ones(len(S)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(S),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    s_bar = w @ S
    x_bar = w @ X
    Sc, Xc = S - s_bar, X - x_bar
    sv = np.linalg.svd(Sc * np.sqrt(w)[:, None], compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateConfigurationError("degenerate configuration: source points are collinear")
    H = (Sc * w[:, None]).T @ Xc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, x_bar - R @ s_bar)


def _vertices(x):
    return x.vertices if isinstance(x, Mesh) else np.asarray(x, dtype=np.float64)


def dissimilarity(full, partial_points, corr, T=None, use_weights=True):
    """``sqrt(sum_p w_p |X[ref_p] - T(y_p)|^2)`` over the corresponded pairs."""
    if len(corr) == 0:
        raise ValueError("empty correspondence")
    X = _vertices(full)
    Y = np.asarray(partial_points, dtype=np.float64)
    T = T or RigidTransform.identity()
    r = X[corr.reference_index] - T.apply(Y[corr.partial_index])
    w = corr.weight_array() if use_weights else np.ones(len(corr))
    return float(np.sqrt(np.sum(w * np.sum(r * r, axis=1))))


def correspondence_residuals(partial_points, completed, corr, T):
    """Distance from each transformed partial point to its corresponded vertex."""
    X = _vertices(completed)
    Y = np.asarray(partial_points, dtype=np.float64)
    return np.linalg.norm(T.apply(Y[corr.partial_index]) - X[corr.reference_index], axis=1)


def refine_correspondence(partial_points, current_full, T):
    """Re-pair every partial point with its nearest vertex of the current shape.

    When several points land on one vertex only the closest keeps it.
    """
    X = _vertices(current_full)
    Y = T.apply(partial_points)
    dist, idx = cKDTree(X).query(Y)
    order = np.lexsort((np.arange(len(Y)), dist))
    _, first = np.unique(idx[order], return_index=True)
    keep = np.sort(order[first])
    return Correspondence(np.column_stack([keep, idx[keep]]))


def filter_correspondence(partial_points, completed, corr, T, threshold=None):
    """Keep pairs whose residual against the completed shape is at most ``threshold``.

    The default threshold is twice the median residual.
    """
    res = correspondence_residuals(partial_points, completed, corr, T)
    if threshold is None:
        threshold = 2.0 * float(np.median(res)) if len(res) else 0.0
    return corr.subset(np.flatnonzero(res <= threshold))


def fuse(latents, model):
    """Decode the mean of several latent codes."""
    Z = np.asarray([np.asarray(z, dtype=np.float64) for z in latents])
    if Z.size == 0:
        raise ValueError("fuse needs at least one latent vector")
    if Z.ndim != 2:
        raise ValueError("latent vectors must share one dimension")
    return model.decode_mesh(Z.mean(axis=0))


# ---------------------------------------------------------------------------
# Alternating optimization
# ---------------------------------------------------------------------------

@dataclass
class CompletionConfig:
    """Settings of the alternating latent/rigid optimization.

    Attributes
    ----------
    max_iter : int
        Gradient steps on the latent code.
    learning_rate, momentum : float
        Plain gradient descent on ``z``.
    rigid_period : int
        Re-solve the rigid transform every this many iterations.
    init : {'random-prior', 'zero', 'provided'}
        Starting code; ``'provided'`` uses ``z0``.
    refine : {'none', 'plateau', 'fixed', 'both'}
        When to recompute the correspondence by closest vertices.
    refine_at : int
        Iteration of the fixed-schedule refinement.
    plateau_window, plateau_tol :
        Refine once the relative drop of the seen error over the last
        ``plateau_window`` iterations is below ``plateau_tol``.
    max_refinements : int
    use_weights : bool
        Weight residuals by the correspondence confidences.
    objective : {'norm', 'mean_sq'}
        Minimize the dissimilarity itself or its square divided by the weight sum.
    seed : int or None
        Seed of the random-prior initialization.
    """

    max_iter: int = 300
    learning_rate: float = 0.1
    momentum: float = 0.0
    rigid_period: int = 10
    init: str = "random-prior"
    z0: np.ndarray | None = None
    refine: str = "none"
    refine_at: int = 250
    plateau_window: int = 50
    plateau_tol: float = 1e-3
    max_refinements: int = 1
    use_weights: bool = False
    objective: str = "norm"
    seed: int | None = None

    def validate(self):
        if self.max_iter < 0 or self.rigid_period < 1 or self.plateau_window < 1:
            raise ValueError("iteration counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.init not in ("random-prior", "zero", "provided"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "provided" and self.z0 is None:
            raise ValueError("init='provided' needs z0")
        if self.refine not in ("none", "plateau", "fixed", "both"):
            raise ValueError(f"unknown refine mode {self.refine!r}")
        if self.objective not in ("norm", "mean_sq"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if d["z0"] is not None:
            d["z0"] = np.asarray(d["z0"]).tolist()
        return d


@dataclass
class CompletionTrace:
    """Per-iteration record of a completion run.

    Entry ``k`` describes the state the ``k``-th gradient step starts from, after
    that iteration's rigid and refinement updates; the last entry is the final state.
    ``seen_error`` is the (weighted) root-mean-square distance over the corresponded
    points, ``unseen_error`` the mean vertex distance to the ground truth over the
    unobserved vertices (NaN without ground truth).
    """

    seen_error: list = field(default_factory=list)
    unseen_error: list = field(default_factory=list)
    dissimilarity: list = field(default_factory=list)
    z_hash: list = field(default_factory=list)
    rotations: list = field(default_factory=list)
    translations: list = field(default_factory=list)
    n_pairs: list = field(default_factory=list)
    rigid_steps: list = field(default_factory=list)  # (iteration, seen before, seen after)
    refinements: list = field(default_factory=list)

    def __len__(self):
        return len(self.seen_error)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "seen_error", "unseen_error"])
            for k, (s, u) in enumerate(zip(self.seen_error, self.unseen_error)):
                w.writerow([k, repr(s), repr(u)])


@dataclass
class CompletionResult:
    mesh: Mesh
    """Completed shape in the partial shape's frame."""
    z: np.ndarray
    transform: RigidTransform
    """Maps partial coordinates into the decoder frame."""
    trace: CompletionTrace
    correspondence: Correspondence
    """Correspondence in use at the end (differs from the input after refinement)."""
    decoded: np.ndarray
    """Completed vertices in the decoder frame."""


def _z_hash(z):
    return hashlib.sha1(np.ascontiguousarray(z).tobytes()).hexdigest()[:12]


def _rms(r, w):
    return float(np.sqrt(np.sum(w * np.sum(r * r, axis=1)) / np.sum(w)))


def complete(partial_points, corr, model, config=None, *, ground_truth=None, mask=None):
    """Fit a decoded shape to ``partial_points`` under correspondence ``corr``.

    Parameters
    ----------
    partial_points : ndarray (P, 3)
    corr : Correspondence
        Pairs ``(point index, reference vertex)``.
    model : MeshVAE
        Fitted model whose decoder is inverted.
    config : CompletionConfig
    ground_truth : Mesh or ndarray (N, 3), optional
        True full shape in the partial's frame; enables ``unseen_error``.
    mask : ndarray of bool (N,), optional
        Observed reference vertices; defaults to the vertices in ``corr``.
    """
    config = config or CompletionConfig()
    config.validate()
    if len(corr) == 0:
        raise ValueError("empty correspondence")
    Y_all = np.asarray(partial_points, dtype=np.float64)
    if Y_all.ndim != 2 or Y_all.shape[1] != 3:
        raise ValueError("partial points must have shape (P, 3)")
    n = model.n_vertices_
    if corr.partial_index.max() >= len(Y_all) or corr.reference_index.max() >= n:
        raise ValueError("correspondence index out of range")
    if ground_truth is not None:
        ground_truth = _vertices(ground_truth)
        if mask is None:
            mask = np.zeros(n, dtype=bool)
            mask[corr.reference_index] = True
        unseen = ~np.asarray(mask, dtype=bool)

    d = model.latent_dim
    if config.init == "random-prior":
        z0 = np.random.default_rng(config.seed).normal(size=d)
    elif config.init == "zero":
        z0 = np.zeros(d)
    else:
        z0 = np.asarray(config.z0, dtype=np.float64).reshape(d)
    z = ag.Parameter(z0[None], "z")
    opt = ag.SGD([z], lr=config.learning_rate, momentum=config.momentum)
    trace = CompletionTrace()

    def bind(c):
        w = c.weight_array() if config.use_weights else np.ones(len(c))
        return Y_all[c.partial_index], c.reference_index, w

    Y, ref, w = bind(corr)
    T = None
    for k in range(config.max_iter + 1):
        Xt = ag.reshape(model.decode_tape(z), (n, 3))
        X = Xt.data
        if T is None:
            T = solve_rigid(Y, X[ref], w)
        elif k % config.rigid_period == 0:
            before = _rms(X[ref] - T.apply(Y), w)
            T = solve_rigid(Y, X[ref], w)
            trace.rigid_steps.append((k, before, _rms(X[ref] - T.apply(Y), w)))
        if k > 0 and _refine_due(config, k, trace):
            corr = refine_correspondence(Y_all, X, T)
            Y, ref, w = bind(corr)
            T = solve_rigid(Y, X[ref], w)
            trace.refinements.append(k)

        target = T.apply(Y)
        r = X[ref] - target
        trace.seen_error.append(_rms(r, w))
        trace.dissimilarity.append(float(np.sqrt(np.sum(w * np.sum(r * r, axis=1)))))
        if ground_truth is not None and unseen.any():
            back = T.inverse().apply(X)
            trace.unseen_error.append(float(np.linalg.norm(back[unseen] - ground_truth[unseen], axis=1).mean()))
        else:
            trace.unseen_error.append(float("nan"))
        trace.z_hash.append(_z_hash(z.data))
        trace.rotations.append(T.R.copy())
        trace.translations.append(T.t.copy())
        trace.n_pairs.append(len(ref))
        if k == config.max_iter:
            break

        resid = (ag.gather_rows(Xt, ref) - target) * np.sqrt(w)[:, None]
        if config.objective == "norm":
            loss = ag.l2_norm(resid)
        else:
            loss = ag.sum(resid * resid) * (1.0 / float(np.sum(w)))
        ag.backward(loss)
        opt.step()
        if not np.all(np.isfinite(z.data)):
            raise ag.NonFiniteError(f"latent code became non-finite at iteration {k}")

    mesh = Mesh(T.inverse().apply(X), model.faces_)
    return CompletionResult(mesh, z.data[0].copy(), T, trace, corr, X.copy())


def _refine_due(config, k, trace):
    if config.refine == "none" or len(trace.refinements) >= config.max_refinements:
        return False
    if config.refine in ("fixed", "both") and k == config.refine_at:
        return True
    if config.refine in ("plateau", "both"):
        W = config.plateau_window
        last = trace.refinements[-1] if trace.refinements else 0
        if k - last < W or len(trace.seen_error) < W + 1:
            return False
        old, new = trace.seen_error[-W - 1], trace.seen_error[-1]
        return old <= 0 or (old - new) / old < config.plateau_tol
    return False


class ShapeCompleter(BaseEstimator):
    """Estimator wrapper around :func:`complete` for a fixed fitted ``model``.

    Hyperparameters mirror :class:`CompletionConfig`. After ``fit`` the result is
    available as ``mesh_``, ``z_``, ``transform_``, ``trace_`` and ``correspondence_``.
    """

    def __init__(self, model=None, max_iter=300, learning_rate=0.1, momentum=0.0, rigid_period=10,
                 init="random-prior", z0=None, refine="none", refine_at=250, plateau_window=50,
                 plateau_tol=1e-3, max_refinements=1, use_weights=False, objective="norm",
                 random_state=None):
        self.model = model
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.rigid_period = rigid_period
        self.init = init
        self.z0 = z0
        self.refine = refine
        self.refine_at = refine_at
        self.plateau_window = plateau_window
        self.plateau_tol = plateau_tol
        self.max_refinements = max_refinements
        self.use_weights = use_weights
        self.objective = objective
        self.random_state = random_state

    def _config(self):
        params = self.get_params(deep=False)
        params.pop("model")
        params["seed"] = params.pop("random_state")
        return CompletionConfig(**params)

    def fit(self, X, y=None, *, correspondence, ground_truth=None, mask=None):
        if self.model is None:
            raise ValueError("model required")
        res = complete(X, correspondence, self.model, self._config(), ground_truth=ground_truth, mask=mask)
        self.result_ = res
        self.mesh_, self.z_, self.transform_ = res.mesh, res.z, res.transform
        self.trace_, self.correspondence_ = res.trace, res.correspondence
        return self

    def fit_predict(self, X, y=None, **kwargs):
        """Complete ``X`` and return the completed vertices in its frame."""
        return self.fit(X, **kwargs).mesh_.vertices


def with_seed(config, seed):
    return replace(config, seed=seed)
