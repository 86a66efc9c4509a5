"""Graph-convolutional variational autoencoder over fixed-topology meshes.

:class:`MeshVAE` follows the scikit-learn estimator conventions: hyperparameters
go to ``__init__``, ``fit`` learns from a stack of shapes, ``transform`` maps
shapes to posterior means and ``inverse_transform`` decodes latent codes.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .feast_conv import ACTIVATIONS, Dense, FeaStConv
from .mesh import Mesh, build_neighborhoods, shape_radius
from .validation import TopologyError, check_latents, check_shapes

logger = logging.getLogger(__name__)

__all__ = [
    "MeshVAE",
    "EncoderOutput",
    "PRESETS",
    "TrainingDivergedError",
    "kl_divergence",
]

# Full-scale hyperparameters, a desk-scale preset for synthetic families, and
# the smaller network used for faces.
PRESETS = {
    "full": dict(M=8, latent_dim=128, prior_weight=1e-8, learning_rate=1e-4, batch_size=2,
                  n_iter=300_000, ring=2, encoder_widths=(16, 32, 64), decoder_widths=(32, 16)),
    "desk": dict(M=4, latent_dim=8, prior_weight=1e-2, learning_rate=1e-3, batch_size=4,
                 n_iter=5000, ring=2, encoder_widths=(16, 32, 64), decoder_widths=(32, 16), pooling="flatten"),
    "face": dict(M=8, latent_dim=32, prior_weight=1e-8, learning_rate=1e-4, batch_size=2,
                 n_iter=300_000, ring=2, encoder_widths=(16, 32), decoder_widths=(16,)),
}


class TrainingDivergedError(FloatingPointError):
    """Training hit a non-finite loss; parameters were rolled back."""

    def __init__(self, iteration, message):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class EncoderOutput:
    """Diagonal Gaussian posterior parameters, one row per shape."""

    mu: np.ndarray
    log_var: np.ndarray


def kl_divergence(mu, log_var):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    return 0.5 * np.sum(mu * mu + np.exp(log_var) - log_var - 1.0, axis=-1)


def _kl_tape(mu, log_var):
    inner = mu * mu + ag.exp(log_var) - log_var - 1.0
    return ag.sum(inner, axis=1) * 0.5


class _Network:
    """Encoder and decoder stacks; built once the topology is known."""

    def __init__(self, n_vertices, graph, *, M, latent_dim, encoder_widths, decoder_widths,
                 decoder_seed_width, include_self, activation, pooling, rng):
        self.n = n_vertices
        self.graph = graph
        self.latent_dim = latent_dim
        self.act = ACTIVATIONS[activation]
        self.seed_width = decoder_seed_width
        self.pooling = pooling
        seeds = iter(rng.randint(0, 2**31 - 1, size=64))

        widths = (3,) + tuple(encoder_widths)
        self.enc_convs = [
            FeaStConv(widths[k], widths[k + 1], M, include_self, rng=next(seeds), name=f"encoder.conv{k}")
            for k in range(len(widths) - 1)
        ]
        pooled = widths[-1] if pooling == "mean" else widths[-1] * n_vertices
        self.enc_mu = Dense(pooled, latent_dim, rng=next(seeds), name="encoder.mu")
        self.enc_logvar = Dense(pooled, latent_dim, rng=next(seeds), name="encoder.log_var")
        self.dec_expand = Dense(latent_dim, n_vertices * decoder_seed_width, rng=next(seeds), name="decoder.expand")
        widths = (decoder_seed_width,) + tuple(decoder_widths) + (3,)
        self.dec_convs = [
            FeaStConv(widths[k], widths[k + 1], M, include_self, rng=next(seeds), name=f"decoder.conv{k}")
            for k in range(len(widths) - 1)
        ]

    def modules(self):
        return self.enc_convs + [self.enc_mu, self.enc_logvar, self.dec_expand] + self.dec_convs

    def decoder_modules(self):
        return [self.dec_expand] + self.dec_convs

    def named_parameters(self):
        return [np_ for m in self.modules() for np_ in m.named_parameters()]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def encode(self, x, batch):
        """``x``: Tensor ``(batch * N, 3)`` -> ``(mu, log_var)`` Tensors ``(batch, d)``."""
        h = x
        for conv in self.enc_convs:
            h = self.act(conv(h, self.graph, batch))
        if self.pooling == "mean":
            pooled = ag.mean(ag.reshape(h, (batch, self.n, h.shape[1])), axis=1)
        else:
            pooled = ag.reshape(h, (batch, self.n * h.shape[1]))
        return self.enc_mu(pooled), self.enc_logvar(pooled)

    def decode(self, z):
        """``z``: Tensor ``(batch, d)`` -> Tensor ``(batch, N, 3)``."""
        batch = z.shape[0]
        h = ag.reshape(self.dec_expand(z), (batch * self.n, self.seed_width))
        for k, conv in enumerate(self.dec_convs):
            h = self.act(h)
            h = conv(h, self.graph, batch)
        return ag.reshape(h, (batch, self.n, 3))


class MeshVAE(TransformerMixin, BaseEstimator):
    """Variational autoencoder for shapes sharing one triangle-mesh topology.

    Parameters
    ----------
    M : int
        Weight matrices per convolution layer.
    latent_dim : int
        Dimension of the latent code.
    prior_weight : float
        Weight of the KL prior term; total loss is ``L_r + prior_weight * L_p``.
    encoder_widths, decoder_widths : tuple of int
        Hidden widths of the encoder convolutions and of the decoder convolutions
        preceding the final 3-channel layer.
    decoder_seed_width : int
        Per-vertex width produced by the dense layer that expands the latent code.
    ring : int
        Neighborhood order of the convolutions.
    include_self : bool
        Include the center vertex in its own neighborhood.
    activation : {'elu', 'identity'}
        Nonlinearity between layers.
    pooling : {'mean', 'flatten'}
        How per-vertex encoder features become one vector: averaged over
        vertices, or concatenated in vertex order.
    recon : {'norm', 'rms'}
        ``'norm'`` is the Euclidean norm of the whole residual; ``'rms'`` divides it
        by ``sqrt(N)``.
    learning_rate, batch_size, n_iter :
        ADAM step size, shapes per step and number of steps.
    noise_scale : float
        Std of the Gaussian vertex noise, relative to the shape radius.
    translation_range : float
        Half-width of the uniform x-y translation, relative to the shape radius.
    scale_range : tuple of float
        Bounds of the uniform scaling about the centroid.
    random_state : int, RandomState or None
    verbose : int
        Log the loss every ``verbose`` iterations (0 = silent).

    Attributes
    ----------
    faces_ : ndarray (F, 3)
    n_vertices_ : int
    graph_ : NeighborhoodGraph
    loss_curve_ : list of (iteration, L, L_r, L_p)
    """

    def __init__(self, M=8, latent_dim=128, prior_weight=1e-8, encoder_widths=(16, 32, 64),
                 decoder_widths=(32, 16), decoder_seed_width=16, ring=2, include_self=True,
                 activation="elu", pooling="mean", recon="norm", learning_rate=1e-4, batch_size=2, n_iter=300_000,
                 noise_scale=0.005, translation_range=0.1, scale_range=(0.9, 1.1),
                 random_state=None, verbose=0):
        self.M = M
        self.latent_dim = latent_dim
        self.prior_weight = prior_weight
        self.encoder_widths = encoder_widths
        self.decoder_widths = decoder_widths
        self.decoder_seed_width = decoder_seed_width
        self.ring = ring
        self.include_self = include_self
        self.activation = activation
        self.pooling = pooling
        self.recon = recon
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.noise_scale = noise_scale
        self.translation_range = translation_range
        self.scale_range = scale_range
        self.random_state = random_state
        self.verbose = verbose

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    # ------------------------------------------------------------------ setup

    def _validate_params(self):
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be non-negative")
        for name in ("M", "latent_dim", "ring", "batch_size", "decoder_seed_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_iter < 0:
            raise ValueError("n_iter must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pooling not in ("mean", "flatten"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.recon not in ("norm", "rms"):
            raise ValueError(f"unknown recon {self.recon!r}")

    def _initialize(self, faces, n_vertices, rng):
        self.faces_ = np.asarray(faces, dtype=np.int64)
        self.n_vertices_ = n_vertices
        template = Mesh(np.zeros((n_vertices, 3)), self.faces_)
        self.topology_hash_ = template.topology_hash()
        self.graph_ = build_neighborhoods(template, self.ring)
        self.net_ = _Network(
            n_vertices, self.graph_, M=self.M, latent_dim=self.latent_dim,
            encoder_widths=tuple(self.encoder_widths), decoder_widths=tuple(self.decoder_widths),
            decoder_seed_width=self.decoder_seed_width, include_self=self.include_self,
            activation=self.activation, pooling=self.pooling, rng=rng,
        )

    def _recon_tape(self, pred, target):
        r = ag.l2_norm(pred - target, axis=(1, 2))
        return r * (1.0 / np.sqrt(self.n_vertices_)) if self.recon == "rms" else r

    # ------------------------------------------------------------------ training

    def _augment(self, X, rng):
        out = np.empty_like(X)
        lo, hi = self.scale_range
        for k, shape in enumerate(X):
            radius = shape_radius(shape)
            center = shape.mean(axis=0)
            s = rng.uniform(lo, hi)
            t = np.zeros(3)
            t[:2] = rng.uniform(-self.translation_range, self.translation_range, size=2) * radius
            noise = rng.normal(0.0, self.noise_scale * radius, size=shape.shape)
            out[k] = (shape - center) * s + center + t + noise
        return out

    def fit(self, X, y=None, *, faces=None):
        """Train on shapes ``X`` (list of :class:`Mesh` or array ``(n, N, 3)``)."""
        self._validate_params()
        X, faces = check_shapes(X, faces=faces)
        rng = check_random_state(self.random_state)
        self._initialize(faces, X.shape[1], rng)
        self.loss_curve_ = []
        self._train(X, rng)
        return self

    def _train(self, X, rng):
        params = self.net_.parameters()
        opt = ag.Adam(params, lr=self.learning_rate)
        self.optimizer_ = opt
        n, B = len(X), self.batch_size
        order = rng.permutation(n)
        cursor = 0
        good = [p.data.copy() for p in params]
        started = time.perf_counter()
        for it in range(1, self.n_iter + 1):
            idx = []
            while len(idx) < B:
                if cursor == n:
                    order = rng.permutation(n)
                    cursor = 0
                take = min(B - len(idx), n - cursor)
                idx.extend(order[cursor:cursor + take].tolist())
                cursor += take
            batch = self._augment(X[idx], rng)
            eps = rng.normal(size=(B, self.latent_dim))
            try:
                loss, lr_, lp_ = self._batch_loss(batch, eps)
                ag.backward(loss)
            except ag.NonFiniteError as exc:
                self._rollback(params, good)
                raise TrainingDivergedError(it, str(exc)) from exc
            opt.step()
            if not all(np.all(np.isfinite(p.data)) for p in params):
                self._rollback(params, good)
                raise TrainingDivergedError(it, "parameters became non-finite")
            for g, p in zip(good, params):
                g[...] = p.data
            self.loss_curve_.append((it, loss.item(), lr_, lp_))
            if self.verbose and it % self.verbose == 0:
                logger.info("iter %d  L=%.6g  L_r=%.6g  L_p=%.6g  (%.1fs)",
                            it, loss.item(), lr_, lp_, time.perf_counter() - started)

    def _rollback(self, params, good):
        for p, g in zip(params, good):
            p.data[...] = g
            p.zero_grad()

    def _batch_loss(self, batch, eps):
        B = len(batch)
        target = batch
        x = ag.Tensor(batch.reshape(B * self.n_vertices_, 3))
        mu, log_var = self.net_.encode(x, B)
        z = mu + ag.exp(log_var * 0.5) * eps
        pred = self.net_.decode(z)
        rec = self._recon_tape(pred, target)
        kl = _kl_tape(mu, log_var)
        loss = ag.mean(rec + kl * self.prior_weight)
        if not np.isfinite(loss.item()):
            raise ag.NonFiniteError("loss is not finite")
        return loss, float(rec.data.mean()), float(kl.data.mean())

    # ------------------------------------------------------------------ inference

    def _check_input(self, X):
        check_is_fitted(self, "net_")
        X, faces = check_shapes(X, faces=self.faces_, n_vertices=self.n_vertices_)
        if not np.array_equal(faces, self.faces_):
            raise TopologyError("mesh topology does not match the trained topology")
        return X

    def encode(self, X):
        """Posterior parameters for each shape in ``X``."""
        X = self._check_input(X)
        mus, lvs = [], []
        for start in range(0, len(X), 32):
            chunk = X[start:start + 32]
            B = len(chunk)
            with _no_grad(self):
                mu, lv = self.net_.encode(ag.Tensor(chunk.reshape(B * self.n_vertices_, 3)), B)
            mus.append(mu.data)
            lvs.append(lv.data)
        return EncoderOutput(np.concatenate(mus), np.concatenate(lvs))

    def transform(self, X):
        """Posterior means, shape ``(n, latent_dim)``."""
        return self.encode(X).mu

    def decode(self, Z):
        """Vertex positions ``(n, N, 3)`` for latent codes ``(n, latent_dim)``."""
        check_is_fitted(self, "net_")
        Z = check_latents(Z, self.latent_dim)
        out = []
        for start in range(0, len(Z), 32):
            with _no_grad(self):
                out.append(self.net_.decode(ag.Tensor(Z[start:start + 32])).data)
        return np.concatenate(out) if out else np.zeros((0, self.n_vertices_, 3))

    def inverse_transform(self, Z):
        return self.decode(Z)

    def decode_mesh(self, z):
        """Decode one latent vector into a :class:`Mesh`."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 1:
            raise ValueError("decode_mesh expects a single latent vector")
        return Mesh(self.decode(z[None])[0], self.faces_)

    def decode_tape(self, z):
        """Differentiable decode of a ``(batch, d)`` Tensor for latent-space optimization.

        Network weights are treated as constants.
        """
        check_is_fitted(self, "net_")
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dimension {z.shape[-1]} != {self.latent_dim}")
        with _no_grad(self):
            return self.net_.decode(z)

    def reconstruct(self, X):
        """Decode of the posterior mean of each shape."""
        return self.decode(self.transform(X))

    def loss(self, X):
        """Per-shape ``(L, L_r, L_p)`` using the posterior mean as the code."""
        X = self._check_input(X)
        enc = self.encode(X)
        pred = self.decode(enc.mu)
        rec = np.linalg.norm((pred - X).reshape(len(X), -1), axis=1)
        if self.recon == "rms":
            rec = rec / np.sqrt(self.n_vertices_)
        kl = kl_divergence(enc.mu, enc.log_var)
        return rec + self.prior_weight * kl, rec, kl

    def score(self, X, y=None):
        """Negative mean reconstruction loss (higher is better)."""
        return -float(np.mean(self.loss(X)[1]))

    def sample(self, n_samples=1, random_state=None):
        """Decode codes drawn from the standard normal prior."""
        rng = check_random_state(random_state)
        return self.decode(rng.normal(size=(n_samples, self.latent_dim)))

    def interpolate(self, z_a, z_b, alpha):
        """Decode of ``(1 - alpha) * z_a + alpha * z_b``."""
        z_a, z_b = _pair(z_a, z_b, self.latent_dim)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        return self.decode_mesh((1.0 - alpha) * z_a + alpha * z_b)

    def latent_arithmetic(self, z_base, z_plus, z_minus, alpha=1.0):
        """Decode of ``z_base + alpha * (z_plus - z_minus)``."""
        z_base = check_latents(z_base, self.latent_dim)[0]
        z_plus, z_minus = _pair(z_plus, z_minus, self.latent_dim)
        return self.decode_mesh(z_base + alpha * (z_plus - z_minus))

    # ------------------------------------------------------------------ persistence

    def named_parameters(self):
        check_is_fitted(self, "net_")
        return dict(self.net_.named_parameters())

    def save(self, directory):
        """Write ``checkpoint.json``, ``config.json`` and ``loss.csv`` into ``directory``."""
        check_is_fitted(self, "net_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ag.save_checkpoint(d / "checkpoint.json", self.named_parameters(),
                           metadata={"topology_hash": self.topology_hash_})
        config = {
            "params": _jsonable(self.get_params()),
            "n_vertices": self.n_vertices_,
            "faces": self.faces_.tolist(),
            "topology_hash": self.topology_hash_,
        }
        (d / "config.json").write_text(json.dumps(config, indent=1))
        write_loss_csv(d / "loss.csv", getattr(self, "loss_curve_", []))
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / "checkpoint.json").exists():
            raise FileNotFoundError(f"no checkpoint in {d}")
        config = json.loads((d / "config.json").read_text())
        params = config["params"]
        for key in ("encoder_widths", "decoder_widths", "scale_range"):
            params[key] = tuple(params[key])
        model = cls(**params)
        model._validate_params()
        model._initialize(np.asarray(config["faces"]), config["n_vertices"], check_random_state(0))
        tensors, meta = ag.load_checkpoint(d / "checkpoint.json")
        if meta.get("topology_hash", model.topology_hash_) != model.topology_hash_:
            raise TopologyError("checkpoint topology does not match its config")
        named = dict(model.net_.named_parameters())
        if set(named) != set(tensors):
            raise ValueError("checkpoint tensors do not match the network layout")
        for name, p in named.items():
            p.assign(tensors[name])
        model.loss_curve_ = read_loss_csv(d / "loss.csv") if (d / "loss.csv").exists() else []
        return model


class _no_grad:
    """Treat network weights as constants for the duration of a block."""

    def __init__(self, model):
        self.params = model.net_.parameters()

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True


def _pair(a, b, d):
    a = check_latents(a, d)[0]
    b = check_latents(b, d)[0]
    return a, b


def _jsonable(params):
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, np.integer):
            v = int(v)
        if k == "random_state" and not (v is None or isinstance(v, int)):
            v = None
        out[k] = v
    return out


def write_loss_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "L", "L_r", "L_p"])
        for it, total, rec, prior in curve:
            w.writerow([it, repr(total), repr(rec), repr(prior)])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows]
