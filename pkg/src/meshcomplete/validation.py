"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .mesh import Mesh


class TopologyError(ValueError):
    """Shapes do not share the expected mesh connectivity."""


def check_shapes(X, *, faces=None, n_vertices=None):
    """Coerce ``X`` into a float64 array ``(n, N, 3)`` plus its face array.

    ``X`` may be a single :class:`Mesh`, a sequence of meshes or an array. Meshes
    must all share one connectivity; arrays need ``faces`` from the caller.
    """
    if isinstance(X, Mesh):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Mesh):
        ref = X[0]
        for m in X[1:]:
            if not m.same_topology(ref):
                raise TopologyError("meshes do not share one topology")
        if faces is not None and not np.array_equal(np.asarray(faces), ref.faces):
            raise TopologyError("mesh topology does not match the trained topology")
        faces = ref.faces
        X = np.stack([m.vertices for m in X])
    else:
        if faces is None:
            raise ValueError("faces are required when shapes are given as arrays")
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
        if X.ndim == 2:
            X = X[None]
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"shapes must have shape (n, N, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("shapes contain non-finite values")
    if n_vertices is not None and X.shape[1] != n_vertices:
        raise TopologyError(f"expected {n_vertices} vertices, got {X.shape[1]}")
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size and faces.max() >= X.shape[1]:
        raise TopologyError("face indices exceed the vertex count")
    return X, faces


def check_latents(Z, latent_dim):
    """Float64 array ``(n, latent_dim)``; a single vector becomes one row."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None]
    if Z.ndim != 2 or Z.shape[1] != latent_dim:
        raise ValueError(f"latent codes must have dimension {latent_dim}, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("latent codes contain non-finite values")
    return Z
