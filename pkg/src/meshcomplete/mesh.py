"""Fixed-topology triangle meshes, vertex neighborhoods and ASCII mesh I/O.

Vertex coordinates are stored row-wise as an ``(N, 3)`` array, so ``mesh.vertices[i]``
is the position of vertex ``i``.
"""
from __future__ import annotations

import hashlib
import logging
import re
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

__all__ = [
    "Mesh",
    "NeighborhoodGraph",
    "Correspondence",
    "MeshParseError",
    "build_neighborhoods",
    "receptive_field",
    "load_mesh",
    "save_mesh",
    "shape_radius",
    "signed_volume",
    "is_watertight",
    "icosphere",
    "cylinder",
    "unit_cube",
]


class MeshParseError(ValueError):
    """Raised when a mesh file cannot be parsed."""


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with fixed connectivity.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
        Vertex positions.
    faces : array_like of int, shape (F, 3)
        Vertex indices of each triangle, counter-clockwise seen from outside.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must have shape (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertices contain non-finite values")
        n = v.shape[0]
        if f.size and (f.min() < 0 or f.max() >= n):
            raise ValueError(f"face index out of range [0, {n})")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if np.any(degenerate):
            raise ValueError(f"degenerate face at index {int(np.argmax(degenerate))}")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def with_vertices(self, vertices):
        """Same connectivity, new vertex positions."""
        return Mesh(vertices, self.faces)

    def edges(self):
        """Unique undirected edges as an ``(E, 2)`` array with ``e[:, 0] < e[:, 1]``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def adjacency(self):
        """Symmetric sparse 0/1 edge adjacency matrix."""
        e = self.edges()
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    def topology_hash(self):
        """Stable hash of ``(N, faces)``; identifies a connectivity."""
        h = hashlib.sha256()
        h.update(np.int64(self.n_vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def same_topology(self, other):
        return self.n_vertices == other.n_vertices and np.array_equal(self.faces, other.faces)


@dataclass(frozen=True, eq=False)
class NeighborhoodGraph:
    """Per-vertex k-ring neighborhoods.

    ``neighbors[i]`` is the sorted array of vertices within ``ring_order`` edge hops
    of ``i``, excluding ``i`` itself.
    """

    ring_order: int
    neighbors: tuple
    _edge_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self):
        return len(self.neighbors)

    def degrees(self, include_self=False):
        d = np.array([len(nb) for nb in self.neighbors], dtype=np.int64)
        return d + 1 if include_self else d

    def edge_index(self, include_self=True):
        """Flattened ``(centers, members)`` index arrays over all neighborhoods.

        With ``include_self`` each vertex is also listed as a member of its own
        neighborhood (placed first).
        """
        key = bool(include_self)
        if key not in self._edge_cache:
            centers, members = [], []
            for i, nb in enumerate(self.neighbors):
                if include_self:
                    centers.append(i)
                    members.append(i)
                centers.extend([i] * len(nb))
                members.extend(nb.tolist())
            pair = (np.asarray(centers, dtype=np.int64), np.asarray(members, dtype=np.int64))
            for a in pair:
                a.setflags(write=False)
            self._edge_cache[key] = pair
        return self._edge_cache[key]

    def is_symmetric(self):
        sets = [set(nb.tolist()) for nb in self.neighbors]
        return all(i in sets[j] for i, s in enumerate(sets) for j in s)


@dataclass(frozen=True, eq=False)
class Correspondence:
    """Partial permutation from partial-shape points to reference vertices.

    Parameters
    ----------
    pairs : array_like of int, shape (P, 2)
        Rows of ``(partial_index, reference_index)``.
    weights : array_like, shape (P,), optional
        Per-pair confidence in ``[0, 1]``.
    """

    pairs: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64)
        if p.size == 0:
            p = p.reshape(0, 2)
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValueError(f"pairs must have shape (P, 2), got {p.shape}")
        if p.size and p.min() < 0:
            raise ValueError("correspondence indices must be non-negative")
        if len(np.unique(p[:, 0])) != len(p):
            raise ValueError("partial indices are not distinct")
        if len(np.unique(p[:, 1])) != len(p):
            raise ValueError("reference indices are not distinct")
        object.__setattr__(self, "pairs", _frozen(p))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(p),):
                raise ValueError("weights must have one entry per pair")
            if np.any((w < 0) | (w > 1)) or not np.all(np.isfinite(w)):
                raise ValueError("weights must lie in [0, 1]")
            object.__setattr__(self, "weights", _frozen(w))

    def __len__(self):
        return len(self.pairs)

    @property
    def partial_index(self):
        return self.pairs[:, 0]

    @property
    def reference_index(self):
        return self.pairs[:, 1]

    def weight_array(self):
        return np.ones(len(self)) if self.weights is None else np.asarray(self.weights)

    def select(self, vertices):
        """Corresponded rows of a reference vertex array, in pair order."""
        return np.asarray(vertices)[self.reference_index]

    def subset(self, keep):
        keep = np.asarray(keep)
        w = None if self.weights is None else self.weights[keep]
        return Correspondence(self.pairs[keep], w)

    @classmethod
    def identity(cls, reference_index):
        """Partial point ``k`` corresponds to ``reference_index[k]``."""
        ref = np.asarray(reference_index, dtype=np.int64)
        return cls(np.column_stack([np.arange(len(ref)), ref]))

    def to_dict(self):
        d = {"pairs": self.pairs.tolist()}
        if self.weights is not None:
            d["weights"] = self.weights.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["pairs"], dtype=np.int64).reshape(-1, 2), d.get("weights"))


def build_neighborhoods(mesh, ring=2):
    """k-ring neighborhoods by hop-count closure of the edge graph.

    Isolated vertices get an empty neighborhood and a warning.
    """
    if ring < 1:
        raise ValueError("ring must be >= 1")
    n = mesh.n_vertices
    adj = mesh.adjacency().astype(bool)
    reach = adj.copy()
    frontier = adj.copy()
    for _ in range(ring - 1):
        frontier = (frontier @ adj).astype(bool)
        reach = (reach + frontier).astype(bool)
    reach = reach.tolil()
    reach.setdiag(False)
    reach = reach.tocsr()
    reach.eliminate_zeros()
    reach.sort_indices()
    neighbors = tuple(
        _frozen(reach.indices[reach.indptr[i]:reach.indptr[i + 1]].astype(np.int64))
        for i in range(n)
    )
    isolated = [i for i, nb in enumerate(neighbors) if len(nb) == 0]
    if isolated:
        warnings.warn(f"{len(isolated)} isolated vertices have empty neighborhoods", stacklevel=2)
    return NeighborhoodGraph(ring, neighbors)


def receptive_field(graph, vertex, depth):
    """Vertices reachable from ``vertex`` within ``depth`` hops of ``graph``."""
    if not 0 <= vertex < graph.n_vertices:
        raise IndexError(f"vertex {vertex} out of range")
    if depth < 0:
        raise ValueError("depth must be non-negative")
    seen = {int(vertex)}
    queue = deque([(int(vertex), 0)])
    while queue:
        v, d = queue.popleft()
        if d == depth:
            continue
        for u in graph.neighbors[v]:
            u = int(u)
            if u not in seen:
                seen.add(u)
                queue.append((u, d + 1))
    return seen


def shape_radius(mesh_or_vertices):
    """Largest distance from the vertex centroid to any vertex."""
    v = _as_vertices(mesh_or_vertices)
    return float(np.max(np.linalg.norm(v - v.mean(axis=0), axis=1)))


def signed_volume(mesh):
    """Enclosed volume by the divergence theorem; negative for inward-facing orientation.

    Open meshes still get a value, with a warning, since it then depends on the origin.
    """
    if not is_watertight(mesh):
        warnings.warn("signed_volume on a non-watertight mesh", stacklevel=2)
    tri = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def is_watertight(mesh):
    """True when every directed edge is matched by its reverse exactly once."""
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    fwd = {tuple(e) for e in directed.tolist()}
    if len(fwd) != len(directed):
        return False
    return all((b, a) in fwd for a, b in fwd)


def _as_vertices(x):
    return x.vertices if isinstance(x, Mesh) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

_WS = re.compile(r"[ \t]+")


def _split(line):
    return [t for t in _WS.split(line.strip()) if t]


def load_mesh(path):
    """Read an ASCII OBJ or PLY triangle mesh."""
    path = Path(path)
    suffix = path.suffix.lower()
    text = path.read_text()
    if suffix == ".obj":
        return _parse_obj(text)
    if suffix == ".ply":
        vertices, faces = _parse_ply(text)
        return Mesh(vertices, faces)
    raise MeshParseError(f"unsupported mesh format '{suffix}'")


def save_mesh(mesh, path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
        path.write_text("\n".join(lines) + "\n")
    elif suffix == ".ply":
        write_ply(path, mesh.vertices, mesh.faces)
    else:
        raise ValueError(f"unsupported mesh format '{suffix}'")


def _parse_obj(text):
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        tok = _split(line)
        if not tok:
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshParseError(f"malformed vertex at line {lineno}")
            try:
                vertices.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshParseError(f"malformed vertex at line {lineno}") from None
        elif tok[0] == "f":
            if len(tok) != 4:
                raise MeshParseError(f"non-triangular face at line {lineno}")
            idx = []
            for t in tok[1:]:
                try:
                    k = int(t.split("/")[0])
                except ValueError:
                    raise MeshParseError(f"malformed face at line {lineno}") from None
                # negative indices are relative to the current vertex count
                idx.append(k - 1 if k > 0 else len(vertices) + k)
            faces.append(idx)
    try:
        return Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces).reshape(-1, 3))
    except ValueError as exc:
        raise MeshParseError(str(exc)) from exc


def _parse_ply(text):
    """Returns ``(vertices, faces)``; ``faces`` may be empty for point sets."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing 'ply' magic at line 1")
    elements = []
    lineno = 1
    while True:
        if lineno >= len(lines):
            raise MeshParseError("unterminated PLY header")
        tok = _split(lines[lineno])
        lineno += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise MeshParseError(f"only ascii PLY is supported (line {lineno})")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise MeshParseError(f"malformed element at line {lineno}")
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshParseError(f"property before element at line {lineno}")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            raise MeshParseError(f"unexpected header token '{tok[0]}' at line {lineno}")

    vertices = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            while lineno < len(lines) and not lines[lineno].strip():
                lineno += 1
            if lineno >= len(lines):
                raise MeshParseError(f"unexpected end of file reading '{name}'")
            tok = _split(lines[lineno])
            lineno += 1
            rows.append((lineno, tok))
        if name == "vertex":
            try:
                ix = [props.index(a) for a in ("x", "y", "z")]
            except ValueError:
                raise MeshParseError("vertex element lacks x/y/z properties") from None
            try:
                vertices = np.array([[float(t[k]) for k in ix] for _, t in rows]).reshape(-1, 3)
            except (ValueError, IndexError):
                bad = next(ln for ln, t in rows if not _floats_ok(t, ix))
                raise MeshParseError(f"malformed vertex at line {bad}") from None
        elif name == "face":
            out = []
            for ln, t in rows:
                try:
                    k = int(t[0])
                    idx = [int(x) for x in t[1:1 + k]]
                except (ValueError, IndexError):
                    raise MeshParseError(f"malformed face at line {ln}") from None
                if k != 3 or len(idx) != 3:
                    raise MeshParseError(f"non-triangular face at line {ln}")
                out.append(idx)
            faces = np.array(out, dtype=np.int64).reshape(-1, 3)
    return vertices, faces


def _floats_ok(tok, ix):
    try:
        [float(tok[k]) for k in ix]
        return True
    except (ValueError, IndexError):
        return False


def write_ply(path, vertices, faces=None):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces)
    header = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
              "property double x", "property double y", "property double z"]
    if len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    body = [f"{x!r} {y!r} {z!r}" for x, y, z in vertices.tolist()]
    body += [f"3 {a} {b} {c}" for a, b, c in faces.tolist()]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply_points(path):
    vertices, _ = _parse_ply(Path(path).read_text())
    return vertices


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def unit_cube(center=(0.0, 0.0, 0.0)):
    """Unit cube, outward-oriented, 8 vertices and 12 faces."""
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    v += np.asarray(center) - 0.5
    # index = 4x + 2y + z
    faces = [
        (0, 1, 3), (0, 3, 2),  # x = 0
        (4, 6, 7), (4, 7, 5),  # x = 1
        (0, 4, 5), (0, 5, 1),  # y = 0
        (2, 3, 7), (2, 7, 6),  # y = 1
        (0, 2, 6), (0, 6, 4),  # z = 0
        (1, 5, 7), (1, 7, 3),  # z = 1
    ]
    return Mesh(v, faces)


def icosphere(level=1, radius=1.0):
    """Subdivided icosahedron projected onto a sphere (12, 42, 162, ... vertices)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(level):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(verts) * radius, faces)


def cylinder(n_around=12, n_along=16, radius=0.25, length=2.0, caps=True):
    """Closed tube along z, centered at the origin.

    Ring ``k`` (bottom to top) holds vertices ``k * n_around ... (k + 1) * n_around - 1``;
    with ``caps`` the bottom and top cap centers are the last two vertices.
    """
    if n_around < 3 or n_along < 2:
        raise ValueError("need n_around >= 3 and n_along >= 2")
    phi = 2 * np.pi * np.arange(n_around) / n_around
    z = np.linspace(-length / 2, length / 2, n_along)
    ring = np.column_stack([radius * np.cos(phi), radius * np.sin(phi)])
    verts = [np.column_stack([ring, np.full(n_around, zk)]) for zk in z]
    faces = []
    for k in range(n_along - 1):
        for a in range(n_around):
            b = (a + 1) % n_around
            p, q = k * n_around + a, k * n_around + b
            r, s = p + n_around, q + n_around
            faces += [(p, q, s), (p, s, r)]
    if caps:
        bottom = n_along * n_around
        top = bottom + 1
        verts.append(np.array([[0.0, 0.0, z[0]], [0.0, 0.0, z[-1]]]))
        last = (n_along - 1) * n_around
        for a in range(n_around):
            b = (a + 1) % n_around
            faces.append((bottom, b, a))
            faces.append((top, last + a, last + b))
    return Mesh(np.vstack(verts), faces)
