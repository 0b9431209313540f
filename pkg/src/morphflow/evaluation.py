"""Correspondence and registration quality measures.

Geodesic errors follow the usual benchmark protocol: the error of a match
is the shortest-path distance on the target mesh between the predicted and
the true vertex, divided by the mesh diameter, and results are summarized
as the cumulative percentage of matches below each threshold.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .domain import Mesh, PointCloud, atomic_write_text, farthest_point_sample
from .errors import Disconnected

DIAMETER_SOURCES = 20
DEFAULT_THRESHOLDS = np.linspace(0.0, 0.25, 101)


def _edges(faces):
    faces = np.asarray(faces, dtype=np.intp)
    if faces.shape[1] == 2:
        pairs = faces
    else:
        pairs = np.vstack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


class GeodesicIndex:
    """Edge graph of a mesh weighted by Euclidean edge length.

    Parameters
    ----------
    mesh : Mesh
        Triangles in 3D or polyline segments in 2D.
    n_sources : int
        Number of farthest-point sources used to estimate the diameter.
    """

    def __init__(self, mesh, n_sources=DIAMETER_SOURCES):
        self.mesh = mesh
        pts = mesh.points
        n = len(pts)
        edges = _edges(mesh.faces) if mesh.faces.size else np.zeros((0, 2), dtype=np.intp)
        lengths = np.linalg.norm(pts[edges[:, 0]] - pts[edges[:, 1]], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("mesh has zero-length edges; merge duplicate vertices first")
        graph = coo_matrix((np.concatenate([lengths, lengths]),
                            (np.concatenate([edges[:, 0], edges[:, 1]]),
                             np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n))
        self.graph = graph.tocsr()
        self.n_components, self.labels = connected_components(self.graph, directed=False)
        self._rows = {}
        sources = farthest_point_sample(mesh.cloud, min(n_sources, n)).indices
        dist = self.distances_from(sources)
        finite = dist[np.isfinite(dist)]
        self.diameter = float(finite.max()) if finite.size else 0.0

    @property
    def n_vertices(self):
        return self.graph.shape[0]

    def distances_from(self, sources):
        """Rows of geodesic distances from each source vertex, cached per source."""
        sources = np.atleast_1d(np.asarray(sources, dtype=np.intp))
        missing = np.unique([s for s in sources.tolist() if s not in self._rows])
        if missing.size:
            rows = dijkstra(self.graph, directed=False, indices=missing)
            for s, row in zip(missing.tolist(), np.atleast_2d(rows)):
                row.setflags(write=False)
                self._rows[s] = row
        return np.array([self._rows[s] for s in sources.tolist()])

    def _check(self, v):
        if not 0 <= v < self.n_vertices:
            raise IndexError(f"vertex {v} out of range (0..{self.n_vertices - 1})")


def geodesic_distance(index, u, v):
    """Shortest-path length between vertices ``u`` and ``v``; raises Disconnected across components."""
    index._check(u)
    index._check(v)
    if index.labels[u] != index.labels[v]:
        raise Disconnected(f"vertices {u} and {v} lie in different mesh components")
    if u == v:
        return 0.0
    return float(index.distances_from([u])[0, v])


@dataclass(frozen=True, eq=False)
class EvalReport:
    per_point_error: np.ndarray
    curve: tuple
    mean_error: float
    n_disconnected: int = 0

    def to_csv(self):
        lines = ["threshold,percent"]
        lines.extend(f"{t:.10g},{p:.10g}" for t, p in self.curve)
        lines.append(f"mean_error={self.mean_error:.10g}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        atomic_write_text(path, self.to_csv())


def _pair_array(pairs, name):
    arr = np.asarray(pairs, dtype=np.intp)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must be a list of (source, target) pairs")
    return arr


def princeton_curve(matches, ground_truth, index, thresholds=None):
    """Cumulative geodesic error curve.

    Parameters
    ----------
    matches, ground_truth : sequence of (source, target) pairs
        Predicted and true target vertex for every source point; both must
        cover the same source points, in any order.
    index : GeodesicIndex
        Built on the target mesh.
    thresholds : array_like, optional
        Error levels; defaults to 0 to 0.25 in steps of 0.0025.

    Returns
    -------
    EvalReport
        Matches whose predicted and true vertices lie in different
        components get an infinite error and never count as below a
        threshold; ``mean_error`` averages the finite errors only.
    """
    pred = _pair_array(matches, "matches")
    truth = _pair_array(ground_truth, "ground truth")
    if len(np.unique(pred[:, 0])) != len(pred) or len(np.unique(truth[:, 0])) != len(truth):
        raise ValueError("each source point must appear once")
    if not np.array_equal(np.sort(pred[:, 0]), np.sort(truth[:, 0])):
        raise ValueError("matches and ground truth cover different source points")
    pred = pred[np.argsort(pred[:, 0])]
    truth = truth[np.argsort(truth[:, 0])]
    for v in np.concatenate([pred[:, 1], truth[:, 1]]):
        index._check(int(v))
    if index.diameter <= 0:
        raise ValueError("target mesh has zero diameter")
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)

    rows = index.distances_from(truth[:, 1])
    geo = rows[np.arange(len(pred)), pred[:, 1]]
    err = geo / index.diameter
    err[index.labels[pred[:, 1]] != index.labels[truth[:, 1]]] = np.inf
    n_cross = int(np.count_nonzero(np.isinf(err)))
    if n_cross:
        warnings.warn(f"{n_cross} matches cross mesh components; their error is infinite",
                      stacklevel=2)
    percent = [100.0 * np.count_nonzero(err <= t) / len(err) for t in thresholds]
    finite = err[np.isfinite(err)]
    mean = float(finite.mean()) if finite.size else float("inf")
    return EvalReport(err, tuple(zip(thresholds.tolist(), percent)), mean, n_cross)


@dataclass(frozen=True, eq=False)
class SurfaceDistanceReport:
    per_point: np.ndarray

    @property
    def avg(self):
        return float(self.per_point.mean())

    @property
    def max(self):
        return float(self.per_point.max())


def _segment_distance(p, a, b):
    """Distances from points ``p`` (P, 1, D) to segments ``a``-``b`` (1, S, D)."""
    ab = b - a
    denom = np.einsum("...d,...d->...", ab, ab)
    t = np.einsum("...d,...d->...", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _triangle_distance(p, a, b, c):
    """Exact distances from points (P, 1, 3) to triangles (1, T, 3).

    Inside the prism over a triangle the answer is the plane distance;
    otherwise the nearest point lies on one of the edges.
    """
    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    area2 = np.einsum("...d,...d->...", normal, normal)
    ap = p - a
    height = np.einsum("...d,...d->...", ap, normal)
    proj = ap - (height / np.where(area2 > 0, area2, 1.0))[..., None] * normal
    # barycentric coordinates of the projection
    u = np.einsum("...d,...d->...", np.cross(proj, ac), normal)
    v = np.einsum("...d,...d->...", np.cross(ab, proj), normal)
    inside = (area2 > 0) & (u >= 0) & (v >= 0) & (u + v <= area2)
    plane = np.abs(height) / np.sqrt(np.where(area2 > 0, area2, 1.0))
    edge = np.minimum(np.minimum(_segment_distance(p, a, b), _segment_distance(p, b, c)),
                      _segment_distance(p, c, a))
    return np.where(inside, np.minimum(plane, edge), edge)


def surface_distance(registered, target, chunk=2_000_000):
    """Distance from every registered point to the nearest point of the target surface.

    Triangles in 3D, polyline segments in 2D; the search is exhaustive.
    """
    pts = registered.points if isinstance(registered, PointCloud) else np.asarray(registered, float)
    if not isinstance(target, Mesh) or target.faces.size == 0:
        raise ValueError("surface_distance needs a target mesh with faces")
    verts = target.points
    faces = target.faces
    corners = [verts[faces[:, i]][None] for i in range(faces.shape[1])]
    out = np.empty(len(pts))
    step = max(1, chunk // len(faces))
    for start in range(0, len(pts), step):
        p = pts[start:start + step, None, :]
        if faces.shape[1] == 2:
            d = _segment_distance(p, corners[0], corners[1])
        else:
            d = _triangle_distance(p, *corners)
        out[start:start + step] = d.min(axis=1)
    out.setflags(write=False)
    return SurfaceDistanceReport(out)
