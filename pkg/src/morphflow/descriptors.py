"""Per-point descriptors and the combined Euclidean + descriptor distance.

The descriptor is a reduced SHOT-style signature: neighbors within a radius
are binned on a spherical grid expressed in a local reference frame, and
each spatial bin holds a histogram of the cosine between the neighbor
normal and the frame's z axis.  Descriptors produced by external tools can
be ingested through the CSV format instead.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .domain import PointCloud, atomic_write_text
from .errors import DegenerateNeighborhood, ParseError, RowCountMismatch

DEFAULT_RADIUS = 0.1
DEFAULT_BINS = (2, 4, 2, 8)
DESC_MAGIC = "MORPHFLOW-DESC"


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    vectors: np.ndarray
    provenance: str = "computed"

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2:
            raise ValueError("descriptors must be an (N, F) array")
        if not np.all(np.isfinite(vec)):
            raise ValueError("descriptors must be finite")
        if self.provenance not in ("computed", "ingested", "none"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance != "none" and vec.shape[1] < 1:
            raise ValueError("descriptor width must be at least 1")
        object.__setattr__(self, "vectors", vec)

    @property
    def F(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def subset(self, indices):
        return DescriptorSet(self.vectors[np.asarray(indices)], self.provenance)

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((n, 0)), "none")


def _is_empty(desc):
    return desc is None or desc.provenance == "none"


def estimate_normals(cloud, k_neighbors=10):
    """Unit normals from the smallest principal direction of each k-neighborhood.

    The neighborhood includes the point itself.  Normals point away from the
    cloud centroid (toward the side of the local centroid); when that is
    undecided the first non-negligible component is made positive.
    """
    pts = cloud.points
    n, dim = pts.shape
    if k_neighbors < dim or k_neighbors > n:
        raise ValueError(f"need {dim} <= k_neighbors <= N={n}, got {k_neighbors}")
    _, nbr = cKDTree(pts).query(pts, k=k_neighbors)
    nbr = nbr.reshape(n, k_neighbors)
    local = pts[nbr]
    centers = local.mean(axis=1)
    diffs = local - centers[:, None, :]
    cov = np.einsum("nki,nkj->nij", diffs, diffs) / k_neighbors
    evals, evecs = np.linalg.eigh(cov)
    top = evals[:, -1]
    if np.any(top <= 0) or np.any(evals[:, 1] <= 1e-12 * top):
        bad = int(np.argmax((top <= 0) | (evals[:, 1] <= 1e-12 * top)))
        raise DegenerateNeighborhood(f"neighborhood of point {bad} has rank < 2")
    normals = evecs[:, :, 0]
    outward = np.einsum("nd,nd->n", normals, centers - pts.mean(axis=0))
    scale = np.linalg.norm(centers - pts.mean(axis=0), axis=1)
    decided = np.abs(outward) > 1e-12 * np.maximum(scale, 1e-300)
    sign = np.where(outward >= 0, 1.0, -1.0)
    lead = np.argmax(np.abs(normals) > 1e-9, axis=1)
    fallback = np.where(normals[np.arange(n), lead] >= 0, 1.0, -1.0)
    sign = np.where(decided, sign, fallback)
    normals = normals * sign[:, None]
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    return cloud.with_points(pts, normals)


def _orient(axis, offsets):
    """Point ``axis`` toward the majority of neighbors; ties go by the summed projection."""
    proj = offsets @ axis
    balance = np.count_nonzero(proj > 0) - np.count_nonzero(proj < 0)
    if balance < 0 or (balance == 0 and proj.sum() < 0):
        return -axis
    return axis


def _local_frame(offsets, weights):
    """SHOT-style frame: weighted covariance axes, signs fixed by neighbor majority."""
    cov = (offsets * weights[:, None]).T @ offsets / weights.sum()
    _, evecs = np.linalg.eigh(cov)
    x_axis, z_axis = _orient(evecs[:, 2], offsets), _orient(evecs[:, 0], offsets)
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis])


def compute_descriptors(cloud, radius=DEFAULT_RADIUS, bins=DEFAULT_BINS):
    """Local-frame histograms for every point of a 3D cloud with normals.

    ``bins`` is ``(radial, azimuth, elevation, cosine)``; the default gives
    128 entries.  Rows are normalized to unit length, and a point with fewer
    than three neighbors inside ``radius`` gets an all-zero row.
    """
    if cloud.normals is None:
        raise ValueError("compute_descriptors needs normals; run estimate_normals first")
    if cloud.dimension != 3:
        raise ValueError("descriptors are defined for 3D clouds only")
    if radius <= 0:
        raise ValueError("radius must be positive")
    n_rad, n_azi, n_ele, n_cos = bins
    width = n_rad * n_azi * n_ele * n_cos
    pts, nrm = cloud.points, cloud.normals
    tree = cKDTree(pts)
    out = np.zeros((len(pts), width))
    for i, nbrs in enumerate(tree.query_ball_point(pts, radius)):
        nbrs = np.array([j for j in nbrs if j != i], dtype=np.intp)
        if len(nbrs) < 3:
            continue
        offsets = pts[nbrs] - pts[i]
        dist = np.linalg.norm(offsets, axis=1)
        frame = _local_frame(offsets, radius - dist)
        local = offsets @ frame.T
        r_bin = np.minimum((dist / radius * n_rad).astype(np.intp), n_rad - 1)
        azi = np.arctan2(local[:, 1], local[:, 0])
        a_bin = np.minimum(((azi + np.pi) / (2 * np.pi) * n_azi).astype(np.intp), n_azi - 1)
        e_bin = np.minimum(((local[:, 2] / np.maximum(dist, 1e-300) + 1) / 2 * n_ele)
                           .astype(np.intp), n_ele - 1)
        cosang = np.clip(nrm[nbrs] @ frame[2], -1.0, 1.0)
        c_bin = np.minimum(((cosang + 1) / 2 * n_cos).astype(np.intp), n_cos - 1)
        flat = ((r_bin * n_azi + a_bin) * n_ele + e_bin) * n_cos + c_bin
        hist = np.bincount(flat, minlength=width).astype(np.float64)
        out[i] = hist / np.linalg.norm(hist)
    return DescriptorSet(out, "computed")


def write_descriptors(path, desc):
    n, f = desc.vectors.shape
    lines = [f"{DESC_MAGIC} v1 {n} {f}"]
    lines.extend(",".join(f"{v:.9g}" for v in row) for row in desc.vectors)
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_descriptors(path, expected_n):
    """Read a descriptor CSV; the ``MORPHFLOW-DESC v1 <N> <F>`` header is optional."""
    path = str(path)
    rows = []
    declared = None
    width = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(DESC_MAGIC):
                tokens = line.split()
                if lineno != 1 or len(tokens) != 4 or tokens[1] != "v1":
                    raise ParseError("malformed descriptor header", lineno, path)
                try:
                    declared = (int(tokens[2]), int(tokens[3]))
                except ValueError:
                    raise ParseError("malformed descriptor header", lineno, path) from None
                continue
            try:
                vals = [float(t) for t in line.split(",")]
            except ValueError:
                raise ParseError("non-numeric descriptor entry", lineno, path) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(f"row has {len(vals)} columns, expected {width}", lineno, path)
            rows.append(vals)
    if declared is not None:
        if declared[0] != len(rows):
            raise ParseError(f"header declares {declared[0]} rows, found {len(rows)}", None, path)
        if rows and declared[1] != width:
            raise ParseError(f"header declares {declared[1]} columns, found {width}", None, path)
    if len(rows) != expected_n:
        raise RowCountMismatch(f"{Path(path).name}: expected {expected_n} descriptor rows, "
                               f"found {len(rows)}")
    return DescriptorSet(np.array(rows).reshape(expected_n, -1), "ingested")


@dataclass(frozen=True, eq=False)
class DistanceModel:
    """Frozen statistics for the combined distance.

    ``descriptor_distances`` is the dense ``(N, M)`` matrix when it was
    precomputed; otherwise blocks are computed on demand from the stored
    descriptor rows.
    """

    mean_euclid: float
    mean_descriptor: float
    descriptor_distances: np.ndarray = None
    desc_x: np.ndarray = None
    desc_y: np.ndarray = None

    @property
    def ratio(self):
        if self.mean_descriptor <= 1e-12:
            return 0.0
        return self.mean_euclid / self.mean_descriptor

    @property
    def uses_descriptors(self):
        return self.ratio > 0.0

    def descriptor_block(self, rows=slice(None), cols=slice(None)):
        if self.descriptor_distances is not None:
            return self.descriptor_distances[rows, cols]
        return cdist(self.desc_x[rows], self.desc_y[cols])

    def with_descriptors(self, desc_x, desc_y):
        """Same normalizers, different (e.g. full resolution) descriptor rows."""
        dx = None if _is_empty(desc_x) else desc_x.vectors
        dy = None if _is_empty(desc_y) else desc_y.vectors
        if (dx is None) != (dy is None):
            raise ValueError("descriptors must be given for both clouds or neither")
        return DistanceModel(self.mean_euclid, self.mean_descriptor if dx is not None else 0.0,
                             None, dx, dy)


def _points(p):
    return p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64)


def build_distance_model(f_points, y_points, desc_x=None, desc_y=None):
    """Means over all ``N x M`` pairs plus the dense descriptor distance matrix."""
    f, y = _points(f_points), _points(y_points)
    mean_e = float(cdist(f, y).mean())
    if _is_empty(desc_x) and _is_empty(desc_y):
        return DistanceModel(mean_e, 0.0)
    if _is_empty(desc_x) or _is_empty(desc_y):
        raise ValueError("descriptors must be given for both clouds or neither")
    if desc_x.F != desc_y.F:
        raise ValueError(f"descriptor widths differ: {desc_x.F} vs {desc_y.F}")
    if len(desc_x) != len(f) or len(desc_y) != len(y):
        raise ValueError("descriptor rows must match point counts")
    dmat = cdist(desc_x.vectors, desc_y.vectors)
    dmat.setflags(write=False)
    return DistanceModel(mean_e, float(dmat.mean()), dmat, desc_x.vectors, desc_y.vectors)


def combined_distance(model, n, m, f_n, y_m):
    """``||y_m - f_n|| + (mean_euclid / mean_descriptor) * d_desc[n, m]``."""
    d = float(np.linalg.norm(np.asarray(y_m, dtype=np.float64) - np.asarray(f_n, dtype=np.float64)))
    ratio = model.ratio
    if ratio == 0.0:
        return d
    return d + ratio * float(model.descriptor_block(n, m))


def combined_distance_matrix(model, f, y, rows=slice(None)):
    """Combined distance for every pair of ``f[rows]`` and ``y``."""
    f = _points(f)[rows]
    d = cdist(f, _points(y))
    ratio = model.ratio
    if ratio != 0.0:
        d = d + ratio * model.descriptor_block(rows, slice(None))
    return d
