"""Shape ingestion and normalization into the unit cube."""

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateCovariance, ParseError, UnsupportedFormat

DEFAULT_MARGIN = 0.1


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Sampled shape.

    Parameters
    ----------
    points : ndarray, shape (N, D)
    normals : ndarray, shape (N, D), optional
        Unit normals, one per point.
    id : str
    """

    points: np.ndarray
    normals: np.ndarray = None
    id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("a point cloud needs an (N, D) array with N >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            if not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, rtol=0, atol=1e-9):
                raise ValueError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    @property
    def dimension(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points, normals=None):
        return PointCloud(points, normals, self.id)

    def subset(self, indices):
        indices = np.asarray(indices)
        nrm = None if self.normals is None else self.normals[indices]
        return PointCloud(self.points[indices], nrm, self.id)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Point cloud plus connectivity: triangles in 3D, polyline segments in 2D."""

    cloud: PointCloud
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.intp))

    def __post_init__(self):
        faces = np.array(self.faces, dtype=np.intp)
        if faces.size == 0:
            faces = faces.reshape(0, 3 if self.cloud.dimension == 3 else 2)
        if faces.ndim != 2:
            raise ValueError("faces must be a 2D index array")
        n = len(self.cloud)
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            raise ValueError("face index out of range")
        for a in range(faces.shape[1]):
            for b in range(a + 1, faces.shape[1]):
                if np.any(faces[:, a] == faces[:, b]):
                    raise ValueError("degenerate face with a repeated index")
        faces.setflags(write=False)
        object.__setattr__(self, "faces", faces)

    @property
    def points(self):
        return self.cloud.points


@dataclass(frozen=True)
class DomainTransform:
    """``x -> scale * (x - center) + 0.5``, shared by source and target."""

    scale: float
    translation: np.ndarray
    dimension: int

    def forward(self, x):
        return self.scale * np.asarray(x, dtype=np.float64) + self.translation

    def inverse(self, x):
        return (np.asarray(x, dtype=np.float64) - self.translation) / self.scale

    def apply(self, cloud):
        return cloud.with_points(self.forward(cloud.points), cloud.normals)

    def to_dict(self):
        return {"scale": self.scale, "translation": [float(t) for t in self.translation],
                "dimension": self.dimension}


@dataclass(frozen=True)
class SampleIndexSet:
    indices: np.ndarray

    @property
    def count(self):
        return len(self.indices)


# -- file formats -------------------------------------------------------------

_FORMATS = {".off": "OFF", ".ply": "PLY-ascii", ".obj": "OBJ"}


def format_for_path(path):
    fmt = _FORMATS.get(Path(path).suffix.lower())
    if fmt is None:
        raise UnsupportedFormat(f"cannot infer shape format from {path!r}")
    return fmt


def _records(text):
    """Non-empty, comment-stripped lines with their 1-based numbers."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def _floats(tokens, lineno, path):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected numbers, got {' '.join(tokens)!r}", lineno, path) from None


def _ints(tokens, lineno, path):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected integers, got {' '.join(tokens)!r}", lineno, path) from None


_SEGMENT = -1


def _triangulate(poly, n_points, lineno, path):
    """Fan triangles of a polygon; a two-vertex face becomes ``(a, b, _SEGMENT)``."""
    for idx in poly:
        if idx < 0 or idx >= n_points:
            raise ParseError(f"face index {idx} out of range (0..{n_points - 1})", lineno, path)
    if len(poly) < 2:
        raise ParseError("face needs at least 2 vertices", lineno, path)
    if len(set(poly)) != len(poly):
        raise ParseError("degenerate face with repeated vertex", lineno, path)
    if len(poly) == 2:
        return [(poly[0], poly[1], _SEGMENT)]
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _normalize_normals(normals):
    if normals is None:
        return None
    normals = np.asarray(normals, dtype=np.float64)
    length = np.linalg.norm(normals, axis=1)
    if np.any(length == 0):
        return None
    return normals / length[:, None]


def _read_off(text, path):
    recs = _records(text)
    try:
        lineno, header = next(recs)
    except StopIteration:
        raise ParseError("empty file", 1, path) from None
    tokens = header.split()
    keyword = tokens[0]
    if keyword not in ("OFF", "NOFF"):
        raise ParseError(f"expected OFF header, got {keyword!r}", lineno, path)
    with_normals = keyword == "NOFF"
    counts = tokens[1:]
    if not counts:
        try:
            lineno, line = next(recs)
        except StopIteration:
            raise ParseError("missing vertex/face counts", lineno + 1, path) from None
        counts = line.split()
    if len(counts) < 2:
        raise ParseError("missing vertex/face counts", lineno, path)
    n_vert, n_face = _ints(counts[:2], lineno, path)
    width = 6 if with_normals else 3
    points, normals, faces = [], [], []
    for _ in range(n_vert):
        try:
            lineno, line = next(recs)
        except StopIteration:
            raise ParseError(f"expected {n_vert} vertices, file ended", lineno + 1, path) from None
        vals = _floats(line.split(), lineno, path)
        if len(vals) < width:
            raise ParseError(f"vertex record needs {width} values", lineno, path)
        points.append(vals[:3])
        if with_normals:
            normals.append(vals[3:6])
    for _ in range(n_face):
        try:
            lineno, line = next(recs)
        except StopIteration:
            raise ParseError(f"expected {n_face} faces, file ended", lineno + 1, path) from None
        vals = _ints(line.split(), lineno, path)
        if not vals or len(vals) < vals[0] + 1:
            raise ParseError("face record shorter than its vertex count", lineno, path)
        faces.extend(_triangulate(vals[1:vals[0] + 1], n_vert, lineno, path))
    if n_vert < 1:
        raise ParseError("shape has no vertices", lineno, path)
    return np.array(points), _normalize_normals(normals or None), faces


def _read_ply(text, path):
    recs = _records_keep_comments(text)
    try:
        lineno, magic = next(recs)
    except StopIteration:
        raise ParseError("empty file", 1, path) from None
    if magic != "ply":
        raise ParseError("missing 'ply' magic", lineno, path)
    elements = []
    for lineno, line in recs:
        tokens = line.split()
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise UnsupportedFormat(f"{path}: only ascii PLY is supported")
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before element", lineno, path)
            elements[-1][2].append(tokens[1:])
        elif tokens[0] == "end_header":
            break
    else:
        raise ParseError("missing end_header", lineno, path)
    points, normals, faces = None, None, []
    n_vert = 0
    for name, count, props in elements:
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                cols = [names.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise ParseError("vertex element lacks x/y/z", lineno, path) from None
            ncols = [names.index(c) for c in ("nx", "ny", "nz")] if "nx" in names else None
            rows = []
            for _ in range(count):
                try:
                    lineno, line = next(recs)
                except StopIteration:
                    raise ParseError("file ended inside vertex list", lineno + 1, path) from None
                vals = _floats(line.split(), lineno, path)
                if len(vals) < len(names):
                    raise ParseError("vertex record too short", lineno, path)
                rows.append(vals)
            rows = np.array(rows).reshape(count, -1)
            points = rows[:, cols]
            n_vert = count
            if ncols is not None:
                normals = _normalize_normals(rows[:, ncols])
        else:
            for _ in range(count):
                try:
                    lineno, line = next(recs)
                except StopIteration:
                    raise ParseError(f"file ended inside {name} list", lineno + 1, path) from None
                if name == "face":
                    vals = _ints(line.split(), lineno, path)
                    if not vals or len(vals) < vals[0] + 1:
                        raise ParseError("face record shorter than its vertex count", lineno, path)
                    faces.extend(_triangulate(vals[1:vals[0] + 1], n_vert, lineno, path))
    if points is None or n_vert < 1:
        raise ParseError("shape has no vertices", lineno, path)
    return points, normals, faces


def _records_keep_comments(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("comment") and not line.startswith("obj_info"):
            yield lineno, line


def _read_obj(text, path):
    points, normals, polys = [], [], []
    for lineno, line in _records(text):
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            vals = _floats(tokens[1:4], lineno, path)
            if len(vals) < 3:
                raise ParseError("vertex needs 3 coordinates", lineno, path)
            points.append(vals)
        elif tag == "vn":
            normals.append(_floats(tokens[1:4], lineno, path))
        elif tag == "f":
            idx = _ints([t.split("/")[0] for t in tokens[1:]], lineno, path)
            polys.append((lineno, [idx]))
        elif tag == "l":
            idx = _ints([t.split("/")[0] for t in tokens[1:]], lineno, path)
            polys.append((lineno, [idx[i:i + 2] for i in range(len(idx) - 1)] or [idx]))
    n = len(points)
    if n < 1:
        raise ParseError("shape has no vertices", 1, path)
    faces = []
    for lineno, parts in polys:
        for idx in parts:
            # OBJ is 1-based, negative indices count from the end
            idx = [i - 1 if i > 0 else n + i for i in idx]
            faces.extend(_triangulate(idx, n, lineno, path))
    nrm = _normalize_normals(normals) if len(normals) == n else None
    return np.array(points), nrm, faces


_READERS = {"OFF": _read_off, "PLY-ascii": _read_ply, "OBJ": _read_obj}


def load_shape(path, format=None, dimension=3):
    """Read a mesh from an OFF, ascii PLY or OBJ file.

    ``dimension=2`` drops the third coordinate, which must then be zero,
    and turns faces into polyline edges; two-vertex faces (OBJ ``l``
    lines) are kept as segments.  Polygonal faces are fan-triangulated.
    """
    path = str(path)
    fmt = format or format_for_path(path)
    if fmt not in _READERS:
        raise UnsupportedFormat(f"unknown shape format {fmt!r}")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise UnsupportedFormat(f"{path}: binary files are not supported") from None
    points, normals, faces = _READERS[fmt](text, path)
    faces = np.array(faces, dtype=np.intp).reshape(-1, 3)
    segment = faces[:, 2] == _SEGMENT
    if dimension == 2:
        if np.any(points[:, 2] != 0):
            raise ParseError("2D shape requested but z coordinates are not all zero", None, path)
        points = points[:, :2]
        normals = None if normals is None else _normalize_normals(normals[:, :2])
        faces = _polyline_edges(faces[~segment], faces[segment, :2])
    elif np.any(segment):
        raise ParseError("two-vertex faces are only meaningful for 2D shapes", None, path)
    return Mesh(PointCloud(points, normals, Path(path).stem), faces)


def _polyline_edges(triangles, segments=()):
    edges = {(min(a, b), max(a, b)) for a, b in segments}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edges.add((min(a, b), max(a, b)))
    return np.array(sorted(edges), dtype=np.intp).reshape(-1, 2)


def _fmt(x):
    return f"{x:.9g}"


def _pad3(points):
    if points.shape[1] == 3:
        return points
    return np.hstack([points, np.zeros((len(points), 3 - points.shape[1]))])


def _face_line(face):
    return f"{len(face)} " + " ".join(str(i) for i in face)


def shape_text(mesh, format="OFF"):
    """Serialize a mesh; floats carry 9 significant digits."""
    if isinstance(mesh, PointCloud):
        mesh = Mesh(mesh)
    pts = _pad3(mesh.points)
    faces = mesh.faces
    nrm = None if mesh.cloud.normals is None else _pad3(mesh.cloud.normals)
    lines = []
    if format == "OFF":
        lines.append("NOFF" if nrm is not None else "OFF")
        lines.append(f"{len(pts)} {len(faces)} 0")
        for i, p in enumerate(pts):
            vals = list(p) + (list(nrm[i]) if nrm is not None else [])
            lines.append(" ".join(_fmt(v) for v in vals))
        lines.extend(_face_line(f) for f in faces)
    elif format == "PLY-ascii":
        lines += ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
                  "property double x", "property double y", "property double z"]
        if nrm is not None:
            lines += ["property double nx", "property double ny", "property double nz"]
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices",
                  "end_header"]
        for i, p in enumerate(pts):
            vals = list(p) + (list(nrm[i]) if nrm is not None else [])
            lines.append(" ".join(_fmt(v) for v in vals))
        lines.extend(_face_line(f) for f in faces)
    elif format == "OBJ":
        lines.extend("v " + " ".join(_fmt(v) for v in p) for p in pts)
        if nrm is not None:
            lines.extend("vn " + " ".join(_fmt(v) for v in n) for n in nrm)
        tag = "f" if faces.shape[1] == 3 else "l"
        lines.extend(f"{tag} " + " ".join(str(i + 1) for i in f) for f in faces)
    else:
        raise UnsupportedFormat(f"unknown shape format {format!r}")
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text):
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_shape(path, mesh, format=None):
    atomic_write_text(path, shape_text(mesh, format or format_for_path(path)))


# -- normalization ------------------------------------------------------------

def _orient(vec, proj):
    """Sign fix for one principal axis: non-negative third moment of the projections."""
    m3 = float(np.mean(proj ** 3))
    if abs(m3) > 1e-12:
        return (1.0 if m3 > 0 else -1.0), abs(m3)
    # symmetric along this axis: largest-magnitude component positive
    lead = int(np.argmax(np.abs(vec)))
    return (1.0 if vec[lead] >= 0 else -1.0), 0.0


def pca_frame(points):
    """Mean and proper rotation whose rows are the oriented principal axes."""
    points = np.asarray(points, dtype=np.float64)
    mean = points.mean(axis=0)
    centered = points - mean
    dim = points.shape[1]
    if len(points) < dim:
        raise DegenerateCovariance(f"need at least {dim} points for PCA, got {len(points)}")
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(float(evals[-1]), 0.0)
    if scale <= 0 or evals[0] <= 1e-12 * scale:
        raise DegenerateCovariance("point cloud covariance is rank deficient")
    order = np.argsort(evals)[::-1]
    axes = evecs[:, order].T.copy()
    confidence = np.empty(dim)
    for i in range(dim):
        sign, confidence[i] = _orient(axes[i], centered @ axes[i])
        axes[i] *= sign
    if np.linalg.det(axes) < 0:
        # keep the rotation proper by flipping the least decisive axis
        axes[int(np.argmin(confidence))] *= -1
    return mean, axes


def pca_align(source, target):
    """Move each cloud's mean to the origin and rotate its principal axes onto the coordinate axes.

    Each cloud is aligned independently.  Axis signs follow the third-moment
    convention of ``pca_frame``; a wrong 180 degree flip between two shapes is
    possible for near-symmetric inputs.
    """
    out = []
    for cloud in (source, target):
        mean, rot = pca_frame(cloud.points)
        pts = (cloud.points - mean) @ rot.T
        nrm = None if cloud.normals is None else cloud.normals @ rot.T
        out.append(cloud.with_points(pts, nrm))
    return tuple(out)


def fit_domain(source, target, margin=DEFAULT_MARGIN):
    """Shared similarity transform placing both clouds inside ``[margin, 1 - margin]^D``.

    The joint mean goes to the cube center and the scale is the largest one
    keeping the joint bounding box inside the margin.
    """
    if not 0 < margin < 0.5:
        raise ValueError("margin must lie in (0, 0.5)")
    allpts = np.vstack([np.asarray(source.points), np.asarray(target.points)])
    dim = allpts.shape[1]
    center = allpts.mean(axis=0)
    reach = float(np.max(np.abs(allpts - center)))
    # an extent at round-off level of the coordinates means a single point
    resolution = 64 * np.finfo(np.float64).eps * max(1.0, float(np.max(np.abs(center))))
    scale = (0.5 - margin) / reach if reach > resolution else 1.0
    return DomainTransform(scale, 0.5 - scale * center, dim)


def nearest_to_centroid(points):
    points = np.asarray(points)
    return int(np.argmin(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))


def farthest_point_sample(cloud, k, seed_index=None):
    """Greedy Euclidean farthest point sampling.

    Starts at ``seed_index`` (default: the point nearest the centroid) and
    repeatedly adds the point with the largest distance to the selection.
    Ties go to the lowest index.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if seed_index is None:
        seed_index = nearest_to_centroid(points)
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range")
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = seed_index
    mind = np.sum((points - points[seed_index]) ** 2, axis=1)
    mind[seed_index] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, np.sum((points - points[nxt]) ** 2, axis=1), out=mind)
        mind[nxt] = -1.0
    chosen.setflags(write=False)
    return SampleIndexSet(chosen)
