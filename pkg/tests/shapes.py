"""Synthetic meshes shared by the test modules."""

import numpy as np
from scipy.spatial import ConvexHull

from morphflow.domain import Mesh, PointCloud


def fibonacci_sphere(n, radius=0.25, center=0.5):
    """Nearly uniform points on a sphere, deterministic."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z * z)
    return center + radius * np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def sphere_mesh(n, radius=0.25, center=0.5):
    pts = fibonacci_sphere(n, radius, center)
    hull = ConvexHull(pts)
    faces = hull.simplices.copy()
    # hull facets come unordered; flip those whose normal points inward
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a - pts.mean(axis=0)) < 0
    faces[inward] = faces[inward][:, ::-1]
    return Mesh(PointCloud(pts), faces)


def lumpy_mesh(n):
    """Star-shaped closed surface with distinct principal axes and skewed profile."""
    unit = fibonacci_sphere(n, 1.0, 0.0)
    faces = ConvexHull(unit).simplices
    scale = np.array([0.3, 0.2, 0.13])
    skew = 1 + 0.25 * unit[:, 0] + 0.15 * unit[:, 1] ** 2 * np.sign(unit[:, 1]) + 0.1 * unit[:, 2] ** 3
    pts = 0.5 + unit * scale * skew[:, None]
    return Mesh(PointCloud(pts), faces)


def cylinder_mesh(n_around, n_along, radius=0.1, length=1.0, bend=0.0):
    """Closed tube along z with fan caps; ``bend`` is the total bending angle in radians.

    Bending maps the axis onto a circular arc of the same length, which is
    nearly isometric for thin tubes.
    """
    theta = 2 * np.pi * np.arange(n_around) / n_around
    zs = np.linspace(0.0, length, n_along)
    tt, zz = np.meshgrid(theta, zs)
    x = radius * np.cos(tt).ravel()
    y = radius * np.sin(tt).ravel()
    z = zz.ravel() - length / 2
    if bend:
        big = length / bend
        ang = z / big
        x, z = (big + x) * np.cos(ang) - big, (big + x) * np.sin(ang)
    pts = np.column_stack([x, y, z])
    faces = []
    for i in range(n_along - 1):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            faces += [(a, b, a + n_around), (b, b + n_around, a + n_around)]
    bottom, top = len(pts), len(pts) + 1
    ends = np.array([pts[:n_around].mean(axis=0), pts[-n_around:].mean(axis=0)])
    pts = np.vstack([pts, ends])
    last = (n_along - 1) * n_around
    for j in range(n_around):
        faces.append((bottom, (j + 1) % n_around, j))
        faces.append((top, last + j, last + (j + 1) % n_around))
    return Mesh(PointCloud(pts), np.array(faces))
