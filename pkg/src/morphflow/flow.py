"""Second-order Runge-Kutta integration of the autonomous flow ``x' = v(x)``.

One step of size ``h = 1 / T`` is the midpoint rule

    x_{t+1} = x_t + h v(x_t + h/2 v(x_t)),

and ``f(x) = x_T`` is the deformation.  Sine basis fields extend smoothly
outside the unit cube, so points that numerically leave it are evaluated
with the same formulas; nothing is clamped.
"""

import math
from dataclasses import dataclass

import numpy as np

from .basis import check_coefficients
from .domain import PointCloud
from .errors import NonFiniteState, OutOfHorizon

DEFAULT_STEPS = 20
MAX_HORIZON = 2.0


@dataclass(frozen=True)
class FlowConfig:
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def h(self):
        return 1.0 / self.steps


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """Positions on the time grid, shape ``(N, S + 1, D)`` with ``S`` integration steps."""

    positions: np.ndarray
    config: FlowConfig

    @property
    def n_steps(self):
        return self.positions.shape[1] - 1

    @property
    def horizon(self):
        return self.n_steps * self.config.h

    @property
    def endpoints(self):
        """``f_n``: positions at ``t = 1``."""
        return self.positions[:, self.config.steps]


@dataclass(frozen=True, eq=False)
class JacobianStack:
    """``d f_n / d a`` for every point, shape ``(N, D, K)``."""

    jac: np.ndarray

    def as_matrix(self):
        n, d, k = self.jac.shape
        return self.jac.reshape(n * d, k)


class SpectralField:
    """``v(x) = sum_k a_k v_k(x)`` as a callable field."""

    def __init__(self, basis, a, threads=None):
        self.basis = basis
        self.a = check_coefficients(basis, a)
        self.threads = threads

    def __call__(self, x):
        v, _ = self.basis.field(self.a, x, threads=self.threads)
        return v

    def with_jacobian(self, x):
        return self.basis.field(self.a, x, jacobian=True, threads=self.threads)

    def entries(self, x):
        values, _ = self.basis.values(x, threads=self.threads)
        return values


def _as_array(points):
    if isinstance(points, PointCloud):
        return np.array(points.points)
    return np.array(points, dtype=np.float64, ndmin=2)


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"non-finite position after step {step}")


def rk2_step(field, x, h):
    mid = x + (h / 2) * field(x)
    return x + h * field(mid)


def integrate_field(points, field, config, n_steps=None):
    """Integrate any callable field ``(N, D) -> (N, D)`` on the grid of ``config``."""
    x = _as_array(points)
    n_steps = config.steps if n_steps is None else int(n_steps)
    out = np.empty((x.shape[0], n_steps + 1, x.shape[1]))
    out[:, 0] = x
    h = config.h
    for t in range(n_steps):
        x = rk2_step(field, x, h)
        _check(x, t + 1)
        out[:, t + 1] = x
    return TrajectoryBundle(out, config)


def integrate(points, basis, a, config=FlowConfig(), threads=None):
    """Trajectories of every point over ``t in [0, 1]`` under the basis field."""
    return integrate_field(points, SpectralField(basis, a, threads), config)


def extend(bundle, field, n_steps):
    """Continue a bundle for ``n_steps`` more grid steps."""
    more = integrate_field(bundle.positions[:, -1], field, bundle.config, n_steps)
    return TrajectoryBundle(np.concatenate([bundle.positions, more.positions[:, 1:]], axis=1),
                            bundle.config)


def steps_for_time(t, config):
    return int(math.ceil(t * config.steps - 1e-9))


def extrapolate_field(points, field, config, t_max, max_horizon=MAX_HORIZON):
    if t_max > max_horizon:
        raise OutOfHorizon(f"t_max={t_max} exceeds the extrapolation guardrail {max_horizon}")
    if t_max < 0:
        raise OutOfHorizon("t_max must be non-negative")
    return integrate_field(points, field, config, steps_for_time(t_max, config))


def extrapolate(points, basis, a, config, t_max, max_horizon=MAX_HORIZON, threads=None):
    """Integrate past ``t = 1`` up to ``t_max`` with the same step size.

    The field does not depend on time, so this is a plain continuation of
    ``integrate``; ``ceil(t_max * T)`` steps are stored.
    """
    return extrapolate_field(points, SpectralField(basis, a, threads), config, t_max, max_horizon)


def sample_time(bundle, t):
    """Positions at time ``t``: a stored row on grid times, else linear interpolation."""
    if t < 0 or t > bundle.horizon + 1e-12:
        raise OutOfHorizon(f"t={t} outside the integrated horizon [0, {bundle.horizon}]")
    s = t * bundle.config.steps
    nearest = int(round(s))
    if abs(s - nearest) <= 1e-9:
        return PointCloud(bundle.positions[:, min(nearest, bundle.n_steps)])
    lo = int(math.floor(s))
    w = s - lo
    pos = (1 - w) * bundle.positions[:, lo] + w * bundle.positions[:, lo + 1]
    return PointCloud(pos)


def propagate(points, basis, a, config=FlowConfig(), threads=None):
    """Endpoints and their coefficient Jacobians in one pass.

    Differentiates the midpoint step by the chain rule: with
    ``m = x + h/2 v(x)``,

        dm  = dx + h/2 (D_x v(x) dx + V(x))
        dx' = dx + h   (D_x v(m) dm + V(m))

    where ``V`` stacks the basis entries column-wise and ``dx`` starts at 0.

    Returns
    -------
    endpoints : ndarray, shape (N, D)
    jac : ndarray, shape (N, D, K)
    """
    field = SpectralField(basis, a, threads)
    x = _as_array(points)
    n, dim = x.shape
    h = config.h
    dx = np.zeros((n, dim, basis.K))
    for t in range(config.steps):
        v_x, jac_x = field.with_jacobian(x)
        mid = x + (h / 2) * v_x
        dmid = dx + (h / 2) * (jac_x @ dx + field.entries(x).transpose(0, 2, 1))
        v_m, jac_m = field.with_jacobian(mid)
        x = x + h * v_m
        dx = dx + h * (jac_m @ dmid + field.entries(mid).transpose(0, 2, 1))
        _check(x, t + 1)
        if not np.all(np.isfinite(dx)):
            raise NonFiniteState(f"non-finite coefficient Jacobian after step {t + 1}")
    return x, dx


def endpoint_jacobians(points, basis, a, config=FlowConfig(), threads=None):
    _, jac = propagate(points, basis, a, config, threads)
    return JacobianStack(jac)


# -- conservation harness -----------------------------------------------------

def polygon_area(vertices):
    """Shoelace area of a closed polygon given by its ordered vertices."""
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def mesh_volume(vertices, faces):
    """Enclosed volume of a closed, consistently oriented triangle mesh."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return abs(float(np.einsum("ij,ij->", a, np.cross(b, c)))) / 6.0


def region_measure(region):
    if isinstance(region, tuple):
        vertices, faces = region
        return mesh_volume(np.asarray(vertices), np.asarray(faces))
    return polygon_area(np.asarray(region))


def measure_region_volume(region, basis, a, config, t, field=None):
    """Advect a region boundary to time ``t`` and return its area (2D) or volume (3D).

    ``region`` is an ordered ``(P, 2)`` polygon or a ``(vertices, faces)``
    pair describing a closed triangle mesh.  ``field`` replaces the basis
    field when given.
    """
    if field is None:
        field = SpectralField(basis, a)
    if isinstance(region, tuple):
        vertices, faces = region
        moved = sample_time(extrapolate_field(vertices, field, config, t, max(t, MAX_HORIZON)), t)
        return mesh_volume(moved.points, np.asarray(faces))
    moved = sample_time(extrapolate_field(region, field, config, t, max(t, MAX_HORIZON)), t)
    return polygon_area(moved.points)
