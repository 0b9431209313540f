"""Expectation maximization over the field coefficients.

The E-step turns combined distances into soft correspondences with an
extra outlier row (uniform density on the unit cube); the M-step takes one
damped Gauss-Newton step on

    E(a) = 1/2 a^T L^-1 a + 1/sigma^2 sum_nm W_nm rho(||y_m - f_n(a)||)

with ``rho`` the Huber loss, handled by reweighting ``W``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .descriptors import build_distance_model, combined_distance_matrix
from .domain import PointCloud
from .errors import NonFiniteState, SingularSystem
from .flow import FlowConfig, propagate

logger = logging.getLogger(__name__)

MAX_HALVINGS = 10
CONVERGED_RUN = 3
_BRUTE_FORCE_PAIRS = 4_000_000


@dataclass(frozen=True)
class EmConfig:
    sigma2: float = 0.01
    r0: float = 0.01
    max_iters: int = 100
    rel_energy_tol: float = 1e-5
    w_truncation: float = 1e-8

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.r0 <= 0:
            raise ValueError("r0 must be positive")
        if self.w_truncation < 0:
            raise ValueError("w_truncation must be non-negative")


@dataclass(frozen=True, eq=False)
class CorrespondenceMatrix:
    """Soft correspondences ``w`` (N x M) and per-target outlier probability.

    ``truncated_mass`` holds, per column, the total of the entries that were
    zeroed by truncation, so the exact posterior column sums stay available.
    """

    w: np.ndarray
    outlier_mass: np.ndarray
    truncated_mass: np.ndarray = None

    def column_sums(self, pre_truncation=True):
        sums = self.outlier_mass + self.w.sum(axis=0)
        if pre_truncation and self.truncated_mass is not None:
            sums = sums + self.truncated_mass
        return sums


@dataclass(frozen=True, eq=False)
class EmState:
    a: np.ndarray
    w: CorrespondenceMatrix
    iteration: int
    energy_history: tuple
    halvings: tuple = ()
    stalled: tuple = ()
    converged: bool = False
    endpoints: np.ndarray = field(default=None, repr=False)


def huber(r, r0):
    """Quadratic below ``r0``, linear with slope ``r0`` above; works elementwise."""
    r = np.abs(r)
    out = np.where(r <= r0, 0.5 * r * r, r0 * r - 0.5 * r0 * r0)
    return float(out) if out.ndim == 0 else out


def _points(p):
    return p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64)


def e_step(model, f, y, cfg=EmConfig()):
    """Posterior correspondence probabilities under the Gaussian mixture at ``f``.

    ``w[n, m] = exp(-d_nm^2 / 2 sigma^2) / ((2 pi sigma^2)^(D/2) + sum_n' exp(-d_n'm^2 / 2 sigma^2))``
    and the outlier row takes the remaining mass.  Entries below
    ``cfg.w_truncation`` are zeroed afterwards without renormalizing.
    """
    f, y = _points(f), _points(y)
    dim = f.shape[1]
    d = combined_distance_matrix(model, f, y)
    logp = -(d * d) / (2 * cfg.sigma2)
    log_c = 0.5 * dim * np.log(2 * np.pi * cfg.sigma2)
    log_den = logsumexp(np.vstack([logp, np.full((1, logp.shape[1]), log_c)]), axis=0)
    w = np.exp(logp - log_den)
    outlier = np.exp(log_c - log_den)
    truncated = np.zeros(w.shape[1])
    if cfg.w_truncation > 0:
        small = w < cfg.w_truncation
        truncated = np.where(small, w, 0.0).sum(axis=0)
        w[small] = 0.0
    return CorrespondenceMatrix(w, outlier, truncated)


def _wmat(w):
    return w.w if isinstance(w, CorrespondenceMatrix) else np.asarray(w, dtype=np.float64)


def energy(a, w, f_endpoints, y, basis, cfg=EmConfig()):
    """``1/2 a^T L^-1 a + 1/sigma^2 sum W_nm rho(||y_m - f_n||)``."""
    a = np.asarray(a, dtype=np.float64)
    prior = 0.5 * float(np.sum(a * a / basis.kl_weights))
    w = _wmat(w)
    dist = cdist(_points(f_endpoints), _points(y))
    data = float(np.sum(w * huber(dist, cfg.r0))) / cfg.sigma2
    return prior + data


def least_squares_energy(a, w, f_endpoints, y, basis, sigma2):
    """Huber-free surrogate ``1/2 a^T L^-1 a + 1/(2 sigma^2) sum W ||y - f||^2``."""
    a = np.asarray(a, dtype=np.float64)
    dist2 = cdist(_points(f_endpoints), _points(y), "sqeuclidean")
    return 0.5 * float(np.sum(a * a / basis.kl_weights)) + float(np.sum(_wmat(w) * dist2)) / (2 * sigma2)


def huber_weights(w, f, y, r0):
    """Scale ``W_nm`` by ``r0 / ||f_n - y_m||`` wherever that distance exceeds ``r0``."""
    w = _wmat(w)
    dist = cdist(f, y)
    scale = np.ones_like(dist)
    far = dist > r0
    scale[far] = r0 / dist[far]
    return w * scale


def _residual_terms(w_hat, f, y):
    rowsum = w_hat.sum(axis=1)
    r = rowsum[:, None] * f - w_hat @ y
    return rowsum, r


def least_squares_gradient(a, w, f_endpoints, jac, y, basis, sigma2):
    """Gradient of ``sigma^2 * E_LS``: ``sigma^2 L^-1 a + J^T r``."""
    f, y = _points(f_endpoints), _points(y)
    _, r = _residual_terms(_wmat(w), f, y)
    jm = _jac_matrix(jac)
    return sigma2 * np.asarray(a) / basis.kl_weights + jm.T @ r.reshape(-1)


def _jac_matrix(jac):
    jac = getattr(jac, "jac", jac)
    n, d, k = jac.shape
    return jac.reshape(n * d, k)


def gauss_newton_step(a, w, f_endpoints, jac, y, basis, cfg=EmConfig(), robust=True):
    """One damped Gauss-Newton update for fixed correspondences.

    Solves ``(J^T W~ J + sigma^2 L^-1) delta = -(J^T r + sigma^2 L^-1 a)`` where
    ``r_n = sum_m W^_nm (f_n - y_m)``, ``W~`` repeats the row sums of ``W^``
    per coordinate, and ``W^`` is ``W`` after Huber reweighting (skipped when
    ``robust`` is False).  Returns ``a + delta``.
    """
    a = np.asarray(a, dtype=np.float64)
    f, y = _points(f_endpoints), _points(y)
    w_hat = huber_weights(w, f, y, cfg.r0) if robust else _wmat(w)
    rowsum, r = _residual_terms(w_hat, f, y)
    jm = _jac_matrix(jac)
    dim = f.shape[1]
    sw = np.sqrt(np.repeat(rowsum, dim))
    js = jm * sw[:, None]
    damping = cfg.sigma2 / basis.kl_weights
    lhs = js.T @ js
    lhs[np.diag_indices_from(lhs)] += damping
    rhs = -(jm.T @ r.reshape(-1) + damping * a)
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(rhs))):
        raise SingularSystem("non-finite entries in the Gauss-Newton system")
    try:
        delta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(lhs), rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(f"Gauss-Newton solve failed: {exc}") from None
    return a + delta


def line_search(a, step, objective, current, max_halvings=MAX_HALVINGS):
    """Halve ``step`` until ``objective`` does not exceed ``current``.

    Returns ``(a_new, value, halvings, extra)`` where ``extra`` is whatever
    the objective returned alongside its value.  If every trial increases
    the objective, ``a`` itself is returned with ``halvings = -1``.
    """
    for k in range(max_halvings + 1):
        trial = a + step * 0.5 ** k
        try:
            value, extra = objective(trial)
        except NonFiniteState:
            continue
        if value <= current:
            return trial, value, k, extra
    return a, current, -1, None


class _Problem:
    """Evaluates endpoints, correspondences and energy for trial coefficients."""

    def __init__(self, x, y, basis, model, flow_cfg, em_cfg, threads=None):
        self.x, self.y = x, y
        self.basis = basis
        self.model = model
        self.flow_cfg, self.em_cfg = flow_cfg, em_cfg
        self.threads = threads

    def evaluate(self, a):
        f, jac = propagate(self.x, self.basis, a, self.flow_cfg, self.threads)
        w = e_step(self.model, f, self.y, self.em_cfg)
        return energy(a, w, f, self.y, self.basis, self.em_cfg), (f, jac, w)


def run_em(x, y, basis, desc_x=None, desc_y=None, flow_cfg=FlowConfig(), em_cfg=EmConfig(),
           model=None, callback=None, threads=None):
    """Estimate field coefficients moving cloud ``x`` onto cloud ``y``.

    Starts from ``a = 0`` and alternates the E-step with one Gauss-Newton
    step.  A step is accepted only if the energy evaluated with the
    correspondences of the new iterate does not increase; otherwise it is
    halved up to ten times, and if that fails the iterate is kept and the
    iteration recorded in ``EmState.stalled``.  Stops after ``max_iters`` or
    once the relative energy change stays below ``rel_energy_tol`` for three
    consecutive iterations.
    """
    xp, yp = _points(x), _points(y)
    if model is None:
        model = build_distance_model(xp, yp, desc_x, desc_y)
    problem = _Problem(xp, yp, basis, model, flow_cfg, em_cfg, threads)
    a = np.zeros(basis.K)
    current, (f, jac, w) = problem.evaluate(a)
    history = [current]
    halvings, stalled = [], []
    quiet = 0
    converged = False
    it = 0
    for it in range(1, em_cfg.max_iters + 1):
        try:
            proposal = gauss_newton_step(a, w, f, jac, yp, basis, em_cfg)
            a_new, value, k, extra = line_search(a, proposal - a, problem.evaluate, current)
        except (NonFiniteState, SingularSystem) as exc:
            raise type(exc)(str(exc), iteration=it) from exc
        halvings.append(k)
        if k < 0:
            stalled.append(it)
        else:
            a = a_new
            f, jac, w = extra
        change = abs(current - value) / max(abs(current), 1e-300)
        current = value
        history.append(current)
        logger.debug("EM iteration %d: energy %.10g, halvings %d", it, current, k)
        if callback is not None:
            callback(iteration=it, energy=current, a=a)
        quiet = quiet + 1 if change < em_cfg.rel_energy_tol else 0
        if quiet >= CONVERGED_RUN:
            converged = True
            break
    return EmState(a, w, it, tuple(history), tuple(halvings), tuple(stalled), converged, f)


def extract_correspondences(f_full, y_full, model_full):
    """Hard matches: for every source point the target minimizing the combined distance.

    Ties go to the lowest target index.  Returns an ``(N, 2)`` array of
    ``(source_index, target_index)`` rows.
    """
    f, y = _points(f_full), _points(y_full)
    n, m = len(f), len(y)
    out = np.empty(n, dtype=np.intp)
    if not model_full.uses_descriptors and n * m > _BRUTE_FORCE_PAIRS:
        k = min(8, m)
        dist, idx = cKDTree(y).query(f, k=k)
        dist, idx = dist.reshape(n, k), idx.reshape(n, k)
        for i in range(n):
            out[i] = idx[i][dist[i] <= dist[i, 0]].min()
    else:
        step = max(1, _BRUTE_FORCE_PAIRS // max(m, 1))
        for start in range(0, n, step):
            rows = slice(start, min(n, start + step))
            out[rows] = np.argmin(combined_distance_matrix(model_full, f, y, rows), axis=1)
    return np.column_stack([np.arange(n), out])
