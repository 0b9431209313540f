"""Divergence-free spectral basis on the unit cube.

Scalar potentials are the Dirichlet eigenfunctions of the Laplacian on
``[0, 1]^D``,

    phi_j(x) = prod_d sqrt(2) sin(pi j_d x_d),    Delta phi_j = -pi^2 |j|^2 phi_j,

and each field entry is the curl of one potential component.  In 3D the
three entries of a frequency ``j`` are ``grad(phi_j) x e_c`` for
``c = 1, 2, 3``; in 2D the single entry is ``(d2 phi, -d1 phi)``.  Every entry
is divergence free and tangential on the cube boundary.

Entries carry Karhunen-Loeve prior variances ``(pi^2 |j|^2)^(-exponent)``
with ``exponent = D / 2`` by default.
"""

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SQRT2 = np.sqrt(2.0)

# output component i of grad(phi) x e_c is sign * d(phi)/dx_src
_CURL_3D = {
    1: ((0, 0.0), (2, 1.0), (1, -1.0)),
    2: ((2, -1.0), (0, 0.0), (0, 1.0)),
    3: ((1, 1.0), (0, -1.0), (0, 0.0)),
}
_CURL_2D = ((1, 1.0), (0, -1.0))


@dataclass(frozen=True, order=True)
class ModeIndex:
    """One basis entry: frequency multi-index ``j`` and curl component (1-based)."""

    j: tuple
    component: int = 1

    def __post_init__(self):
        if any(int(jd) < 1 for jd in self.j):
            raise ValueError(f"frequencies must be >= 1, got {self.j}")
        object.__setattr__(self, "j", tuple(int(jd) for jd in self.j))
        ncomp = 3 if len(self.j) == 3 else 1
        if not 1 <= self.component <= ncomp:
            raise ValueError(f"component {self.component} invalid for D={len(self.j)}")

    @property
    def dimension(self):
        return len(self.j)

    @property
    def laplace_eigenvalue(self):
        return -np.pi ** 2 * sum(jd * jd for jd in self.j)

    def pattern(self):
        """``(src, sign)`` pairs for each output component."""
        if self.dimension == 2:
            return _CURL_2D
        return _CURL_3D[self.component]


@dataclass(frozen=True, eq=False)
class DeformationBasis:
    dimension: int
    modes: tuple
    laplace_eigenvalues: np.ndarray
    kl_weights: np.ndarray
    exponent: float
    freqs: np.ndarray = field(repr=False)
    src: np.ndarray = field(repr=False)
    sgn: np.ndarray = field(repr=False)

    @property
    def K(self):
        return len(self.modes)

    def __len__(self):
        return len(self.modes)

    def field(self, a, x, jacobian=False, threads=None):
        """Evaluate ``v(x)`` at ``(N, D)`` points; optionally also ``D_x v``."""
        a = check_coefficients(self, a)
        return kernels.field(x, self.freqs, self.src, self.sgn, a, jacobian=jacobian,
                             threads=threads)

    def values(self, x, entry_jacobians=False, threads=None):
        """All entries at ``(N, D)`` points: ``(N, K, D)`` and optionally ``(N, K, D, D)``."""
        return kernels.basis(x, self.freqs, self.src, self.sgn,
                             entry_jacobians=entry_jacobians, threads=threads)

    def entries(self):
        """``(k, mode)`` pairs in basis order, ``k`` starting at 1."""
        return list(enumerate(self.modes, start=1))


def check_coefficients(basis, a):
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (basis.K,):
        raise ValueError(f"coefficient vector has shape {a.shape}, basis has K={basis.K}")
    if not np.all(np.isfinite(a)):
        raise ValueError("coefficient vector contains non-finite entries")
    return a


def _frequencies(dim, bound):
    jmax = int(np.floor(np.sqrt(bound)))
    return [j for j in itertools.product(range(1, jmax + 1), repeat=dim)
            if sum(jd * jd for jd in j) <= bound]


def basis_from_modes(dim, modes, exponent=None):
    if exponent is None:
        exponent = dim / 2
    modes = tuple(modes)
    lap = np.array([m.laplace_eigenvalue for m in modes])
    weights = (-lap) ** (-float(exponent))
    freqs = np.array([m.j for m in modes], dtype=np.intp).reshape(len(modes), dim)
    pats = [m.pattern() for m in modes]
    src = np.array([[s for s, _ in p] for p in pats], dtype=np.intp).reshape(len(modes), dim)
    sgn = np.array([[s for _, s in p] for p in pats], dtype=np.float64).reshape(len(modes), dim)
    for arr in (lap, weights, freqs, src, sgn):
        arr.setflags(write=False)
    return DeformationBasis(dim, modes, lap, weights, float(exponent), freqs, src, sgn)


def enumerate_basis(D, K, exponent=None):
    """First ``K`` entries ordered by ``|j|^2``, then ``j`` lexicographically, then component.

    Parameters
    ----------
    D : int
        Spatial dimension, 2 or 3.
    K : int
        Number of entries.  A frequency triple may be split by the cut.
    exponent : float, optional
        Prior decay exponent; defaults to ``D / 2``.  Smaller values are
        allowed but make the prior variance of the velocity diverge as
        ``K`` grows, so a warning is emitted.
    """
    if D not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {D}")
    if K < 1:
        raise ValueError("K must be at least 1")
    if exponent is None:
        exponent = D / 2
    elif exponent < D / 2:
        warnings.warn(f"KL exponent {exponent} < D/2 = {D / 2}: prior velocity variance "
                      "diverges with growing K", stacklevel=2)
    ncomp = 3 if D == 3 else 1
    bound = D
    while True:
        freqs = _frequencies(D, bound)
        if len(freqs) * ncomp >= K:
            break
        bound *= 2
    freqs.sort(key=lambda j: (sum(jd * jd for jd in j), j))
    modes = [ModeIndex(j, c) for j in freqs for c in range(1, ncomp + 1)][:K]
    return basis_from_modes(D, modes, exponent)


def _sine_factors(j, x):
    x = np.asarray(x, dtype=np.float64)
    w = np.pi * np.asarray(j, dtype=np.float64)
    ang = w * x
    f = SQRT2 * np.sin(ang)
    g = SQRT2 * np.cos(ang) * w
    q = -f * w * w
    return f, g, q


def eigenfunction(mode, x):
    """``prod_d sqrt(2) sin(pi j_d x_d)``, unit norm in L2 of the cube.

    ``x`` is one point ``(D,)`` (returns a float) or many ``(N, D)``.
    """
    j = mode.j if isinstance(mode, ModeIndex) else tuple(mode)
    f, _, _ = _sine_factors(j, x)
    out = np.prod(f, axis=-1)
    return float(out) if out.ndim == 0 else out


def _potential_gradient(j, x):
    f, g, _ = _sine_factors(j, x)
    dim = len(j)
    return np.array([np.prod([g[e] if e == d else f[e] for e in range(dim)])
                     for d in range(dim)])


def _potential_hessian(j, x):
    f, g, q = _sine_factors(j, x)
    dim = len(j)
    hess = np.empty((dim, dim))
    for d in range(dim):
        for e2 in range(dim):
            if d == e2:
                hess[d, d] = np.prod([q[e] if e == d else f[e] for e in range(dim)])
            else:
                hess[d, e2] = np.prod([g[e] if e in (d, e2) else f[e] for e in range(dim)])
    return hess


def basis_field(entry, x):
    """Single entry ``v_k(x)`` evaluated directly from its closed form."""
    grad = _potential_gradient(entry.j, x)
    return np.array([sign * grad[src] for src, sign in entry.pattern()])


def basis_field_jacobian(entry, x):
    """Analytic ``D_x v_k(x)``; row ``i`` holds the derivatives of component ``i``."""
    hess = _potential_hessian(entry.j, x)
    return np.array([sign * hess[src] for src, sign in entry.pattern()])


def evaluate_field(basis, a, x):
    """``v(x) = sum_k a_k v_k(x)`` for one point ``(D,)`` or many ``(N, D)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    v, _ = basis.field(a, np.atleast_2d(x))
    return v[0] if single else v


def field_jacobian(basis, a, x):
    """Spatial Jacobian of the summed field at one point or many."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    _, jac = basis.field(a, np.atleast_2d(x), jacobian=True)
    return jac[0] if single else jac


def sample_prior(basis, rng_seed):
    """Draw ``a_k = sqrt(lambda_k) xi_k`` with standard normal ``xi`` from a seeded generator."""
    xi = np.random.default_rng(rng_seed).standard_normal(basis.K)
    return np.sqrt(basis.kl_weights) * xi


def _pair_integrals(p, tp, q, tq):
    """``int_0^1 2 s_p(x) s_q(x) dx`` where ``s`` is ``sin`` (type 0) or ``cos`` (type 1) of ``pi p x``."""
    p, q = np.broadcast_arrays(p.astype(np.float64), q.astype(np.float64))
    eq = p == q
    denom = np.where(eq, 1.0, p * p - q * q)
    odd = (1.0 - (-1.0) ** (p + q)) / (np.pi * denom)
    # sin(pi p x) cos(pi q x) integrates to p (1 - (-1)^(p+q)) / (pi (p^2 - q^2))
    sin_cos = np.where(eq, 0.0, 2 * p * odd)
    cos_sin = np.where(eq, 0.0, -2 * q * odd)
    same = np.where(eq, 1.0, 0.0)
    return np.where(tp == tq, same, np.where(tp == 0, sin_cos, cos_sin))


def dirichlet_gram(basis):
    """Exact matrix ``G`` with ``||grad v||^2 = a^T G a`` over the unit cube.

    Every term of ``d_l v_i`` is a product of scaled sines and cosines, so
    each entry of ``G`` is a sum of products of one-dimensional integrals.
    """
    dim, k = basis.dimension, basis.K
    freqs = basis.freqs.astype(np.float64)
    gram = np.zeros((k, k))
    for i in range(dim):
        src, sgn = basis.src[:, i], basis.sgn[:, i]
        for l in range(dim):
            coef = sgn.copy()
            prod = np.ones((k, k))
            for d in range(dim):
                order = (src == d).astype(np.intp) + (1 if l == d else 0)
                coef *= (np.pi * freqs[:, d]) ** order * np.where(order == 2, -1.0, 1.0)
                kind = order % 2
                prod *= _pair_integrals(freqs[:, d][:, None], kind[:, None],
                                        freqs[:, d][None, :], kind[None, :])
            gram += np.outer(coef, coef) * prod
    return gram


def dirichlet_energy(basis, a):
    """Closed-form ``||grad v||^2`` over the unit cube.

    In 2D the entries are orthogonal in this seminorm and each contributes
    ``(lambda^Delta)^2``.  In 3D entries built from different curl
    components of different frequencies couple through sine-cosine
    products, so the full quadratic form of ``dirichlet_gram`` is used.
    """
    a = check_coefficients(basis, a)
    if basis.dimension == 2:
        lap = basis.laplace_eigenvalues
        return float(np.sum(a * a * lap * lap))
    return float(a @ dirichlet_gram(basis) @ a)
