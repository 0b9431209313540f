"""Pure numpy implementation of the basis evaluation kernels.

Every basis entry is the curl pattern of a Dirichlet sine eigenfunction
``phi(x) = prod_d sqrt(2) sin(pi j_d x_d)``.  Output component ``i`` of
entry ``k`` equals ``sgn[k, i] * d(phi_k)/dx_{src[k, i]}``, so a single
table pair describes both the 2D and the 3D construction.

Points are processed in chunks so the ``(N, K)`` temporaries stay bounded.
"""

import numpy as np

SQRT2 = np.sqrt(2.0)
_CHUNK_ENTRIES = 1 << 21


def _factors(points, modes):
    """Per-dimension sine factors and their first/second derivatives."""
    n, dim = points.shape
    jmax = int(modes.max())
    freqs = np.pi * np.arange(1, jmax + 1, dtype=np.float64)
    f = np.empty((dim, n, modes.shape[0]))
    g = np.empty_like(f)
    q = np.empty_like(f)
    for d in range(dim):
        ang = points[:, d, None] * freqs[None, :]
        idx = modes[:, d] - 1
        w = np.pi * modes[:, d]
        f[d] = SQRT2 * np.sin(ang)[:, idx]
        g[d] = (SQRT2 * np.cos(ang))[:, idx] * w
        q[d] = -(f[d] * w) * w
    return f, g, q


def _product(parts):
    out = parts[0]
    for p in parts[1:]:
        out = out * p
    return out


def _gradient(f, g):
    dim = f.shape[0]
    return np.stack([_product([g[e] if e == d else f[e] for e in range(dim)])
                     for d in range(dim)])


def _hessian(f, g, q):
    dim = f.shape[0]
    h = np.empty((dim, dim) + f.shape[1:])
    for d in range(dim):
        h[d, d] = _product([q[e] if e == d else f[e] for e in range(dim)])
        for e2 in range(d + 1, dim):
            h[d, e2] = _product([g[e] if e in (d, e2) else f[e] for e in range(dim)])
            h[e2, d] = h[d, e2]
    return h


def _chunks(n, k):
    step = max(1, _CHUNK_ENTRIES // max(k, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def field(points, modes, src, sgn, a, jacobian=False, num_threads=0):
    n, dim = points.shape
    k = modes.shape[0]
    v = np.zeros((n, dim))
    jac = np.zeros((n, dim, dim)) if jacobian else None
    # coefficient of d(phi_k)/dx_d inside output component i
    coef = np.zeros((dim, dim, k))
    cols = np.arange(k)
    for i in range(dim):
        coef[i, src[:, i], cols] = a * sgn[:, i]
    for sl in _chunks(n, k):
        f, g, q = _factors(points[sl], modes)
        grad = _gradient(f, g)
        for i in range(dim):
            v[sl, i] = sum(grad[d] @ coef[i, d] for d in range(dim))
        if jacobian:
            hess = _hessian(f, g, q)
            for i in range(dim):
                for col in range(dim):
                    jac[sl, i, col] = sum(hess[d, col] @ coef[i, d] for d in range(dim))
    return v, jac


def basis(points, modes, src, sgn, entry_jacobians=False, num_threads=0):
    n, dim = points.shape
    k = modes.shape[0]
    values = np.empty((n, k, dim))
    djac = np.empty((n, k, dim, dim)) if entry_jacobians else None
    cols = np.arange(k)
    for sl in _chunks(n, k * (dim * dim if entry_jacobians else 1)):
        f, g, q = _factors(points[sl], modes)
        grad = _gradient(f, g)
        for i in range(dim):
            values[sl, :, i] = grad[src[:, i], :, cols].T * sgn[:, i]
        if entry_jacobians:
            hess = _hessian(f, g, q)
            for i in range(dim):
                for col in range(dim):
                    djac[sl, :, i, col] = hess[src[:, i], col, :, cols].T * sgn[:, i]
    return values, djac
