"""Batched small-dimension linear algebra.

The simulation engine spends its time on stacks of d x d matrices with
d in {1, 2, 3}.  ``numpy.linalg`` handles arbitrary stacks but its per-call
overhead dominates at these sizes, so the hot operations get closed-form
fast paths for d <= 2 and fall back to LAPACK above that.
"""

import numpy as np


def sym(a):
    """Symmetric part of a matrix stack."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def det(g):
    """Determinant of a stack of d x d matrices."""
    d = g.shape[-1]
    if d == 1:
        return g[..., 0, 0]
    if d == 2:
        return g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    return np.linalg.det(g)


def inv(g):
    """Inverse of a stack of d x d matrices."""
    d = g.shape[-1]
    if d == 1:
        return 1.0 / g
    if d == 2:
        out = np.empty_like(g)
        dd = det(g)
        out[..., 0, 0] = g[..., 1, 1]
        out[..., 1, 1] = g[..., 0, 0]
        out[..., 0, 1] = -g[..., 0, 1]
        out[..., 1, 0] = -g[..., 1, 0]
        return out / dd[..., None, None]
    return np.linalg.inv(g)


def solve_mat_vec(a, w):
    """Solve a @ x = w for stacks of matrices ``a`` and vectors ``w``."""
    d = a.shape[-1]
    if d == 1:
        return w / a[..., 0, 0, None] if a.ndim == w.ndim + 1 else w / a[..., 0]
    if d == 2:
        dd = det(a)
        x0 = (a[..., 1, 1] * w[..., 0] - a[..., 0, 1] * w[..., 1]) / dd
        x1 = (-a[..., 1, 0] * w[..., 0] + a[..., 0, 0] * w[..., 1]) / dd
        return np.stack([x0, x1], axis=-1)
    return np.linalg.solve(a, w[..., None])[..., 0]


def cholesky_spd(g):
    """Lower Cholesky factor of a stack of SPD matrices."""
    d = g.shape[-1]
    if d == 1:
        return np.sqrt(g)
    if d == 2:
        out = np.zeros_like(g)
        l00 = np.sqrt(g[..., 0, 0])
        out[..., 0, 0] = l00
        out[..., 1, 0] = g[..., 1, 0] / l00
        out[..., 1, 1] = np.sqrt(g[..., 1, 1] - out[..., 1, 0] ** 2)
        return out
    return np.linalg.cholesky(g)


def noise_factor(g):
    """Matrix s with s s^T = g^{-1}, via the inverse transposed Cholesky factor."""
    d = g.shape[-1]
    L = cholesky_spd(g)
    if d == 1:
        return 1.0 / L
    if d == 2:
        # inv(L) closed form for lower triangular, then transpose
        out = np.zeros_like(g)
        out[..., 0, 0] = 1.0 / L[..., 0, 0]
        out[..., 1, 1] = 1.0 / L[..., 1, 1]
        out[..., 0, 1] = -L[..., 1, 0] / (L[..., 0, 0] * L[..., 1, 1])
        return out
    eye = np.broadcast_to(np.eye(d), g.shape)
    return np.swapaxes(np.linalg.solve(L, eye), -1, -2)


def expm_sym(s):
    """Matrix exponential of a stack of symmetric matrices."""
    d = s.shape[-1]
    if d == 1:
        return np.exp(s)
    if d == 2:
        # split off the trace; the traceless symmetric part squares to a
        # multiple of the identity, giving a cosh/sinh closed form
        half_tr = 0.5 * (s[..., 0, 0] + s[..., 1, 1])
        p = s[..., 0, 0] - half_tr
        q = s[..., 0, 1]
        m = np.sqrt(p * p + q * q)
        c = np.cosh(m)
        # sinh(m)/m with the m -> 0 limit
        f = np.where(m > 1e-30, np.sinh(np.where(m > 1e-30, m, 1.0)) /
                     np.where(m > 1e-30, m, 1.0), 1.0)
        out = np.empty_like(s)
        out[..., 0, 0] = c + f * p
        out[..., 1, 1] = c - f * p
        out[..., 0, 1] = f * q
        out[..., 1, 0] = f * q
        return out * np.exp(half_tr)[..., None, None]
    w, v = np.linalg.eigh(s)
    return np.einsum("...ik,...k,...jk->...ij", v, np.exp(w), v)


def gram_schmidt(frames, g):
    """Orthonormalize frame columns in the inner product of ``g``, in place.

    ``frames`` has shape (..., d, d) with tangent vectors in the columns.
    """
    d = frames.shape[-1]
    gf = g @ frames
    for a in range(d):
        col = frames[..., :, a]
        for b in range(a):
            prev = frames[..., :, b]
            coef = np.einsum("...i,...i->...", col, gf[..., :, b])
            col = col - coef[..., None] * prev
            gf[..., :, a] = np.einsum("...ij,...j->...i", g, col)
        norm = np.sqrt(np.einsum("...i,...i->...", col, gf[..., :, a]))
        frames[..., :, a] = col / norm[..., None]
        gf[..., :, a] /= norm[..., None]
    return frames


def quadratic_form(g, u, v=None):
    """g(u, v) for stacks of matrices and vectors."""
    if v is None:
        v = u
    return np.einsum("...i,...ij,...j->...", u, g, v)


def frame_defect(frames, g):
    """Max-entry deviation of F^T g F from the identity."""
    d = frames.shape[-1]
    gram = np.swapaxes(frames, -1, -2) @ g @ frames
    return np.abs(gram - np.eye(d)).max(axis=(-1, -2))
