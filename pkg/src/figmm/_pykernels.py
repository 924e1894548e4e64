"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled versions are tested against.
"""
import numpy as np
from scipy import linalg


def quadform_by_component(values, comp, means, chol):
    """q[d] = || chol^{-1} (values[d] - means[comp[d]]) ||^2."""
    if values.shape[0] == 0:
        return np.zeros(0)
    r = values - means[comp]
    z = linalg.solve_triangular(chol, r.T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", z, z)


def segment_softmax(logw, ptr):
    """Normalize exp(logw) within segments ``ptr[s]:ptr[s+1]``.

    Returns ``(weights, bad)`` where ``bad`` is the first segment whose
    entries are all -inf (or -1 when every segment is fine).
    """
    out = np.empty_like(logw)
    if logw.size == 0:
        return out, -1
    starts = ptr[:-1]
    lengths = np.diff(ptr)
    mx = np.maximum.reduceat(logw, starts)
    bad = np.flatnonzero(~np.isfinite(mx))
    if bad.size:
        return out, int(bad[0])
    e = np.exp(logw - np.repeat(mx, lengths))
    s = np.add.reduceat(e, starts)
    out[:] = e / np.repeat(s, lengths)
    return out, -1


def weighted_component_stats(values, comp, weights, G):
    """Per-component weight mass and means plus the pooled centered scatter."""
    p = values.shape[1]
    mass = np.bincount(comp, weights=weights, minlength=G)
    sums = np.empty((G, p))
    for j in range(p):
        sums[:, j] = np.bincount(comp, weights=weights * values[:, j], minlength=G)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / mass[:, None]
    r = values - means[comp]
    scatter = (r * weights[:, None]).T @ r
    return mass, means, scatter
