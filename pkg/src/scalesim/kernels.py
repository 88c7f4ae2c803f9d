"""Hot inner loops of the decision step.

Every kernel exists twice: a numba ``@njit`` version and a vectorised numpy
version with identical semantics. ``group_moments`` and ``bh_adjust_rows``
dispatch on :data:`scalesim._accel.USE_NUMBA`; both variants stay importable
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
import numpy as np

from . import _accel
from ._accel import JIT_OPTIONS, njit


# ---------------------------------------------------------------------------
# per-draw, per-taxon two-group moments
# ---------------------------------------------------------------------------

def group_moments_numpy(x, group):
    """Means and unbiased variances of ``x[s, i, group==g]`` for g in {0, 1}.

    Parameters
    ----------
    x : ndarray (S, D, N)
    group : ndarray (N,) of 0/1

    Returns
    -------
    m0, v0, m1, v1 : ndarray (S, D)
    """
    g = np.asarray(group, dtype=bool)
    a = x[..., ~g]
    b = x[..., g]
    return a.mean(axis=-1), a.var(axis=-1, ddof=1), b.mean(axis=-1), b.var(axis=-1, ddof=1)


@njit(**JIT_OPTIONS)
def _group_moments_jit(x, group):
    S, D, N = x.shape
    m0 = np.zeros((S, D))
    v0 = np.zeros((S, D))
    m1 = np.zeros((S, D))
    v1 = np.zeros((S, D))
    n1 = 0
    for j in range(N):
        n1 += group[j]
    n0 = N - n1
    for s in range(S):
        for i in range(D):
            s0 = 0.0
            s1 = 0.0
            for j in range(N):
                if group[j]:
                    s1 += x[s, i, j]
                else:
                    s0 += x[s, i, j]
            mu0 = s0 / n0
            mu1 = s1 / n1
            q0 = 0.0
            q1 = 0.0
            for j in range(N):
                if group[j]:
                    d = x[s, i, j] - mu1
                    q1 += d * d
                else:
                    d = x[s, i, j] - mu0
                    q0 += d * d
            m0[s, i] = mu0
            m1[s, i] = mu1
            v0[s, i] = q0 / (n0 - 1)
            v1[s, i] = q1 / (n1 - 1)
    return m0, v0, m1, v1


def group_moments_numba(x, group):
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(group, dtype=np.int64)
    return _group_moments_jit(x, g)


# ---------------------------------------------------------------------------
# Benjamini-Hochberg within each row
# ---------------------------------------------------------------------------

def bh_adjust_rows_numpy(p):
    """Step-up BH adjustment applied independently to each row of ``p``."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    m = p.shape[1]
    order = np.argsort(p, axis=1, kind="stable")
    ranked = np.take_along_axis(p, order, axis=1)
    adj = ranked * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(adj[:, ::-1], axis=1)[:, ::-1]
    np.minimum(adj, 1.0, out=adj)
    out = np.empty_like(adj)
    np.put_along_axis(out, order, adj, axis=1)
    return out


@njit(**JIT_OPTIONS)
def _bh_rows_jit(p):
    S, m = p.shape
    out = np.empty_like(p)
    for s in range(S):
        order = np.argsort(p[s], kind="mergesort")
        running = 1.0
        for k in range(m - 1, -1, -1):
            idx = order[k]
            val = p[s, idx] * m / (k + 1)
            if val < running:
                running = val
            out[s, idx] = running
    return out


def bh_adjust_rows_numba(p):
    p = np.atleast_2d(np.ascontiguousarray(p, dtype=np.float64))
    return _bh_rows_jit(p)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def group_moments(x, group):
    if _accel.USE_NUMBA:
        return group_moments_numba(x, group)
    return group_moments_numpy(x, group)


def bh_adjust_rows(p):
    if _accel.USE_NUMBA:
        return bh_adjust_rows_numba(p)
    return bh_adjust_rows_numpy(p)
