"""Log-ratio transforms and contrast maps for compositions.

Compositions are stored with taxa along axis 0 (``D x ...``) so a ``D x N``
table of columns or an ``S x D x N`` stack can be passed with ``axis``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CompositionError(ValueError):
    pass


def _check_positive(v, what):
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise CompositionError(f"{what}: empty input")
    if not np.all(v > 0) or not np.all(np.isfinite(v)):
        raise CompositionError(f"{what} requires strictly positive finite entries")
    return v


def closure(v, axis=0):
    v = _check_positive(v, "closure")
    return v / v.sum(axis=axis, keepdims=True)


def centered_logs(logv, axis=0):
    """Subtract the mean along ``axis``; shared by :func:`clr` and the CLR
    scale restriction so both produce bit-identical coordinates."""
    return logv - logv.mean(axis=axis, keepdims=True)


def clr(x, axis=0):
    x = _check_positive(x, "clr")
    return centered_logs(np.log(x), axis=axis)


def geometric_mean(x, axis=0):
    x = _check_positive(x, "geometric_mean")
    return np.exp(np.log(x).mean(axis=axis))


def alr(x, axis=0):
    """Additive log-ratio with the last component as reference."""
    x = _check_positive(x, "alr")
    lx = np.moveaxis(np.log(x), axis, 0)
    return np.moveaxis(lx[:-1] - lx[-1], 0, axis)


def alr_inv(y, axis=0):
    y = np.moveaxis(np.asarray(y, dtype=float), axis, 0)
    z = np.concatenate([y, np.zeros((1,) + y.shape[1:])], axis=0)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return np.moveaxis(e / e.sum(axis=0, keepdims=True), 0, axis)


@dataclass(frozen=True)
class ContrastMaps:
    """``F = [I, -1]``, ``H = 1^T`` and ``G = [F; H]`` for ``D`` parts."""

    D: int

    def __post_init__(self):
        if self.D < 2:
            raise CompositionError("contrast maps need D >= 2")

    @property
    def F(self):
        return np.hstack([np.eye(self.D - 1), -np.ones((self.D - 1, 1))])

    @property
    def H(self):
        return np.ones((1, self.D))

    @property
    def G(self):
        return np.vstack([self.F, self.H])

    @property
    def G_inv(self):
        # closed form of the inverse, see reassemble()
        D = self.D
        Gi = np.zeros((D, D))
        Gi[: D - 1, : D - 1] = np.eye(D - 1) - 1.0 / D
        Gi[D - 1, : D - 1] = -1.0 / D
        Gi[:, D - 1] = 1.0 / D
        return Gi


def contrast_maps(D):
    return ContrastMaps(int(D))


def apply_contrast(psi):
    """Split ``psi`` (D x N) into ``(F psi, H psi)``."""
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    if psi.shape[0] < 2:
        raise CompositionError("apply_contrast needs at least two rows")
    par = psi[:-1] - psi[-1]
    perp = psi.sum(axis=0, keepdims=True)
    return par, perp


def reassemble(psi_par, psi_perp):
    """Inverse of :func:`apply_contrast`.

    The last row is ``(psi_perp - sum(psi_par)) / D`` and every other row is
    its ALR coordinate plus that value. Works on stacks with taxa on axis -2.
    """
    psi_par = np.asarray(psi_par, dtype=float)
    psi_perp = np.asarray(psi_perp, dtype=float)
    D = psi_par.shape[-2] + 1
    last = (psi_perp - psi_par.sum(axis=-2, keepdims=True)) / D
    return np.concatenate([psi_par + last, last], axis=-2)


def delta_discrepancy(logscale_case, logscale_control, comp_case, comp_control):
    """Gap between the scale change implied by the geometric-mean
    normalisation and the true scale change.

    Zero exactly when the CLR restriction recovers the true log-scale ratio.
    """
    lg_case = np.log(geometric_mean(comp_case))
    lg_ctrl = np.log(geometric_mean(comp_control))
    return float((lg_ctrl - lg_case) - (logscale_case - logscale_control))


@dataclass(frozen=True)
class SparccSystem:
    t: np.ndarray

    @property
    def Q(self):
        D = self.t.shape[0]
        return (D - 2) * np.eye(D) + np.ones((D, D))


def sparcc_variance_solve(t):
    """Basis variances ``w`` solving ``Q w = t`` with ``Q = (D-1) on the
    diagonal and 1 elsewhere``."""
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.shape[0] < 3:
        raise CompositionError("sparcc_variance_solve needs a vector with D >= 3")
    Q = SparccSystem(t).Q
    try:
        return np.linalg.solve(Q, t)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - Q is nonsingular for D >= 3
        raise CompositionError("SparCC system is singular") from exc
