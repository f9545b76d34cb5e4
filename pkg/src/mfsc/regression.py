"""Least-squares conditional expectations on polynomial or cubic-spline bases of the state."""

from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np
from scipy.interpolate import BSpline

__all__ = ["RegressionSingular", "Projector", "projectors_for"]


class RegressionSingular(np.linalg.LinAlgError):
    """Regression basis is rank deficient on the given sample."""


def _independent(feats, center, scale, live, tol: float = 1e-8) -> np.ndarray:
    """Mask keeping each live feature unless it is affine in the features kept before it."""
    keep = np.zeros(feats.shape[1], dtype=bool)
    basis = np.ones((feats.shape[0], 1)) / np.sqrt(feats.shape[0])
    for j in np.flatnonzero(live):
        z = (feats[:, j] - center[j]) / scale[j]
        resid = z - basis @ (basis.T @ z)
        norm = np.linalg.norm(resid)
        if norm > tol * np.sqrt(feats.shape[0]):
            keep[j] = True
            basis = np.column_stack([basis, resid / norm])
    return keep


class Projector:
    """Orthogonal projection onto polynomials (total degree <= ``degree``) of features.

    With ``knots > 0`` each feature instead enters through a cubic B-spline basis
    with that many interior knots at sample quantiles (mixed polynomial terms
    between different features are kept).  Splines follow kinks, such as those
    created by a reflecting boundary, that a global cubic cannot.

    Features that do not vary across the sample, or that are affine in earlier
    features, are dropped, so a deterministic state degenerates to the constant
    basis (the sample mean).
    """

    def __init__(self, features, degree: int = 3, rank_tol: float = 1e-10, knots: int = 0):
        feats = np.asarray(features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        self.n = feats.shape[0]
        center = feats.mean(axis=0)
        scale = feats.std(axis=0)
        live = scale > 1e-12 * (1.0 + np.abs(center))
        live &= _independent(feats, center, scale, live)
        self.center, self.scale, self.live = center[live], scale[live], live
        self.degree = degree if live.any() else 0
        self.terms = [c for j in range(1, self.degree + 1)
                      for c in combinations_with_replacement(range(int(live.sum())), j)]
        self.splines = []
        # keep roughly ten samples per spline function on small ensembles
        knots = min(knots, max(0, self.n // 10 - 4))
        if knots > 0 and live.any():
            # single-feature powers are spanned by the splines; keep only mixed terms
            self.terms = [c for c in self.terms if len(set(c)) > 1]
            z = (feats[:, live] - self.center) / self.scale
            for j in range(z.shape[1]):
                inner = np.unique(np.quantile(z[:, j], np.linspace(0, 1, knots + 2)[1:-1]))
                lo, hi = float(z[:, j].min()), float(z[:, j].max())
                inner = inner[(inner > lo) & (inner < hi)]
                t = np.concatenate([[lo] * 4, inner, [hi] * 4])
                self.splines.append(t)
        basis = self.basis(feats)
        q, r = np.linalg.qr(basis)
        diag = np.abs(np.diag(r))
        if diag.min() <= rank_tol * diag.max():
            raise RegressionSingular(
                f"basis of {basis.shape[1]} terms is rank deficient on {self.n} samples")
        self.q, self.r = q, r
        self.leverage = np.sum(q * q, axis=1)

    def basis(self, features) -> np.ndarray:
        feats = np.asarray(features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        z = (feats[:, self.live] - self.center) / self.scale if self.live.any() else feats[:, :0]
        cols = [np.ones(feats.shape[0])]
        for j, t in enumerate(self.splines):
            x = np.clip(z[:, j], t[0], t[-1])
            design = BSpline.design_matrix(x, t, 3).toarray()
            # drop the first function: the B-splines sum to one
            cols.extend(design[:, 1:].T)
        for term in self.terms:
            col = np.ones(feats.shape[0])
            for j in term:
                col = col * z[:, j]
            cols.append(col)
        return np.column_stack(cols)

    def project(self, values) -> np.ndarray:
        """Fitted conditional expectation at the sample points (columns projected independently)."""
        values = np.asarray(values, dtype=float)
        return self.q @ (self.q.T @ values)

    def coefficients(self, values) -> np.ndarray:
        return np.linalg.solve(self.r, self.q.T @ np.asarray(values, dtype=float))

    def predict(self, values, features) -> np.ndarray:
        """Evaluate the fitted function at new feature values."""
        return self.basis(features) @ self.coefficients(values)

    def standard_error(self, values) -> np.ndarray:
        """Pointwise standard error of the fitted values (residual variance times leverage)."""
        values = np.asarray(values, dtype=float)
        resid = values - self.project(values)
        dof = max(self.n - self.q.shape[1], 1)
        s2 = float(resid @ resid) / dof
        return np.sqrt(s2 * self.leverage)


def projectors_for(states: np.ndarray, degree: int = 3, knots: int = 0) -> list[Projector]:
    """One projector per grid column of ``states`` (N, n+1)."""
    return [Projector(states[:, k], degree, knots=knots) for k in range(states.shape[1])]
