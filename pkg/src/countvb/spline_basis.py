"""Mixed-model penalized spline bases for the smooth terms.

The construction follows the low-rank penalized-spline recipe: cubic
B-splines on quantile-spaced interior knots, penalized by the integrated
squared second derivative, spectrally transformed so the penalized
subspace carries an identity penalty.  Concretely, with B the n x (K+2)
cubic B-spline design on K-2 interior knots and Omega the Gram matrix of
second derivatives, the returned columns are

    Z = B U diag(d)^(-1/2)

where (U, d) are the eigenpairs of Omega with positive eigenvalues (there
are exactly K of them; the two-dimensional null space is the linear
polynomials already carried by the parametric design columns).  In this
basis the smoothness prior on the coefficients is iid Gaussian.

Predictors are standardized to zero mean and unit standard deviation
before knot placement; the standardization constants live on the returned
``SplineBasis`` so fits can be reported in original units and streaming
rows can be built from raw records.  A ``SplineBasis`` is immutable after
construction and safe for shared concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import DesignError

__all__ = ["SplineBasis", "build_basis", "eval_basis", "eval_basis_many", "standardize"]

_DEGREE = 3
_EIG_RELATIVE_CUTOFF = 1e-10


def standardize(x):
    """Center/scale a predictor; returns (z, mean, sd) with sample (ddof=1) sd."""
    x = np.asarray(x, dtype=float)
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    if not sd > 0.0:
        raise DesignError("predictor has zero variance; cannot standardize")
    return (x - mean) / sd, mean, sd


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Frozen description of one smooth term's basis.

    ``knots`` is the full cubic knot vector on the standardized scale
    (boundary knots repeated 4 times); ``transform`` maps raw B-spline
    coefficients to the K penalized mixed-model columns.
    """

    interior_knots: np.ndarray
    boundary: tuple
    knots: np.ndarray
    transform: np.ndarray
    K: int
    x_mean: float
    x_sd: float

    def to_dict(self) -> dict:
        return {
            "interior_knots": self.interior_knots.tolist(),
            "boundary": [self.boundary[0], self.boundary[1]],
            "knots": self.knots.tolist(),
            "transform": self.transform.tolist(),
            "K": self.K,
            "x_mean": self.x_mean,
            "x_sd": self.x_sd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(
            interior_knots=np.asarray(d["interior_knots"], dtype=float),
            boundary=(float(d["boundary"][0]), float(d["boundary"][1])),
            knots=np.asarray(d["knots"], dtype=float),
            transform=np.asarray(d["transform"], dtype=float),
            K=int(d["K"]),
            x_mean=float(d["x_mean"]),
            x_sd=float(d["x_sd"]),
        )


def _second_derivative_gram(knots, n_basis):
    """Gram matrix of second derivatives of the cubic B-spline basis.

    Second derivatives are piecewise linear, so their products are
    piecewise quadratic and composite Simpson per knot span is exact.
    """
    spl = BSpline(knots, np.eye(n_basis), _DEGREE)
    d2 = spl.derivative(2)
    breaks = np.unique(knots)
    omega = np.zeros((n_basis, n_basis))
    for a, b in zip(breaks[:-1], breaks[1:]):
        pts = np.array([a, 0.5 * (a + b), b])
        vals = d2(pts)  # 3 x n_basis
        w = (b - a) / 6.0
        omega += w * (
            np.outer(vals[0], vals[0])
            + 4.0 * np.outer(vals[1], vals[1])
            + np.outer(vals[2], vals[2])
        )
    return omega


def build_basis(x, K):
    """Build the mixed-model spline basis for predictor ``x`` with K columns.

    Returns ``(basis, Z)`` where Z is the n x K penalized design block.
    Deterministic: identical inputs give bit-identical outputs.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if K < 2:
        raise DesignError(f"K must be at least 2, got {K}")
    if n <= K + 4:
        raise DesignError(f"need n > K + 4 observations, got n={n} for K={K}")
    z, mean, sd = standardize(x)
    uniq = np.unique(z)
    if uniq.shape[0] < K:
        raise DesignError(
            f"need at least K={K} distinct predictor values, got {uniq.shape[0]}"
        )

    lo, hi = float(uniq[0]), float(uniq[-1])
    probs = np.arange(1, K - 1) / (K - 1.0)
    interior = np.quantile(uniq, probs)
    knots = np.concatenate(([lo] * (_DEGREE + 1), interior, [hi] * (_DEGREE + 1)))
    n_basis = interior.shape[0] + _DEGREE + 1  # == K + 2

    B = BSpline.design_matrix(z, knots, _DEGREE).toarray()
    omega = _second_derivative_gram(knots, n_basis)
    eigval, eigvec = np.linalg.eigh(omega)
    keep = eigval > _EIG_RELATIVE_CUTOFF * eigval[-1]
    if int(np.sum(keep)) != K:
        raise DesignError(
            f"penalty matrix has numerical rank {int(np.sum(keep))}, expected {K}"
        )
    order = np.argsort(eigval[keep])[::-1]
    vals = eigval[keep][order]
    vecs = eigvec[:, keep][:, order]
    transform = vecs / np.sqrt(vals)

    basis = SplineBasis(
        interior_knots=interior,
        boundary=(lo, hi),
        knots=knots,
        transform=transform,
        K=K,
        x_mean=mean,
        x_sd=sd,
    )
    return basis, B @ transform


def eval_basis(basis: SplineBasis, x_new):
    """Evaluate the K basis functions at one raw predictor value.

    Returns ``(row, clamped)``; points outside the training range are
    clamped to the nearest boundary and flagged rather than extrapolated.
    """
    z = (float(x_new) - basis.x_mean) / basis.x_sd
    lo, hi = basis.boundary
    clamped = z < lo or z > hi
    z = min(max(z, lo), hi)
    b_row = BSpline.design_matrix(np.array([z]), basis.knots, _DEGREE).toarray()[0]
    return b_row @ basis.transform, clamped


def eval_basis_many(basis: SplineBasis, x_new):
    """Vectorized ``eval_basis`` over an array of raw predictor values."""
    z = (np.asarray(x_new, dtype=float) - basis.x_mean) / basis.x_sd
    lo, hi = basis.boundary
    clamped = (z < lo) | (z > hi)
    z = np.clip(z, lo, hi)
    B = BSpline.design_matrix(z, basis.knots, _DEGREE).toarray()
    return B @ basis.transform, clamped
