"""Design assembly and hyperparameters for the additive mixed models.

The linear predictor is X beta + Z u with X = [1, standardized linear
terms], one Z block of K penalized spline columns per smooth term, and
optionally one 0/1 indicator block for grouped random intercepts.  Each
Z block carries its own variance parameter with a Half-Cauchy prior on
the standard deviation; beta has an iid Gaussian prior with standard
deviation ``sigma_beta``.

Default hyperparameters are the weakly informative settings
sigma_beta = A_l = 1e5 and a Uniform(1/100, 100) prior on the Negative
Binomial shape, intended for standardized predictors (standardization
happens at assembly; the transforms are retained so fitted functions can
be reported in original units).

``DesignBlocks`` is immutable after construction and safe for shared
concurrent reads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DesignError, ParameterError
from .spline_basis import SplineBasis, build_basis, standardize

__all__ = [
    "Family",
    "Hyperparameters",
    "DesignBlocks",
    "ModelSpec",
    "assemble_design",
    "default_hyperparameters",
    "design_from_table",
]


class Family(str, enum.Enum):
    POISSON = "poisson"
    NEGBIN = "negbin"


@dataclass(frozen=True)
class Hyperparameters:
    """Prior settings: sigma_beta, per-block Half-Cauchy scales A, kappa range."""

    sigma_beta: float
    A: tuple
    kappa_min: float = 0.01
    kappa_max: float = 100.0

    def __post_init__(self):
        if not self.sigma_beta > 0:
            raise ParameterError("sigma_beta must be positive")
        if any(a <= 0 for a in self.A):
            raise ParameterError("all Half-Cauchy scales A must be positive")
        if not (0 < self.kappa_min < self.kappa_max):
            raise ParameterError(
                f"requires 0 < kappa_min < kappa_max, got "
                f"[{self.kappa_min}, {self.kappa_max}]"
            )


def default_hyperparameters(r: int) -> Hyperparameters:
    """Weakly informative defaults: sigma_beta = A_l = 1e5, kappa in [1/100, 100]."""
    if r < 0:
        raise ParameterError("r must be nonnegative")
    return Hyperparameters(sigma_beta=1e5, A=(1e5,) * r)


@dataclass(frozen=True, eq=False)
class DesignBlocks:
    """Assembled design: C = [X Z] with Z partitioned into variance blocks.

    ``block_sizes`` lists the K_l in Z-column order; smooth blocks come
    first (in ``smooth_spec`` order), then the optional group-intercept
    block.  The standardizations and spline bases used at assembly are
    retained for prediction and streaming.
    """

    X: np.ndarray
    Z: np.ndarray
    block_sizes: tuple
    linear_standardizations: tuple  # (mean, sd) per predictor, X-column order
    smooth_predictors: tuple  # predictor index of each smooth block
    smooth_bases: tuple  # SplineBasis per smooth block
    group_levels: Optional[tuple] = None
    C: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.X.ndim != 2 or self.Z.ndim != 2 or self.X.shape[0] != self.Z.shape[0]:
            raise DesignError("X and Z must be matrices with equal row counts")
        if sum(self.block_sizes) != self.Z.shape[1]:
            raise DesignError("block sizes do not add up to the Z column count")
        if any(k < 1 for k in self.block_sizes):
            raise DesignError("every block must have at least one column")
        object.__setattr__(self, "C", np.hstack([self.X, self.Z]))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def P(self) -> int:
        return self.C.shape[1]

    @property
    def r(self) -> int:
        return len(self.block_sizes)

    def block_slice(self, ell: int) -> slice:
        """Columns of C occupied by variance block ``ell`` (0-based)."""
        start = self.p + sum(self.block_sizes[:ell])
        return slice(start, start + self.block_sizes[ell])


def assemble_design(
    predictors: Sequence[np.ndarray],
    smooth_spec: Sequence[tuple],
    groups=None,
) -> DesignBlocks:
    """Assemble X, Z and the block structure.

    ``predictors`` are real-valued vectors that each enter X as a
    standardized linear column (after the intercept); ``smooth_spec`` is a
    list of (predictor index, K) pairs adding one penalized spline block
    per entry; ``groups`` is an optional vector of labels adding one
    indicator block of random intercepts.
    """
    arrays = [np.asarray(v, dtype=float) for v in predictors]
    if arrays:
        n = arrays[0].shape[0]
    elif groups is not None:
        n = len(groups)
    else:
        raise DesignError("need at least one predictor or a grouping vector")
    for v in arrays:
        if v.shape != (n,):
            raise DesignError("all predictor vectors must share the same length")
    if groups is not None and len(groups) != n:
        raise DesignError("grouping vector length differs from the predictors")

    smooth_bases = []
    smooth_predictors = []
    z_blocks = []
    block_sizes = []
    basis_by_predictor = {}
    for idx, K in smooth_spec:
        if not 0 <= idx < len(arrays):
            raise DesignError(f"smooth term refers to unknown predictor {idx}")
        basis, Zb = build_basis(arrays[idx], K)
        basis_by_predictor[idx] = basis
        smooth_bases.append(basis)
        smooth_predictors.append(idx)
        z_blocks.append(Zb)
        block_sizes.append(K)

    x_cols = [np.ones(n)]
    standardizations = []
    for j, v in enumerate(arrays):
        if j in basis_by_predictor:
            b = basis_by_predictor[j]
            mean, sd = b.x_mean, b.x_sd
            x_cols.append((v - mean) / sd)
        else:
            zj, mean, sd = standardize(v)
            x_cols.append(zj)
        standardizations.append((mean, sd))

    group_levels = None
    if groups is not None:
        labels = [str(g) for g in groups]
        group_levels = tuple(sorted(set(labels)))
        if len(group_levels) < 2:
            raise DesignError("grouping variable must have at least two levels")
        level_index = {g: i for i, g in enumerate(group_levels)}
        ind = np.zeros((n, len(group_levels)))
        for i, g in enumerate(labels):
            ind[i, level_index[g]] = 1.0
        z_blocks.append(ind)
        block_sizes.append(len(group_levels))

    Z = np.hstack(z_blocks) if z_blocks else np.zeros((n, 0))
    X = np.column_stack(x_cols)
    return DesignBlocks(
        X=X,
        Z=Z,
        block_sizes=tuple(block_sizes),
        linear_standardizations=tuple(standardizations),
        smooth_predictors=tuple(smooth_predictors),
        smooth_bases=tuple(smooth_bases),
        group_levels=group_levels,
    )


@dataclass(frozen=True)
class ModelSpec:
    """JSON-expressible model description for the CLI and streaming runs.

    Schema::

        {
          "count_column": "y",
          "predictors": [{"column": "x1", "K": 17}, {"column": "x2", "K": 17}],
          "group_column": "region",            # optional
          "family": "poisson",                 # optional, default poisson
          "hyperparameters": {"sigma_beta": ..., "A": [...],
                              "kappa_min": ..., "kappa_max": ...}   # optional
        }

    A predictor entry with a "K" key gets a penalized smooth (K >= 2);
    entries without one enter the model linearly only.
    """

    count_column: str
    predictor_columns: tuple
    smooth_spec: tuple  # (predictor index, K)
    group_column: Optional[str] = None
    family: Family = Family.POISSON
    hyper_overrides: Optional[dict] = None

    @classmethod
    def from_config(cls, config: dict) -> "ModelSpec":
        try:
            count_column = config["count_column"]
            predictors = config["predictors"]
        except KeyError as exc:
            raise DesignError(f"model config is missing required key {exc}") from exc
        columns = []
        smooth = []
        for j, entry in enumerate(predictors):
            columns.append(entry["column"])
            if "K" in entry:
                K = int(entry["K"])
                if K < 2:
                    raise DesignError(f"smooth K must be >= 2, got {K}")
                smooth.append((j, K))
        family = Family(config.get("family", "poisson"))
        return cls(
            count_column=count_column,
            predictor_columns=tuple(columns),
            smooth_spec=tuple(smooth),
            group_column=config.get("group_column"),
            family=family,
            hyper_overrides=config.get("hyperparameters"),
        )

    def hyperparameters(self, r: int) -> Hyperparameters:
        base = default_hyperparameters(r)
        if not self.hyper_overrides:
            return base
        ov = dict(self.hyper_overrides)
        A = ov.get("A", base.A)
        if np.isscalar(A):
            A = (float(A),) * r
        else:
            A = tuple(float(a) for a in A)
            if len(A) != r:
                raise ParameterError(f"A must have one entry per block ({r})")
        return Hyperparameters(
            sigma_beta=float(ov.get("sigma_beta", base.sigma_beta)),
            A=A,
            kappa_min=float(ov.get("kappa_min", base.kappa_min)),
            kappa_max=float(ov.get("kappa_max", base.kappa_max)),
        )


def design_from_table(table: dict, spec: ModelSpec):
    """Build (design, y, hyper) from a column table per a ``ModelSpec``."""
    try:
        y_raw = table[spec.count_column]
    except KeyError as exc:
        raise DesignError(f"count column {spec.count_column!r} not in data") from exc
    y = np.asarray(y_raw, dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DesignError("response column must contain nonnegative integers")
    predictors = []
    for col in spec.predictor_columns:
        try:
            predictors.append(np.asarray(table[col], dtype=float))
        except KeyError as exc:
            raise DesignError(f"predictor column {col!r} not in data") from exc
    groups = None
    if spec.group_column is not None:
        try:
            groups = table[spec.group_column]
        except KeyError as exc:
            raise DesignError(f"group column {spec.group_column!r} not in data") from exc
    design = assemble_design(predictors, spec.smooth_spec, groups)
    hyper = spec.hyperparameters(design.r)
    return design, y.astype(np.int64), hyper
