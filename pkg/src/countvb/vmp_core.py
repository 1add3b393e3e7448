"""Batch variational message passing for the count-response mixed models.

The posterior over (beta, u) is approximated by a Gaussian whose natural
parameters are refreshed with closed-form non-conjugate updates; the
variance parameters get Inverse-Gamma q-densities via the nested
Inverse-Gamma representation of the Half-Cauchy prior, and the Negative
Binomial family additionally carries Gamma q-densities for the latent
Poisson rates and a kernel q-density for the shape parameter evaluated by
quadrature.  One cycle of ``fit`` executes, in order:

1. refresh of the prior precision diagonal M from the variance moments;
2. the family-specific working-vector and mean updates (for the Negative
   Binomial also the latent-rate moments, the scalar C1 and the shape
   posterior mean);
3. the covariance refresh Sigma = (kappa_mean C' diag(g_mean * w) C + M)^-1
   (the Poisson branch sets the g and kappa moments to one, so the weight
   reduces to diag(w));
4. the per-block variance-moment updates;

and stops when the relative change of the evidence lower bound drops
below ``tol``.  The bound is not globally monotone for these updates;
monotonicity is only asserted near the fixed point.

A fit is a single sequential optimization confined to one execution
context; independent fits may run fully in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import digamma, gammaln

from .errors import NumericalError, ParameterError
from .model import DesignBlocks, Family, Hyperparameters, default_hyperparameters
from .quadrature import HArgs, kappa_kernel_expectation, kappa_posterior_mean, log_H

__all__ = [
    "GaussianQ",
    "VarianceQ",
    "NegBinAux",
    "FitResult",
    "FitConfig",
    "VmpState",
    "fit",
    "initial_state",
    "m_diag",
    "poisson_mean_update",
    "negbin_updates",
    "covariance_update",
    "variance_param_update",
    "elbo",
    "expected_log_joint_S",
    "grad_S_mu",
    "grad_S_Sigma",
    "predict",
]

_EXP_CLAMP = 700.0


@dataclass
class GaussianQ:
    """Gaussian q-density over the stacked coefficient vector (beta, u)."""

    mu: np.ndarray
    Sigma: np.ndarray

    def to_dict(self):
        return {"mu": self.mu.tolist(), "Sigma": self.Sigma.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mu"], float), np.asarray(d["Sigma"], float))


@dataclass
class VarianceQ:
    """Per-block variance q-densities: reciprocal moments and shape/rate pairs."""

    mu_recip_sigma2: np.ndarray
    mu_recip_a: np.ndarray
    sigma2_shape: np.ndarray
    sigma2_rate: np.ndarray
    a_shape: np.ndarray
    a_rate: np.ndarray

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], float) for k in cls.__dataclass_fields__})


@dataclass
class NegBinAux:
    """Negative Binomial auxiliary moments: latent rates and shape parameter."""

    mu_g: np.ndarray
    mu_log_g: np.ndarray
    mu_kappa: float
    C1: float

    def to_dict(self):
        return {
            "mu_g": self.mu_g.tolist(),
            "mu_log_g": self.mu_log_g.tolist(),
            "mu_kappa": self.mu_kappa,
            "C1": self.C1,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["mu_g"], float),
            np.asarray(d["mu_log_g"], float),
            float(d["mu_kappa"]),
            float(d["C1"]),
        )


@dataclass
class FitResult:
    """Converged q-density parameters plus the optimization trace."""

    family: Family
    gaussian: GaussianQ
    variances: VarianceQ
    negbin: Optional[NegBinAux]
    elbo_trace: np.ndarray
    iterations: int
    converged: bool
    w: np.ndarray
    clamp_iterations: tuple = ()

    def to_dict(self):
        return {
            "family": self.family.value,
            "gaussian": self.gaussian.to_dict(),
            "variances": self.variances.to_dict(),
            "negbin": None if self.negbin is None else self.negbin.to_dict(),
            "elbo_trace": self.elbo_trace.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "w": self.w.tolist(),
            "clamp_iterations": list(self.clamp_iterations),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            family=Family(d["family"]),
            gaussian=GaussianQ.from_dict(d["gaussian"]),
            variances=VarianceQ.from_dict(d["variances"]),
            negbin=None if d["negbin"] is None else NegBinAux.from_dict(d["negbin"]),
            elbo_trace=np.asarray(d["elbo_trace"], float),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            w=np.asarray(d["w"], float),
            clamp_iterations=tuple(d.get("clamp_iterations", ())),
        )


@dataclass
class FitConfig:
    """Stopping rule, initialization, and fixed-point polish settings.

    Convergence is declared when |delta ELBO| / (|ELBO| + 1) < tol.  With
    ``polish`` on, cycling continues past ELBO convergence until a full
    cycle moves the state by less than ``polish_tol`` in relative sup-norm
    (or ``polish_max_iter`` extra cycles), so that re-applying any single
    update leaves a converged fit essentially unchanged.

    ``init="ridge"`` starts the mean at a ridge fit of log(y + 1/2) with a
    Fisher-scaled covariance; ``init="identity"`` starts at mu = 0,
    Sigma = I, which overshoots badly on realistic designs (the working
    vector saturates the overflow clamp and the fit aborts or stalls) and
    is kept only to surface that behavior deterministically.
    """

    tol: float = 1e-10
    max_iter: int = 500
    polish: bool = True
    polish_tol: float = 1e-9
    polish_max_iter: int = 200
    init: str = "ridge"


@dataclass
class VmpState:
    """Mutable optimizer state; arrays are owned by the fitting loop."""

    mu: np.ndarray
    Sigma: np.ndarray
    mu_recip_sigma2: np.ndarray
    mu_recip_a: np.ndarray
    mu_g: np.ndarray
    mu_log_g: np.ndarray
    mu_kappa: float
    C1: float
    w: np.ndarray
    clamped: bool = False

    def copy(self):
        return VmpState(
            mu=self.mu.copy(),
            Sigma=self.Sigma.copy(),
            mu_recip_sigma2=self.mu_recip_sigma2.copy(),
            mu_recip_a=self.mu_recip_a.copy(),
            mu_g=self.mu_g.copy(),
            mu_log_g=self.mu_log_g.copy(),
            mu_kappa=self.mu_kappa,
            C1=self.C1,
            w=self.w.copy(),
            clamped=self.clamped,
        )


def initial_state(
    design: DesignBlocks, hyper: Hyperparameters, y=None, init: str = "ridge"
) -> VmpState:
    """Deterministic start with unit variance moments.

    The default ridge start solves (C'C + M) mu = C' log(y + 1/2) and
    scales the covariance as (C' diag(exp(C mu)) C + M)^-1, keeping the
    first mean step preconditioned at the data scale.
    """
    P, n, r = design.P, design.n, design.r
    mrs = np.ones(r)
    mra = 1.0 / (mrs + np.asarray(hyper.A) ** -2) if r else np.ones(0)
    mu = np.zeros(P)
    Sigma = np.eye(P)
    if init == "ridge":
        if y is None:
            raise ParameterError("ridge initialization requires the responses")
        C = design.C
        m = m_diag(design, hyper, mrs)
        gram = C.T @ C
        gram[np.diag_indices_from(gram)] += m
        mu = np.linalg.solve(gram, C.T @ np.log(np.asarray(y, float) + 0.5))
        w0 = np.exp(np.clip(C @ mu, -30.0, 30.0))
        bracket = (C * w0[:, None]).T @ C
        bracket[np.diag_indices_from(bracket)] += m
        Sigma = cho_solve((np.linalg.cholesky(bracket), True), np.eye(P))
        Sigma = 0.5 * (Sigma + Sigma.T)
    elif init != "identity":
        raise ParameterError(f"unknown init scheme {init!r}")
    return VmpState(
        mu=mu,
        Sigma=Sigma,
        mu_recip_sigma2=mrs,
        mu_recip_a=mra,
        mu_g=np.ones(n),
        mu_log_g=np.zeros(n),
        mu_kappa=float(np.clip(1.0, hyper.kappa_min, hyper.kappa_max)),
        C1=0.0,
        w=np.ones(n),
    )


def m_diag(design: DesignBlocks, hyper: Hyperparameters, mu_recip_sigma2) -> np.ndarray:
    """Diagonal of the prior precision matrix M."""
    m = np.empty(design.P)
    m[: design.p] = hyper.sigma_beta**-2
    for ell in range(design.r):
        m[design.block_slice(ell)] = mu_recip_sigma2[ell]
    return m


def _linpred_quad(C, Sigma):
    """diagonal(C Sigma C')."""
    return np.einsum("ij,ij->i", C @ Sigma, C)


def _clamped_exp(arg):
    clamped = bool(np.any(arg > _EXP_CLAMP))
    return np.exp(np.minimum(arg, _EXP_CLAMP)), clamped


def poisson_mean_update(state: VmpState, design: DesignBlocks, y, hyper) -> VmpState:
    """Poisson branch: working vector, mean step, unit g/kappa moments."""
    C = design.C
    m = m_diag(design, hyper, state.mu_recip_sigma2)
    arg = C @ state.mu + 0.5 * _linpred_quad(C, state.Sigma)
    state.w, state.clamped = _clamped_exp(arg)
    state.mu = state.mu + state.Sigma @ (C.T @ (y - state.w) - m * state.mu)
    state.mu_g = np.ones(design.n)
    state.mu_kappa = 1.0
    return state


def negbin_updates(state: VmpState, design: DesignBlocks, y, hyper) -> VmpState:
    """Negative Binomial branch: the five listed assignments, in order."""
    C = design.C
    m = m_diag(design, hyper, state.mu_recip_sigma2)
    arg = -(C @ state.mu) + 0.5 * _linpred_quad(C, state.Sigma)
    state.w, state.clamped = _clamped_exp(arg)
    state.mu_g = (state.mu_kappa + y) / (1.0 + state.mu_kappa * state.w)
    state.mu = state.mu + state.Sigma @ (
        state.mu_kappa * (C.T @ (state.mu_g * state.w - 1.0)) - m * state.mu
    )
    state.mu_log_g = digamma(state.mu_kappa + y) - np.log1p(state.mu_kappa * state.w)
    state.C1 = float(
        np.sum(C @ state.mu) - np.sum(state.mu_log_g) + state.mu_g @ state.w
    )
    state.mu_kappa = kappa_posterior_mean(
        design.n, state.C1, hyper.kappa_min, hyper.kappa_max
    )
    return state


def covariance_update(state: VmpState, design: DesignBlocks, hyper) -> VmpState:
    """Sigma = (kappa_mean C' diag(g_mean * w) C + M)^-1 via Cholesky."""
    C = design.C
    m = m_diag(design, hyper, state.mu_recip_sigma2)
    weights = state.mu_kappa * state.mu_g * state.w
    bracket = (C * weights[:, None]).T @ C
    bracket[np.diag_indices_from(bracket)] += m
    try:
        L = np.linalg.cholesky(bracket)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance bracket is not positive definite") from exc
    Sigma = cho_solve((L, True), np.eye(design.P))
    state.Sigma = 0.5 * (Sigma + Sigma.T)
    return state


def variance_param_update(state: VmpState, design: DesignBlocks, hyper) -> VmpState:
    """Per-block reciprocal-moment refresh for the a and sigma^2 q-densities."""
    A = np.asarray(hyper.A)
    for ell in range(design.r):
        sl = design.block_slice(ell)
        K = design.block_sizes[ell]
        state.mu_recip_a[ell] = 1.0 / (state.mu_recip_sigma2[ell] + A[ell] ** -2)
        mu_u = state.mu[sl]
        tr_u = float(np.trace(state.Sigma[sl, sl]))
        state.mu_recip_sigma2[ell] = (K + 1.0) / (
            2.0 * state.mu_recip_a[ell] + float(mu_u @ mu_u) + tr_u
        )
    return state


def variance_q(state: VmpState, design: DesignBlocks) -> VarianceQ:
    """Shape/rate report for the variance q-densities, from the moments."""
    r = design.r
    shapes = np.array([(design.block_sizes[ell] + 1.0) / 2.0 for ell in range(r)])
    with np.errstate(divide="ignore"):
        sigma2_rate = shapes / state.mu_recip_sigma2 if r else np.zeros(0)
        a_rate = 1.0 / state.mu_recip_a if r else np.zeros(0)
    return VarianceQ(
        mu_recip_sigma2=state.mu_recip_sigma2.copy(),
        mu_recip_a=state.mu_recip_a.copy(),
        sigma2_shape=shapes,
        sigma2_rate=sigma2_rate,
        a_shape=np.ones(r),
        a_rate=a_rate,
    )


def _variance_terms(state, design, hyper):
    """Shared ELBO contribution of the variance blocks plus the beta prior."""
    p = design.p
    beta_mu = state.mu[:p]
    total = -(float(beta_mu @ beta_mu) + float(np.trace(state.Sigma[:p, :p]))) / (
        2.0 * hyper.sigma_beta**2
    )
    A = np.asarray(hyper.A)
    for ell in range(design.r):
        sl = design.block_slice(ell)
        K = design.block_sizes[ell]
        mu_u = state.mu[sl]
        tr_u = float(np.trace(state.Sigma[sl, sl]))
        mrs = state.mu_recip_sigma2[ell]
        mra = state.mu_recip_a[ell]
        total += (
            mra * mrs
            - math.log(A[ell])
            - math.log(mrs + A[ell] ** -2)
            + float(gammaln((K + 1.0) / 2.0))
            - ((K + 1.0) / 2.0) * math.log(mra + 0.5 * (float(mu_u @ mu_u) + tr_u))
        )
    return total


def elbo(family: Family, state: VmpState, design: DesignBlocks, y, hyper) -> float:
    """Evidence lower bound for the current q-densities."""
    C = design.C
    P, p, r, n = design.P, design.p, design.r, design.n
    sign, logdet = np.linalg.slogdet(state.Sigma)
    if sign <= 0:
        raise NumericalError("covariance lost positive definiteness in the bound")
    value = (
        P / 2.0
        - r * math.log(math.pi)
        - (p / 2.0) * math.log(hyper.sigma_beta**2)
        + 0.5 * logdet
        + _variance_terms(state, design, hyper)
        - float(np.sum(gammaln(y + 1.0)))
    )
    eta = C @ state.mu
    quad = _linpred_quad(C, state.Sigma)
    if family == Family.POISSON:
        value += float(y @ eta) - float(np.sum(np.exp(np.minimum(eta + 0.5 * quad, _EXP_CLAMP))))
    else:
        wm = np.exp(np.minimum(-eta + 0.5 * quad, _EXP_CLAMP))
        kap = state.mu_kappa
        c1 = float(np.sum(eta) - np.sum(state.mu_log_g) + state.mu_g @ wm)
        value += (
            float(np.sum(gammaln(kap + y)))
            - kap * float(np.sum(state.mu_log_g))
            - float((y + kap) @ np.log1p(kap * wm))
            + kap * float(state.mu_g @ wm)
            - math.log(hyper.kappa_max - hyper.kappa_min)
            + log_H(HArgs(0.0, float(n), c1, hyper.kappa_min, hyper.kappa_max))
        )
    if not np.isfinite(value):
        raise NumericalError("evidence lower bound is not finite")
    return float(value)


def _e_log_sigma2(state, design):
    """E[log sigma^2_l] under the Inverse-Gamma q-densities."""
    out = np.zeros(design.r)
    for ell in range(design.r):
        shape = (design.block_sizes[ell] + 1.0) / 2.0
        rate = shape / state.mu_recip_sigma2[ell]
        out[ell] = math.log(rate) - float(digamma(shape))
    return out


def expected_log_joint_S(
    family: Family, mu, Sigma, state: VmpState, design: DesignBlocks, y, hyper
) -> float:
    """Expected log joint as a function of (mu, Sigma), other moments fixed.

    This is the objective whose mu- and Sigma-derivatives drive the
    Gaussian updates; the remaining q-moments (variance blocks, latent
    rates, shape parameter) are read from ``state`` and held constant.
    """
    C = design.C
    m = m_diag(design, hyper, state.mu_recip_sigma2)
    eta = C @ mu
    quad = _linpred_quad(C, Sigma)
    tr_m = float(np.sum(m * (mu**2 + np.diag(Sigma))))
    e_log_s2 = _e_log_sigma2(state, design)
    common = (
        -0.5 * tr_m
        - 0.5 * design.P * math.log(2.0 * math.pi)
        - 0.5 * design.p * math.log(hyper.sigma_beta**2)
        - 0.5
        * float(np.sum(np.asarray(design.block_sizes, dtype=float) * e_log_s2))
    )
    if family == Family.POISSON:
        return (
            float(y @ eta)
            - float(np.sum(np.exp(eta + 0.5 * quad)))
            + common
            - float(np.sum(gammaln(y + 1.0)))
        )
    kap = state.mu_kappa
    e_klogk = kappa_kernel_expectation(
        lambda k: k * np.log(k), design.n, state.C1, hyper.kappa_min, hyper.kappa_max
    )
    e_lgamk = kappa_kernel_expectation(
        lambda k: gammaln(k), design.n, state.C1, hyper.kappa_min, hyper.kappa_max
    )
    wm = np.exp(-eta + 0.5 * quad)
    return (
        design.n * e_klogk
        - kap * float(np.sum(eta))
        - design.n * e_lgamk
        + (kap - 1.0) * float(np.sum(state.mu_log_g))
        - kap * float(state.mu_g @ wm)
        + common
    )


def grad_S_mu(family, mu, Sigma, state, design, y, hyper) -> np.ndarray:
    """Closed-form gradient of the expected log joint in the mean."""
    C = design.C
    m = m_diag(design, hyper, state.mu_recip_sigma2)
    quad = _linpred_quad(C, Sigma)
    if family == Family.POISSON:
        w = np.exp(C @ mu + 0.5 * quad)
        return C.T @ (y - w) - m * mu
    w = np.exp(-(C @ mu) + 0.5 * quad)
    return state.mu_kappa * (C.T @ (state.mu_g * w - 1.0)) - m * mu


def grad_S_Sigma(family, mu, Sigma, state, design, y, hyper) -> np.ndarray:
    """Closed-form derivative of the expected log joint in the covariance."""
    C = design.C
    m = m_diag(design, hyper, state.mu_recip_sigma2)
    quad = _linpred_quad(C, Sigma)
    if family == Family.POISSON:
        weights = np.exp(C @ mu + 0.5 * quad)
    else:
        weights = state.mu_kappa * state.mu_g * np.exp(-(C @ mu) + 0.5 * quad)
    out = -0.5 * ((C * weights[:, None]).T @ C)
    out[np.diag_indices_from(out)] -= 0.5 * m
    return out


def _state_rel_change(old: VmpState, new: VmpState) -> float:
    def rel(a, b):
        a = np.atleast_1d(np.asarray(a, float))
        b = np.atleast_1d(np.asarray(b, float))
        denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
        return float(np.max(np.abs(a - b))) / denom

    return max(
        rel(old.mu, new.mu),
        rel(old.Sigma, new.Sigma),
        rel(old.mu_recip_sigma2, new.mu_recip_sigma2) if old.mu_recip_sigma2.size else 0.0,
        rel(old.mu_recip_a, new.mu_recip_a) if old.mu_recip_a.size else 0.0,
        rel(old.mu_g, new.mu_g),
        rel(old.mu_kappa, new.mu_kappa),
    )


def _cycle(family, state, design, y, hyper):
    if family == Family.POISSON:
        poisson_mean_update(state, design, y, hyper)
    else:
        negbin_updates(state, design, y, hyper)
    covariance_update(state, design, hyper)
    variance_param_update(state, design, hyper)
    return state


def fit(
    family,
    design: DesignBlocks,
    y,
    hyper: Optional[Hyperparameters] = None,
    config: Optional[FitConfig] = None,
) -> FitResult:
    """Run the batch update cycle until the bound settles.

    Raises ``NumericalError`` (carrying the iteration index) if the bound
    becomes non-finite or a covariance candidate loses positive
    definiteness.
    """
    family = Family(family)
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ParameterError("responses must be nonnegative integers")
    if y.shape != (design.n,):
        raise ParameterError(f"y must have length {design.n}, got {y.shape}")
    if hyper is None:
        hyper = default_hyperparameters(design.r)
    config = config or FitConfig()

    state = initial_state(design, hyper, y=y, init=config.init)
    trace = []
    clamp_iters = []
    converged = False
    it = 0
    max_total = config.max_iter + (config.polish_max_iter if config.polish else 0)
    while it < max_total:
        it += 1
        prev = state.copy() if converged else None
        try:
            _cycle(family, state, design, y, hyper)
            bound = elbo(family, state, design, y, hyper)
        except NumericalError as exc:
            raise NumericalError(
                f"iteration {it}: {exc}",
                iteration=it,
                state_dump={
                    "mu_max": float(np.max(np.abs(state.mu))),
                    "kappa": state.mu_kappa,
                    "mrs": state.mu_recip_sigma2.tolist(),
                },
            ) from exc
        if state.clamped:
            clamp_iters.append(it)
        trace.append(bound)
        if not converged:
            if it >= 2 and abs(trace[-1] - trace[-2]) < config.tol * (
                abs(trace[-1]) + 1.0
            ):
                converged = True
                if not config.polish:
                    break
            elif it >= config.max_iter:
                break
        else:
            if _state_rel_change(prev, state) < config.polish_tol:
                break

    # a trustworthy answer must finish clamp-free
    recently_clamped = any(k > it - 5 for k in clamp_iters)
    ok = converged and not recently_clamped
    negbin = None
    if family == Family.NEGBIN:
        negbin = NegBinAux(
            mu_g=state.mu_g.copy(),
            mu_log_g=state.mu_log_g.copy(),
            mu_kappa=state.mu_kappa,
            C1=state.C1,
        )
    return FitResult(
        family=family,
        gaussian=GaussianQ(mu=state.mu.copy(), Sigma=state.Sigma.copy()),
        variances=variance_q(state, design),
        negbin=negbin,
        elbo_trace=np.asarray(trace),
        iterations=it,
        converged=ok,
        w=state.w.copy(),
        clamp_iterations=tuple(clamp_iters),
    )


def state_from_fit(result: FitResult, design: DesignBlocks) -> VmpState:
    """Rebuild a ``VmpState`` from a fit, for update re-application checks."""
    if result.negbin is not None:
        mu_g = result.negbin.mu_g.copy()
        mu_log_g = result.negbin.mu_log_g.copy()
        kap = result.negbin.mu_kappa
        c1 = result.negbin.C1
    else:
        mu_g = np.ones(design.n)
        mu_log_g = np.zeros(design.n)
        kap = 1.0
        c1 = 0.0
    return VmpState(
        mu=result.gaussian.mu.copy(),
        Sigma=result.gaussian.Sigma.copy(),
        mu_recip_sigma2=result.variances.mu_recip_sigma2.copy(),
        mu_recip_a=result.variances.mu_recip_a.copy(),
        mu_g=mu_g,
        mu_log_g=mu_log_g,
        mu_kappa=kap,
        C1=c1,
        w=result.w.copy(),
    )


def predict(result: FitResult, rows) -> dict:
    """Posterior mean response and pointwise 95% bands for design rows.

    Under the Gaussian q-density the linear predictor at row c is Normal
    with mean c'mu and variance c'Sigma c, so the mean response is
    exp(c'mu + c'Sigma c / 2) and the bands exponentiate the Gaussian
    quantiles.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    mu, Sigma = result.gaussian.mu, result.gaussian.Sigma
    eta = rows @ mu
    var = np.einsum("ij,ij->i", rows @ Sigma, rows)
    sd = np.sqrt(np.maximum(var, 0.0))
    return {
        "mean": np.exp(eta + 0.5 * var),
        "lower95": np.exp(eta - 1.96 * sd),
        "upper95": np.exp(eta + 1.96 * sd),
    }
