"""Asymptotic variances of the Fleming-Viot estimators.

Everything here is deterministic: oracle closed forms plus one-dimensional
composite Simpson quadrature refined by doubling.  Let ``f_t = Q^{T-t} phi``
and ``V_t = Var_{eta_t}(f_t)``.  The final-time variance is

    sigma_T^2(phi) = p_T^2 V_{eta_T}(phi) - p_T^2 ln(p_T) eta_T(phi)^2
                     - 2 int_0^T V_t p_t p'_t dt

and the process-level variance at ``t in [0, T]`` is

    V_{eta_0}(Q^T phi) + int_0^t [eta_s(Gamma_{T-s} phi) + V_s eta_s(lambda)] p_s^2 ds,

with ``eta_s(lambda) = -p'_s / p_s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .errors import DomainError, OracleMissing, QuadratureNotConverged


@dataclass(frozen=True)
class QuadratureSettings:
    """Composite Simpson rule, accepted once a doubling changes the value by at most
    ``rel_tol`` relative (or ``abs_tol`` absolute, for integrals that vanish)."""

    intervals: int = 1024
    rel_tol: float = 1e-8
    abs_tol: float = 1e-14
    max_doublings: int = 4

    def __post_init__(self):
        if self.intervals < 8 or self.intervals % 2:
            raise DomainError("Simpson needs an even number of intervals, at least 8")


DEFAULT_QUAD = QuadratureSettings()


def simpson(f, a: float, b: float, n: int) -> float:
    if b == a:
        return 0.0
    x = np.linspace(a, b, n + 1)
    y = np.array([f(t) for t in x], dtype=float)
    h = (b - a) / n
    return float(h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum()))


def integrate(f, a: float, b: float, quad: QuadratureSettings = DEFAULT_QUAD) -> float:
    """Simpson with doubling until two successive values agree."""
    n = quad.intervals
    prev = simpson(f, a, b, n)
    for _ in range(quad.max_doublings):
        n *= 2
        cur = simpson(f, a, b, n)
        if abs(cur - prev) <= max(quad.rel_tol * abs(cur), quad.abs_tol):
            return cur
        prev = cur
    raise QuadratureNotConverged(f"Simpson did not settle after {quad.max_doublings} doublings ({n} intervals)")


def _func(phi):
    return getattr(phi, "func", phi)


def _semigroup_fn(oracle, phi, s):
    """x -> Q^s phi(x) as a pointwise function for eta_expectation."""
    f = _func(phi)
    return lambda x: oracle.semigroup(s, f, x)


def _v(oracle, phi, t, T):
    return oracle.eta_variance(t, _semigroup_fn(oracle, phi, T - t))


@dataclass
class VarianceReport:
    sigma2_final: float
    lower_bound: float
    upper_bound: float
    method: str
    p_T: float
    eta_T: float
    var_eta_T: float
    integral_term: float
    bounds_apply: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sigma2_final": self.sigma2_final,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "method": self.method,
            "bounds_apply": self.bounds_apply,
            "ingredients": {
                "p_T": self.p_T,
                "eta_T": self.eta_T,
                "var_eta_T": self.var_eta_T,
                "integral_term": self.integral_term,
            },
            **self.extra,
        }


def _require(oracle):
    if oracle is None:
        raise OracleMissing("no analytic oracle available for this model")


def variance_report(oracle, phi, T: float, quad: QuadratureSettings = DEFAULT_QUAD, indicator: Optional[bool] = None) -> VarianceReport:
    """sigma_T^2(phi) with its ingredients; bounds are asserted when phi is 1_F."""
    _require(oracle)
    f = _func(phi)
    pT = oracle.survival(T)
    m = oracle.eta_expectation(T, f)
    v = oracle.eta_variance(T, f)
    integral = integrate(lambda t: _v(oracle, phi, t, T) * oracle.survival(t) * oracle.survival_derivative(t), 0.0, T, quad)
    sigma2 = pT * pT * v - pT * pT * math.log(pT) * m * m - 2.0 * integral
    lo, hi = variance_bounds(pT)
    if indicator is None:
        indicator = getattr(phi, "name", None) == "indicator_F"
    if indicator:
        slack = 1e-9 * max(1.0, abs(hi))
        if not (lo - slack <= sigma2 <= hi + slack):
            raise AssertionError(f"sigma^2={sigma2} violates the bounds [{lo}, {hi}]")
    return VarianceReport(sigma2, lo, hi, "quadrature", pT, m, v, -2.0 * integral, bool(indicator))


def sigma2_final(oracle, phi, T: float, quad: QuadratureSettings = DEFAULT_QUAD) -> float:
    return variance_report(oracle, phi, T, quad, indicator=False).sigma2_final


def _path_parts(oracle, phi, T):
    _require(oracle)
    if oracle.carre_du_champ is None:
        raise OracleMissing("the process-level variance needs the carre du champ")
    f = _func(phi)
    v0 = oracle.eta_variance(0.0, _semigroup_fn(oracle, phi, T))

    def integrand(s):
        ps, dps = oracle.survival(s), oracle.survival_derivative(s)
        g = oracle.eta_expectation(s, lambda x: oracle.carre_du_champ(T - s, f, x))
        return g * ps * ps - _v(oracle, phi, s, T) * ps * dps

    return v0, integrand


def sigma2_path(oracle, phi, t: float, T: float, quad: QuadratureSettings = DEFAULT_QUAD) -> float:
    """Asymptotic variance of the martingale at time ``t``; equals sigma2_final at t = T."""
    if not 0.0 <= t <= T:
        raise DomainError("need 0 <= t <= T")
    v0, integrand = _path_parts(oracle, phi, T)
    return v0 + integrate(integrand, 0.0, t, quad)


def sigma2_path_curve(oracle, phi, T: float, grid_points: int = 64, quad: QuadratureSettings = DEFAULT_QUAD):
    """(t, sigma2_path(t)) on a uniform grid of ``grid_points`` times in [0, T].

    The integral is accumulated segment by segment, each segment getting its
    share of the quadrature intervals.
    """
    if grid_points < 2:
        raise DomainError("need at least two grid points")
    v0, integrand = _path_parts(oracle, phi, T)
    ts = np.linspace(0.0, T, grid_points)
    per = max(8, quad.intervals // (grid_points - 1))
    seg = QuadratureSettings(per + per % 2, quad.rel_tol, quad.abs_tol, quad.max_doublings)
    parts = [integrate(integrand, float(a), float(b), seg) for a, b in zip(ts[:-1], ts[1:])]
    return ts, v0 + np.concatenate([[0.0], np.cumsum(parts)])


def sigma2_two_state(p: float, lambda1: float, T: float = 1.0) -> float:
    """Closed form of sigma_T^2(1_F) for the two-state model.

    The model is motionless, so horizon T at rate lambda1 is the same as
    horizon 1 at rate lambda1 * T.
    """
    if not (0.0 < p < 1.0) or not lambda1 > 0.0 or not T > 0.0:
        raise DomainError("need 0 < p < 1, lambda1 > 0 and T > 0")
    q = (1.0 - p) * math.exp(-lambda1 * T)  # p_T - p
    p1 = p + q
    return 2.0 * p * (1.0 - p1) + 2.0 * q * q * math.log((1.0 - p) / q) + p1 * p1 * math.log(p1)


def variance_bounds(p_T: float):
    """(lower, upper) = (-p^2 ln p, 2 p (1 - p) + p^2 ln p) for sigma_T^2(1_F)."""
    if not 0.0 < p_T <= 1.0:
        raise DomainError("p_T must lie in (0, 1]")
    l = p_T * p_T * math.log(p_T)
    return -l, 2.0 * p_T * (1.0 - p_T) + l


@dataclass
class ExactLaw:
    """Law of p_hat under constant-rate killing: B_T ~ Poisson(N lambda T)."""

    N: int
    mu: float
    k: np.ndarray
    values: np.ndarray
    probs: np.ndarray
    tail_mass: float
    mean: float
    variance: float

    @property
    def numeric_mean(self) -> float:
        return float(np.dot(self.probs, self.values))

    @property
    def numeric_variance(self) -> float:
        m = self.numeric_mean
        return float(np.dot(self.probs, np.square(self.values - m)))


def ptn_exact_law(N: int, lam: float, T: float) -> ExactLaw:
    """P(p_hat = (1 - 1/N)^k) = Poisson(N lam T)(k) on a window holding all but a negligible tail.

    Exact moments: E p_hat = exp(-lam T) and Var p_hat = exp(-2 lam T) (exp(lam T / N) - 1).
    """
    if N < 2 or lam < 0 or T <= 0:
        raise DomainError("need N >= 2, lambda >= 0 and T > 0")
    mu = N * lam * T
    if mu == 0:
        k = np.zeros(1, dtype=np.int64)
        return ExactLaw(N, 0.0, k, np.ones(1), np.ones(1), 0.0, 1.0, 0.0)
    dist = stats.poisson(mu)
    # Chernoff-type window; the exact mass left outside is reported as tail_mass
    half = 15.0 * math.sqrt(mu) + 60.0
    lo = max(0, int(math.floor(mu - half)))
    hi = int(math.ceil(mu + half))
    k = np.arange(lo, hi + 1, dtype=np.int64)
    tail = float(dist.cdf(lo - 1) + dist.sf(hi)) if lo > 0 else float(dist.sf(hi))
    # pmf from the ratio p(k+1)/p(k) = mu/(k+1) anchored at the mode, then
    # normalized to 1 - tail: avoids the cancellation of large-mu log pmfs
    m = int(math.floor(mu)) - lo
    logp = np.zeros(len(k))
    logp[m + 1 :] = np.cumsum(math.log(mu) - np.log(k[m + 1 :].astype(float)))
    logp[:m] = -np.cumsum(math.log(mu) - np.log(k[1 : m + 1][::-1].astype(float)))[::-1]
    w = np.exp(logp)
    probs = w * ((1.0 - tail) / math.fsum(w))
    values = np.exp(k * math.log1p(-1.0 / N))
    mean = math.exp(-lam * T)
    return ExactLaw(N, mu, k, values, probs, tail, mean, mean * mean * math.expm1(lam * T / N))
