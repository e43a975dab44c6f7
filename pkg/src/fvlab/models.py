"""Concrete soft-killed models.

* finite-state motionless killing (constant rate, the two-state toy)
* the insurance ruin process as a PDMP
* Euler diffusions with bounded killing (Ornstein-Uhlenbeck by default)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import DomainError, ModeUnsupported
from .process import (
    CEMETERY,
    AnalyticOracle,
    Diffusion,
    EventOutcome,
    ModelSpec,
    ParticleClock,
    Pdmp,
    PureKilling,
    next_event,
)

# --------------------------------------------------------------------------
# finite-state motionless killing
# --------------------------------------------------------------------------


def _categorical_sampler(probs: np.ndarray):
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    if len(probs) == 1:
        return lambda rng, n: np.zeros(n, dtype=np.int64)

    def sample(rng, n):
        return np.searchsorted(cum, rng.random(n), side="right").astype(np.int64)

    return sample


def finite_state_oracle(init_probs, rates) -> AnalyticOracle:
    """Exact oracle for motionless killing on the labels ``0..K-1``.

    With no motion, a particle started at ``k`` survives to ``t`` with
    probability ``exp(-rates[k] t)``, so every quantity is a finite sum.
    Test functions are evaluated on integer label arrays.
    """
    pi = np.asarray(init_probs, dtype=float)
    lam = np.asarray(rates, dtype=float)
    labels = np.arange(len(pi))

    def weights(t):
        return pi * np.exp(-lam * t)

    def semigroup(t, phi, x):
        x = np.asarray(x)
        return np.asarray(phi(x), dtype=float) * np.exp(-lam[x] * t)

    def survival(t):
        return float(weights(t).sum())

    def survival_derivative(t):
        return float(-(lam * weights(t)).sum())

    def eta_expectation(t, g):
        w = weights(t)
        vals = np.broadcast_to(np.asarray(g(labels), dtype=float), w.shape)
        return float(np.dot(w, vals) / w.sum())

    def carre_du_champ(t, phi, x):
        # L(phi) = -lambda phi, hence Gamma(f, f) = lambda f^2
        x = np.asarray(x)
        return lam[x] * np.square(semigroup(t, phi, x))

    return AnalyticOracle(semigroup, survival, survival_derivative, eta_expectation, carre_du_champ)


def finite_state_model(init_probs, rates, name: str = "finite_state") -> ModelSpec:
    pi = np.asarray(init_probs, dtype=float)
    lam = np.asarray(rates, dtype=float)
    if pi.ndim != 1 or pi.shape != lam.shape or len(pi) == 0:
        raise DomainError("init_probs and rates must be 1-d arrays of equal length")
    if np.any(pi < 0) or not math.isclose(pi.sum(), 1.0, rel_tol=1e-12):
        raise DomainError("init_probs must be a probability vector")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise DomainError("rates must be finite and nonnegative")

    def killing(x):
        return lam[np.asarray(x)]

    return ModelSpec(
        name=name,
        initial_sampler=_categorical_sampler(pi),
        dynamics=PureKilling(),
        killing_intensity=killing,
        lambda_sup=float(lam.max()),
        oracle=finite_state_oracle(pi, lam),
        fast=("finite_state", lam.copy()),
        params={"init_probs": pi.tolist(), "rates": lam.tolist()},
    )


def constant_rate_model(lam: float) -> ModelSpec:
    """Killing at constant rate ``lam`` on a single dummy state."""
    if not lam >= 0:
        raise DomainError("lambda must be nonnegative")
    m = finite_state_model([1.0], [lam], name="constant_rate")
    return _with_params(m, {"lambda": float(lam)})


def two_state_oracle(p: float, lambda1: float) -> AnalyticOracle:
    _check_two_state(p, lambda1)
    return finite_state_oracle([p, 1.0 - p], [0.0, lambda1])


def two_state_model(p: float, lambda1: float) -> ModelSpec:
    """F = {0, 1}; eta_0 = p delta_0 + (1-p) delta_1; lambda(0)=0, lambda(1)=lambda1."""
    _check_two_state(p, lambda1)
    m = finite_state_model([p, 1.0 - p], [0.0, lambda1], name="two_state")
    return _with_params(m, {"p": float(p), "lambda1": float(lambda1)})


def _check_two_state(p, lambda1):
    if not (0.0 < p < 1.0):
        raise DomainError(f"p must lie in (0, 1), got {p}")
    if not lambda1 > 0.0:
        raise DomainError(f"lambda1 must be positive, got {lambda1}")


def _with_params(model: ModelSpec, params: dict) -> ModelSpec:
    from dataclasses import replace

    return replace(model, params={**model.params, **params})


# --------------------------------------------------------------------------
# ruin PDMP
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClaimLaw:
    """Claim size law on [0, inf): cdf F_Y plus its inverse."""

    name: str
    cdf: Callable
    ppf: Callable
    params: dict

    def sample_below(self, x: float, rng: np.random.Generator) -> float:
        """Draw Y conditioned on Y <= x by inverse cdf."""
        return float(self.ppf(rng.random() * self.cdf(x)))


def exponential_claims(mean: float = 1.0) -> ClaimLaw:
    if not mean > 0:
        raise DomainError("claim mean must be positive")
    return ClaimLaw(
        "exponential",
        cdf=lambda y: -np.expm1(-np.maximum(y, 0.0) / mean),
        ppf=lambda u: -mean * np.log1p(-u),
        params={"mean": float(mean)},
    )


def scipy_claims(name: str, **params) -> ClaimLaw:
    """Claim law backed by a nonnegative scipy.stats distribution, e.g. ``gamma``."""
    dist = getattr(stats, name)(**params)
    if dist.support()[0] < 0:
        raise DomainError(f"claim law {name} must be supported on [0, inf)")
    return ClaimLaw(name, cdf=dist.cdf, ppf=dist.ppf, params=dict(params))


def ruin_pdmp_model(
    c: float,
    theta: float,
    s0: float = 0.0,
    claims: Optional[ClaimLaw] = None,
    s0_sampler: Optional[Callable] = None,
) -> ModelSpec:
    """Cramer-Lundberg surplus ``S_t = s0 + c t - sum Y_i`` killed at ruin.

    Flow x + c t, claims at rate theta; a claim larger than the current
    surplus sends the particle to the cemetery, so lambda(x) = theta (1 - F_Y(x)).
    The initial law defaults to a point mass at ``s0``.
    """
    if not (c > 0 and theta > 0):
        raise DomainError("premium rate c and claim intensity theta must be positive")
    claims = claims or exponential_claims(1.0)
    if s0_sampler is None:
        if s0 < 0:
            raise DomainError("initial surplus must be nonnegative")
        s0_sampler = lambda rng, n: np.full(n, float(s0))  # noqa: E731

    def flow(x, t):
        return x + c * t

    def kernel(x, rng):
        u = rng.random()
        fx = float(claims.cdf(x))
        if u >= fx:
            return CEMETERY
        return max(x - claims.ppf(rng.random() * fx), 0.0)

    def killing(x):
        return theta * (1.0 - claims.cdf(x))

    fast = None
    if claims.name == "exponential":
        fast = ("ruin_exp", float(c), float(theta), claims.params["mean"])
    return ModelSpec(
        name="ruin_pdmp",
        initial_sampler=s0_sampler,
        dynamics=Pdmp(flow=flow, jump_rate=lambda x: theta, jump_rate_bound=theta, jump_kernel=kernel),
        killing_intensity=killing,
        lambda_sup=float(theta),
        fast=fast,
        params={"c": float(c), "theta": float(theta), "s0": float(s0), "claims": {"law": claims.name, **claims.params}},
    )


def pdmp_step(model: ModelSpec, clock: ParticleClock, horizon: float, rng) -> EventOutcome:
    """Exact sequential construction of the next PDMP event (thinning)."""
    if not isinstance(model.dynamics, Pdmp):
        raise ModeUnsupported(f"model {model.name!r} is not a PDMP")
    return next_event(model, clock, horizon, rng)


# --------------------------------------------------------------------------
# diffusions
# --------------------------------------------------------------------------


def euler_step(model: ModelSpec, state, rng: np.random.Generator):
    """One Euler-Maruyama step ``x + b(x) dt + sigma(x) sqrt(dt) xi``.

    ``state`` is a (d,) vector or an (n, d) batch.
    """
    dyn = model.dynamics
    if not isinstance(dyn, Diffusion):
        raise ModeUnsupported(f"model {model.name!r} is not a diffusion")
    x = np.asarray(state, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    n, d = xb.shape
    xi = rng.standard_normal((n, d))
    sig = np.broadcast_to(np.asarray(dyn.sigma(xb), dtype=float), (n, d, d))
    out = xb + dyn.drift(xb) * dyn.dt + np.einsum("nij,nj->ni", sig, xi) * math.sqrt(dyn.dt)
    return out[0] if single else out


def euler_diffusion_model(
    drift,
    sigma,
    killing,
    lambda_sup: float,
    dt: float,
    initial_sampler,
    name: str = "diffusion",
    params: Optional[dict] = None,
) -> ModelSpec:
    if not dt > 0:
        raise DomainError("dt must be positive")
    return ModelSpec(
        name=name,
        initial_sampler=initial_sampler,
        dynamics=Diffusion(drift=drift, sigma=sigma, dt=float(dt)),
        killing_intensity=killing,
        lambda_sup=float(lambda_sup),
        params=dict(params or {}),
    )


def ou_diffusion_model(
    lambda0: float = 1.0,
    lambda1: float = 0.25,
    dt: float = 0.01,
    x0: float = 0.0,
    dim: int = 1,
) -> ModelSpec:
    """Ornstein-Uhlenbeck ``dZ = -Z dt + dB`` killed at rate lambda0/(1+|z|^2) + lambda1."""
    if lambda0 < 0 or lambda1 < 0:
        raise DomainError("killing parameters must be nonnegative")
    eye = np.eye(dim)

    def killing(x):
        x = np.asarray(x, dtype=float)
        return lambda0 / (1.0 + np.sum(x * x, axis=-1)) + lambda1

    return euler_diffusion_model(
        drift=lambda x: -x,
        sigma=lambda x: eye,
        killing=killing,
        lambda_sup=lambda0 + lambda1,
        dt=dt,
        initial_sampler=lambda rng, n: np.full((n, dim), float(x0)),
        name="diffusion",
        params={"lambda0": float(lambda0), "lambda1": float(lambda1), "dt": float(dt), "x0": float(x0), "dim": int(dim)},
    )
