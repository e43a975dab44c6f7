"""Soft-killed Markov processes: the model contract and single-particle clocks.

A model is a Markov process on ``F`` that is absorbed in a cemetery point at
a bounded, state dependent rate ``lambda(x)``.  States are plain Python or
numpy values: an ``int`` label for discrete spaces, a ``float`` for scalar
spaces and a 1-d ``ndarray`` for vector spaces.  The cemetery is the
:data:`CEMETERY` sentinel and is never stored in a particle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

import numpy as np

from .errors import (
    GridMismatch,
    HardKillingUnsupported,
    IntensityBoundViolated,
    ThinningBoundViolated,
    TimeOrder,
)


class _Cemetery:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "CEMETERY"

    def __reduce__(self):
        return (_Cemetery, ())


CEMETERY = _Cemetery()


def is_cemetery(x) -> bool:
    return x is CEMETERY


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PureKilling:
    """Motionless dynamics: the state never changes before killing."""


@dataclass(frozen=True)
class Pdmp:
    """Piecewise deterministic dynamics with bounded jump intensity.

    flow(x, t) is the deterministic flow psi_t(x).  jump_rate(x) is the total
    mass qbar(x) of the kernel q(x, .) including the cemetery, bounded by
    ``jump_rate_bound``.  jump_kernel(x, rng) samples from q(x, .)/qbar(x) and
    returns :data:`CEMETERY` for a killing jump.
    """

    flow: Callable[[Any, float], Any]
    jump_rate: Callable[[Any], float]
    jump_rate_bound: float
    jump_kernel: Callable[[Any, np.random.Generator], Any]


@dataclass(frozen=True)
class Diffusion:
    """Euler-Maruyama diffusion ``dZ = b(Z) dt + sigma(Z) dB`` on a fixed grid.

    ``drift`` maps an (n, d) array of states to (n, d); ``sigma`` maps it to
    (n, d, d).
    """

    drift: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    dt: float


@dataclass(frozen=True)
class HardKilling:
    """Marker for boundary killing (e.g. AIMD hitting a ceiling).

    No killing intensity exists for such processes, so :class:`ModelSpec`
    refuses them.
    """

    description: str = ""


# --------------------------------------------------------------------------
# analytic oracle
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticOracle:
    """Closed-form access to the quantities entering the asymptotic variances.

    semigroup(t, phi, x)        Q^t phi(x), with Q^t phi(cemetery) = 0
    survival(t)                 p_t
    survival_derivative(t)      p'_t = -p_t * eta_t(lambda)
    eta_expectation(t, g)       eta_t(g) for a pointwise function g
    carre_du_champ(t, phi, x)   Gamma_t(phi)(x), optional

    All state arguments may be numpy arrays of states; results broadcast.
    """

    semigroup: Callable[[float, Callable, Any], Any]
    survival: Callable[[float], float]
    survival_derivative: Callable[[float], float]
    eta_expectation: Callable[[float, Callable], float]
    carre_du_champ: Optional[Callable[[float, Callable, Any], Any]] = None

    def gamma(self, t: float, phi) -> float:
        """gamma_t(phi) = p_t * eta_t(phi)."""
        return self.survival(t) * self.eta_expectation(t, phi)

    def eta_variance(self, t: float, g) -> float:
        m = self.eta_expectation(t, g)
        return self.eta_expectation(t, lambda x: np.square(g(x))) - m * m


# --------------------------------------------------------------------------
# model spec
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """A soft-killed Markov process.

    ``initial_sampler(rng, n)`` returns an array of ``n`` initial states drawn
    from eta_0.  ``killing_intensity`` accepts a state or an array of states.
    ``fast`` optionally names a compiled kernel able to simulate this model
    (see :mod:`fvlab.kernels`); it must describe the same law.
    """

    name: str
    initial_sampler: Callable[[np.random.Generator, int], np.ndarray]
    dynamics: Any
    killing_intensity: Callable[[Any], Any]
    lambda_sup: float
    oracle: Optional[AnalyticOracle] = None
    fast: Optional[tuple] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.dynamics, HardKilling):
            raise HardKillingUnsupported(
                f"model {self.name!r} declares hard killing; no killing intensity exists"
            )
        if not isinstance(self.dynamics, (PureKilling, Pdmp, Diffusion)):
            raise TypeError(f"unknown dynamics {type(self.dynamics).__name__}")
        if not (math.isfinite(self.lambda_sup) and self.lambda_sup >= 0):
            raise ValueError("lambda_sup must be finite and nonnegative")

    def intensity(self, x):
        """killing_intensity(x), checked against lambda_sup."""
        lam = self.killing_intensity(x)
        if np.any(np.asarray(lam) > self.lambda_sup * (1 + 1e-12)) or np.any(np.asarray(lam) < 0):
            raise IntensityBoundViolated(
                f"killing intensity outside [0, {self.lambda_sup}] for model {self.name!r}"
            )
        return lam

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        states = np.asarray(self.initial_sampler(rng, n))
        if len(states) != n:
            raise ValueError("initial_sampler returned the wrong number of states")
        return states


@dataclass
class ParticleClock:
    """Single-particle state between events.

    ``pending_threshold`` is the unit exponential variate currently consumed
    by the particle's time-change clock; it is redrawn after every event.
    """

    state_at_event: Any
    event_time: float
    pending_threshold: float = 1.0


class EventKind(Enum):
    SURVIVED = "survived_to_horizon"
    JUMP = "internal_jump"
    KILLED = "killed"


@dataclass(frozen=True)
class EventOutcome:
    kind: EventKind
    time: float
    state: Any = None

    @property
    def killed(self) -> bool:
        return self.kind is EventKind.KILLED


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

_GRID_RTOL = 1e-9


def evaluate_at(model: ModelSpec, clock: ParticleClock, t: float):
    """State at time ``t`` assuming no event in ``(clock.event_time, t]``."""
    if t < clock.event_time:
        raise TimeOrder(f"t={t} precedes event_time={clock.event_time}")
    dyn = model.dynamics
    if t == clock.event_time:
        return clock.state_at_event
    if isinstance(dyn, PureKilling):
        return clock.state_at_event
    if isinstance(dyn, Pdmp):
        return dyn.flow(clock.state_at_event, t - clock.event_time)
    raise GridMismatch("diffusion states exist only at their event (grid) times")


def _exp_draw(rng: np.random.Generator) -> float:
    return float(rng.standard_exponential())


def next_event(model: ModelSpec, clock: ParticleClock, horizon: float, rng: np.random.Generator) -> EventOutcome:
    """Sample the particle's next event, or survival up to ``horizon``.

    Pure killing and PDMP sampling is exact (PDMP jumps by thinning against
    ``jump_rate_bound``).  Diffusions advance a single Euler step and are
    killed with probability ``1 - exp(-lambda(x) dt)``.
    """
    t0 = clock.event_time
    if horizon < t0:
        raise TimeOrder(f"horizon={horizon} precedes event_time={t0}")
    dyn = model.dynamics
    x = clock.state_at_event

    if isinstance(dyn, PureKilling):
        lam = float(model.intensity(x))
        e = _exp_draw(rng)
        clock.pending_threshold = e
        if lam > 0.0:
            tau = t0 + e / lam
            if tau <= horizon:
                return EventOutcome(EventKind.KILLED, tau)
        return EventOutcome(EventKind.SURVIVED, horizon, x)

    if isinstance(dyn, Pdmp):
        bound = dyn.jump_rate_bound
        t = t0
        while True:
            e = _exp_draw(rng)
            clock.pending_threshold = e
            t = t + e / bound if bound > 0 else math.inf
            if t > horizon:
                return EventOutcome(EventKind.SURVIVED, horizon, dyn.flow(x, horizon - t0))
            y = dyn.flow(x, t - t0)
            rate = float(dyn.jump_rate(y))
            if rate > bound * (1 + 1e-12):
                raise ThinningBoundViolated(f"jump rate {rate} exceeds declared bound {bound}")
            if rng.random() * bound < rate:
                new = dyn.jump_kernel(y, rng)
                if is_cemetery(new):
                    return EventOutcome(EventKind.KILLED, t)
                return EventOutcome(EventKind.JUMP, t, new)

    if isinstance(dyn, Diffusion):
        t1 = t0 + dyn.dt
        if t1 > horizon * (1 + _GRID_RTOL) + _GRID_RTOL:
            raise GridMismatch(f"horizon {horizon} is not on the Euler grid after {t0}")
        lam = float(model.intensity(x))
        e = _exp_draw(rng)
        clock.pending_threshold = e
        if e < lam * dyn.dt:
            return EventOutcome(EventKind.KILLED, t1)
        from .models import euler_step

        return EventOutcome(EventKind.JUMP, t1, euler_step(model, x, rng))

    raise TypeError(f"unknown dynamics {type(dyn).__name__}")
