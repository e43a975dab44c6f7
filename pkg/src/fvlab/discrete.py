"""Discrete-time resampling at a fixed time mesh, and its asymptotic variance.

N independent killed paths run from one mesh time to the next; at every
intermediate mesh time each killed particle is replaced by a copy of a
survivor chosen uniformly and independently (with replacement).  The
survival probability estimate is the product of the per-level survivor
fractions, and a run in which every particle dies at some level is an
extinction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from . import kernels
from .errors import DomainError, NotStrictlyDecreasing, OracleMissing
from .process import Diffusion, EventKind, ParticleClock, next_event
from .models import euler_step


@dataclass(frozen=True)
class TimeMesh:
    times: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise DomainError("a mesh must start at 0 and be strictly increasing with at least two times")
        object.__setattr__(self, "times", tuple(float(x) for x in t))

    @property
    def T(self) -> float:
        return self.times[-1]

    @property
    def n(self) -> int:
        return len(self.times) - 1

    def as_array(self) -> np.ndarray:
        return np.array(self.times)


def uniform_mesh(T: float, n: int) -> TimeMesh:
    return TimeMesh(tuple(np.linspace(0.0, T, n + 1)))


def mesh_from_survival(oracle, n: int, T: float, xtol: float = 1e-12) -> TimeMesh:
    """Mesh with p_{t_j} = p_T^{j/n}, i.e. equal survival ratio between levels."""
    if oracle is None:
        raise OracleMissing("survival-spaced meshes need the model's survival function")
    if n < 1:
        raise DomainError("n must be at least 1")
    grid = np.linspace(0.0, T, 1025)
    ps = np.array([oracle.survival(t) for t in grid])
    if np.any(np.diff(ps) >= 0):
        raise NotStrictlyDecreasing("survival is not strictly decreasing on [0, T]")
    pT = ps[-1]
    times = [0.0]
    for j in range(1, n):
        target = pT ** (j / n)
        times.append(optimize.bisect(lambda t: oracle.survival(t) - target, 0.0, T, xtol=xtol, rtol=4 * np.finfo(float).eps))
    times.append(float(T))
    return TimeMesh(tuple(times))


@dataclass
class DiscreteRunResult:
    """One run of the resampling scheme.

    ``fractions[k]`` is the survivor fraction at level k+1, just before
    resampling.  ``states`` holds the survivors at ``T``.  Extinct runs report
    an estimator of 0.
    """

    N: int
    mesh: TimeMesh
    fractions: np.ndarray
    states: np.ndarray
    extinct_level: Optional[int] = None
    obs_sums: dict = field(default_factory=dict)

    mode = "discrete"
    is_crude = False

    @property
    def T(self) -> float:
        return self.mesh.T

    @property
    def extinct(self) -> bool:
        return self.extinct_level is not None

    @property
    def failed(self) -> bool:
        return self.extinct

    @property
    def failure(self) -> Optional[str]:
        return f"extinction at level {self.extinct_level}" if self.extinct else None

    @property
    def estimator(self) -> float:
        """Product of all per-level survivor fractions (0 on extinction)."""
        return 0.0 if self.extinct else float(np.prod(self.fractions))

    @property
    def p_hat(self) -> float:
        return self.estimator

    @property
    def gamma_weight(self) -> float:
        """Product of survivor fractions before the last level."""
        return 0.0 if self.extinct else float(np.prod(self.fractions[:-1]))

    @property
    def n_alive(self) -> int:
        return len(self.states)


def run_discrete(model, N: int, mesh: TimeMesh, observables=None, rng=None, use_kernel: bool = True) -> DiscreteRunResult:
    if N < 2:
        raise ValueError("the resampling scheme needs N >= 2")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x0 = np.array(model.sample_initial(rng, N))
    if use_kernel and model.fast is not None and model.fast[0] == "finite_state":
        states = np.ascontiguousarray(x0, dtype=np.int64)
        counts, alive, extinct = kernels.discrete_finite_state(model.fast[1], states, mesh.as_array(), rng)
        extinct = int(extinct)
        nlev = extinct + 1 if extinct >= 0 else mesh.n
        res = DiscreteRunResult(N, mesh, counts[:nlev] / N, states[alive], extinct + 1 if extinct >= 0 else None)
    else:
        res = _run_generic(model, N, mesh, x0, rng)
    if observables is not None and not res.extinct:
        res.obs_sums = {o.name: float(np.sum(o(res.states))) for o in observables}
    return res


def _advance(model, X, t0, t1, rng):
    """Run independent killed paths over [t0, t1]; returns (X_new, alive_mask)."""
    N = len(X)
    dyn = model.dynamics
    if isinstance(dyn, Diffusion):
        steps = int(round((t1 - t0) / dyn.dt))
        if steps < 1 or abs(steps * dyn.dt - (t1 - t0)) > 1e-9 * max(t1, 1.0):
            raise DomainError(f"mesh interval [{t0}, {t1}] is not a multiple of the Euler step")
        X = X.astype(float)
        alive = np.ones(N, dtype=bool)
        for _ in range(steps):
            idx = np.flatnonzero(alive)
            lam = np.asarray(model.intensity(X[idx]), dtype=float)
            dead = rng.standard_exponential(len(idx)) < lam * dyn.dt
            X[idx] = euler_step(model, X[idx], rng)
            alive[idx[dead]] = False
        return X, alive
    alive = np.zeros(N, dtype=bool)
    Xn = X.copy()
    for i in range(N):
        clock = ParticleClock(X[i], t0)
        while True:
            out = next_event(model, clock, t1, rng)
            if out.kind is EventKind.JUMP:
                clock = ParticleClock(out.state, out.time)
                continue
            if out.kind is EventKind.SURVIVED:
                alive[i] = True
                Xn[i] = out.state
            break
    return Xn, alive


def _run_generic(model, N, mesh, X, rng) -> DiscreteRunResult:
    t = mesh.times
    fractions = []
    for j in range(mesh.n):
        X, alive = _advance(model, X, t[j], t[j + 1], rng)
        surv = np.flatnonzero(alive)
        fractions.append(len(surv) / N)
        if len(surv) == 0:
            return DiscreteRunResult(N, mesh, np.array(fractions), X[:0], j + 1)
        if j == mesh.n - 1:
            return DiscreteRunResult(N, mesh, np.array(fractions), X[alive])
        killed = np.flatnonzero(~alive)
        X[killed] = X[surv[(rng.random(len(killed)) * len(surv)).astype(np.int64)]]
    raise AssertionError("unreachable")


def sigma_tilde_terms(oracle, phi, mesh: TimeMesh):
    """(a_n, b_n) of the discrete-time asymptotic variance.

    The predicted measures at level j are ``r_j eta_{t_j} + (1 - r_j) delta_cemetery``
    with ``r_j = p_{t_j} / p_{t_{j-1}}``; the same ``r_j`` weights the
    level-(j-1) measure inside ``b_n``.  For a survival-spaced mesh every
    ``r_j`` equals the common ratio.  ``phi`` vanishes at the cemetery, so
    the cemetery atom only contributes through squared constants.
    """
    if oracle is None:
        raise OracleMissing("sigma_tilde needs an analytic oracle")
    f = getattr(phi, "func", phi)
    T = mesh.T
    ts = mesh.times
    p = np.array([oracle.survival(t) for t in ts])

    def moments(t):
        g = lambda x: oracle.semigroup(T - t, f, x)  # noqa: E731
        return oracle.eta_expectation(t, g), oracle.eta_expectation(t, lambda x: np.square(g(x)))

    ms = [moments(t) for t in ts]
    m = np.array([a for a, _ in ms])
    s = np.array([b for _, b in ms])
    a_n = s[0] - m[0] ** 2
    b_n = 0.0
    for j in range(1, len(ts)):
        r = p[j] / p[j - 1]
        c = r * m[j]  # predicted-measure mean of Q^{T-t_j} phi
        w = p[j - 1] ** 2
        a_n += w * (r * s[j] - c * c)
        b_n += w * r * (s[j - 1] - 2.0 * c * m[j - 1] + c * c)
    return float(a_n), float(b_n)


def sigma_tilde(oracle, phi, mesh: TimeMesh) -> float:
    a, b = sigma_tilde_terms(oracle, phi, mesh)
    return a - b
