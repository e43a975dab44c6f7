"""Fleming-Viot particle systems and the crude Monte Carlo baseline.

Two run modes:

``exact``
    Event driven.  Every particle holds one pending candidate event in a
    priority queue; the earliest is processed, and a killing makes the
    particle copy the state of a uniformly chosen other particle at that
    instant.  Only the processed particle's entry changes, since particles
    move independently between branchings.
``discretized``
    Synchronous Euler-type grid.  All particles advance one step, then the
    particles killed during the step are reborn one by one in uniformly random
    order, each copying a uniformly chosen currently-alive particle.

Models declaring a compiled fast path (``ModelSpec.fast``) are run by
:mod:`fvlab.kernels` in exact mode; everything else uses the generic
Python engine below.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import GridMismatch, ModeUnsupported, OracleMissing
from .process import (
    Diffusion,
    EventKind,
    ModelSpec,
    ParticleClock,
    Pdmp,
    PureKilling,
    evaluate_at,
    next_event,
)
from .models import euler_step

EXACT = "exact"
DISCRETIZED = "discretized"
CRUDE = "crude"


@dataclass(frozen=True)
class BranchingEvent:
    time: float
    killed_index: int
    donor_index: int
    cumulative_count: int


@dataclass
class EventLog:
    """Columnar branching log; row ``j`` is the ``j+1``-th branching."""

    time: np.ndarray
    killed: np.ndarray
    donor: np.ndarray

    def __len__(self):
        return len(self.time)

    @property
    def cum_count(self) -> np.ndarray:
        return np.arange(1, len(self.time) + 1, dtype=np.int64)

    def events(self):
        for j in range(len(self)):
            yield BranchingEvent(float(self.time[j]), int(self.killed[j]), int(self.donor[j]), j + 1)

    @classmethod
    def from_events(cls, events) -> "EventLog":
        events = list(events)
        return cls(
            np.array([e.time for e in events], dtype=np.float64),
            np.array([e.killed_index for e in events], dtype=np.int64),
            np.array([e.donor_index for e in events], dtype=np.int64),
        )


@dataclass
class ParticleSystemState:
    model: ModelSpec
    clocks: list
    sim_time: float = 0.0
    B: int = 0
    event_log: Optional[list] = None

    @property
    def N(self) -> int:
        return len(self.clocks)


def survival_estimate(B: int, N: int) -> float:
    """p_hat = (1 - 1/N)**B, evaluated as exp(B * log1p(-1/N))."""
    return math.exp(B * math.log1p(-1.0 / N))


@dataclass
class RunResult:
    """Outcome of one particle run.

    ``states`` holds the particles entering the empirical measure at ``T``: all
    ``N`` particles for Fleming-Viot, the survivors for crude Monte Carlo.
    """

    N: int
    T: float
    mode: str
    B: int
    p_hat: float
    states: np.ndarray
    n_alive: int
    failed: bool = False
    failure: Optional[str] = None
    event_log: Optional[EventLog] = None
    snapshot_times: Optional[np.ndarray] = None
    snapshot_states: Optional[np.ndarray] = None
    snapshot_B: Optional[np.ndarray] = None
    obs_sums: dict = field(default_factory=dict)

    @property
    def is_crude(self) -> bool:
        return self.mode == CRUDE

    @property
    def all_dead(self) -> bool:
        return self.n_alive == 0


# --------------------------------------------------------------------------
# branching
# --------------------------------------------------------------------------


def branch(system: ParticleSystemState, killed_index: int, time: float, rng) -> BranchingEvent:
    """Rebirth of ``killed_index`` at ``time`` onto a uniformly chosen other particle."""
    n = system.N
    d = int(rng.integers(n - 1))
    if d >= killed_index:
        d += 1
    donor_state = evaluate_at(system.model, system.clocks[d], time)
    system.clocks[killed_index] = ParticleClock(donor_state, time)
    system.B += 1
    ev = BranchingEvent(time, killed_index, d, system.B)
    if system.event_log is not None:
        system.event_log.append(ev)
    return ev


# --------------------------------------------------------------------------
# Fleming-Viot
# --------------------------------------------------------------------------


def _state_array(states: list, model: ModelSpec) -> np.ndarray:
    if isinstance(model.dynamics, PureKilling) and model.fast and model.fast[0] == "finite_state":
        return np.asarray(states, dtype=np.int64)
    return np.asarray(states)


def _check_snapshots(snapshots, T):
    if snapshots is None:
        return None
    s = np.ascontiguousarray(snapshots, dtype=np.float64)
    if s.ndim != 1 or np.any(np.diff(s) < 0) or (len(s) and (s[0] < 0 or s[-1] > T)):
        raise ValueError("snapshot times must be sorted within [0, T]")
    return s


def run_fleming_viot(
    model: ModelSpec,
    N: int,
    T: float,
    observables=None,
    rng=None,
    mode: str = EXACT,
    *,
    dt: Optional[float] = None,
    snapshots=None,
    log_events: bool = False,
    use_kernel: bool = True,
) -> RunResult:
    """Simulate the N-particle Fleming-Viot system on [0, T]."""
    if N < 2:
        raise ValueError("Fleming-Viot needs N >= 2")
    if not T > 0:
        raise ValueError("T must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    snaps = _check_snapshots(snapshots, T)

    if mode == EXACT:
        if isinstance(model.dynamics, Diffusion):
            raise ModeUnsupported("diffusions have no exact event-driven simulation; use mode='discretized'")
        if use_kernel and model.fast is not None:
            res = _run_exact_kernel(model, N, T, rng, snaps, log_events)
        else:
            res = _run_exact_generic(model, N, T, rng, snaps, log_events)
    elif mode == DISCRETIZED:
        res = _run_discretized(model, N, T, rng, dt, snaps, log_events)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if observables is not None and not res.failed:
        res.obs_sums = {o.name: float(np.sum(o(res.states))) for o in observables}
    return res


def _run_exact_kernel(model, N, T, rng, snaps, log_events) -> RunResult:
    kind = model.fast[0]
    x0 = model.sample_initial(rng, N)
    if kind == "finite_state":
        states = np.ascontiguousarray(x0, dtype=np.int64)
        B, lg, ss, sb = kernels.fv_finite_state(model.fast[1], states, float(T), rng, snaps, bool(log_events))
    elif kind == "ruin_exp":
        _, c, theta, mean = model.fast
        states, B, lg, ss, sb = kernels.fv_ruin_exp(
            np.ascontiguousarray(x0, dtype=np.float64), c, theta, mean, float(T), rng, snaps, bool(log_events)
        )
    else:
        raise ModeUnsupported(f"no kernel named {kind!r}")
    B = int(B)
    return RunResult(
        N=N,
        T=T,
        mode=EXACT,
        B=B,
        p_hat=survival_estimate(B, N),
        states=states,
        n_alive=N,
        event_log=EventLog(*lg) if lg is not None else None,
        snapshot_times=snaps,
        snapshot_states=ss,
        snapshot_B=sb,
    )


def _run_exact_generic(model, N, T, rng, snaps, log_events) -> RunResult:
    x0 = model.sample_initial(rng, N)
    system = ParticleSystemState(model, [ParticleClock(x0[i], 0.0) for i in range(N)], event_log=[] if log_events else None)
    clocks = system.clocks
    pending = [None] * N
    heap: list = []

    def schedule(i):
        out = next_event(model, clocks[i], T, rng)
        pending[i] = out
        if out.kind is not EventKind.SURVIVED:
            heapq.heappush(heap, (out.time, i))

    for i in range(N):
        schedule(i)

    snap_states, snap_b = [], []
    s, ns = 0, 0 if snaps is None else len(snaps)

    def take_snapshot(ts):
        snap_states.append([evaluate_at(model, c, ts) for c in clocks])
        snap_b.append(system.B)

    while heap:
        t, i = heapq.heappop(heap)
        while s < ns and snaps[s] < t:
            take_snapshot(snaps[s])
            s += 1
        system.sim_time = t
        out = pending[i]
        if out.kind is EventKind.JUMP:
            clocks[i] = ParticleClock(out.state, t)
        else:
            branch(system, i, t, rng)
        schedule(i)
    while s < ns:
        take_snapshot(snaps[s])
        s += 1

    final = _state_array([evaluate_at(model, c, T) for c in clocks], model)
    return RunResult(
        N=N,
        T=T,
        mode=EXACT,
        B=system.B,
        p_hat=survival_estimate(system.B, N),
        states=final,
        n_alive=N,
        event_log=EventLog.from_events(system.event_log) if log_events else None,
        snapshot_times=snaps,
        snapshot_states=np.array([_state_array(r, model) for r in snap_states]) if snaps is not None else None,
        snapshot_B=np.array(snap_b, dtype=np.int64) if snaps is not None else None,
    )


def _grid(model, T, dt):
    if dt is None:
        if not isinstance(model.dynamics, Diffusion):
            raise ModeUnsupported("discretized mode needs a time step dt for non-diffusion models")
        dt = model.dynamics.dt
    elif isinstance(model.dynamics, Diffusion) and not math.isclose(dt, model.dynamics.dt, rel_tol=1e-12):
        raise GridMismatch("dt differs from the diffusion's Euler step")
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(T, 1.0):
        raise GridMismatch(f"dt={dt} does not divide T={T}")
    return steps, dt


def _advance_step(model, X, t, dt, rng):
    """Advance every particle over [t, t+dt]; returns (X_new, killed_mask)."""
    dyn = model.dynamics
    N = len(X)
    if isinstance(dyn, Diffusion):
        lam = np.asarray(model.intensity(X), dtype=float)
        killed = rng.standard_exponential(N) < lam * dt
        return euler_step(model, X, rng), killed
    if model.fast is not None and model.fast[0] == "finite_state":
        lam = model.fast[1][X]
        killed = rng.standard_exponential(N) < lam * dt
        return X, killed
    killed = np.zeros(N, dtype=bool)
    Xn = X.copy()
    for i in range(N):
        clock = ParticleClock(X[i], t)
        while True:
            out = next_event(model, clock, t + dt, rng)
            if out.kind is EventKind.JUMP:
                clock = ParticleClock(out.state, out.time)
            elif out.kind is EventKind.KILLED:
                killed[i] = True
                break
            else:
                Xn[i] = out.state
                break
    return Xn, killed


def _run_discretized(model, N, T, rng, dt, snaps, log_events) -> RunResult:
    steps, dt = _grid(model, T, dt)
    X = np.array(model.sample_initial(rng, N))
    B = 0
    lt, lk, ld = [], [], []
    snap_states, snap_b = [], []
    s, ns = 0, 0 if snaps is None else len(snaps)
    tol = 1e-9 * max(T, 1.0)

    def record(t):
        nonlocal s
        while s < ns and snaps[s] <= t + tol:
            if abs(snaps[s] - t) > tol:
                raise GridMismatch(f"snapshot time {snaps[s]} is not on the grid")
            snap_states.append(X.copy())
            snap_b.append(B)
            s += 1

    record(0.0)
    for k in range(steps):
        t0 = k * dt
        t1 = T if k == steps - 1 else (k + 1) * dt
        X, killed = _advance_step(model, X, t0, dt, rng)
        kidx = np.flatnonzero(killed)
        if len(kidx):
            if len(kidx) == N:
                return RunResult(
                    N=N, T=T, mode=DISCRETIZED, B=B, p_hat=float("nan"), states=X, n_alive=0,
                    failed=True, failure=f"TotalExtinction at step {k + 1} (t={t1})",
                )
            alive = np.flatnonzero(~killed).tolist()
            for i in rng.permutation(kidx):
                d = alive[int(rng.integers(len(alive)))]
                X[i] = X[d]
                alive.append(int(i))
                B += 1
                if log_events:
                    lt.append(t1)
                    lk.append(int(i))
                    ld.append(int(d))
        record(t1)

    return RunResult(
        N=N,
        T=T,
        mode=DISCRETIZED,
        B=B,
        p_hat=survival_estimate(B, N),
        states=X,
        n_alive=N,
        event_log=EventLog(np.array(lt, dtype=np.float64), np.array(lk, dtype=np.int64), np.array(ld, dtype=np.int64))
        if log_events
        else None,
        snapshot_times=snaps,
        snapshot_states=np.array(snap_states) if snaps is not None else None,
        snapshot_B=np.array(snap_b, dtype=np.int64) if snaps is not None else None,
    )


# --------------------------------------------------------------------------
# crude Monte Carlo
# --------------------------------------------------------------------------


def run_crude_mc(model: ModelSpec, N: int, T: float, observables=None, rng=None, *, dt: Optional[float] = None) -> RunResult:
    """N independent killed paths; survivors form the empirical measure.

    p_hat = #alive / N and eta_hat(phi) = sum_alive phi / #alive, with 0/0 = 0.
    """
    if N < 1:
        raise ValueError("crude Monte Carlo needs N >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x0 = np.array(model.sample_initial(rng, N))
    dyn = model.dynamics
    fast = model.fast[0] if model.fast else None

    if fast == "finite_state":
        lam = model.fast[1][x0]
        alive = ~(rng.standard_exponential(N) < lam * T)
        final = x0
    elif fast == "ruin_exp":
        final, alive = _crude_ruin_exp(x0, model.fast[1], model.fast[2], model.fast[3], T, rng)
    elif isinstance(dyn, Diffusion):
        steps, dt = _grid(model, T, dt)
        X = x0.astype(float)
        alive = np.ones(N, dtype=bool)
        for _ in range(steps):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            lam = np.asarray(model.intensity(X[idx]), dtype=float)
            dead = rng.standard_exponential(len(idx)) < lam * dt
            X[idx] = euler_step(model, X[idx], rng)
            alive[idx[dead]] = False
        final = X
    else:
        final_list = []
        alive = np.zeros(N, dtype=bool)
        for i in range(N):
            clock = ParticleClock(x0[i], 0.0)
            while True:
                out = next_event(model, clock, T, rng)
                if out.kind is EventKind.JUMP:
                    clock = ParticleClock(out.state, out.time)
                    continue
                if out.kind is EventKind.SURVIVED:
                    alive[i] = True
                    final_list.append(out.state)
                else:
                    final_list.append(x0[i])
                break
        final = _state_array(final_list, model)

    n_alive = int(alive.sum())
    res = RunResult(N=N, T=T, mode=CRUDE, B=N - n_alive, p_hat=n_alive / N, states=final[alive], n_alive=n_alive)
    if observables is not None:
        res.obs_sums = {o.name: float(np.sum(o(res.states))) if n_alive else 0.0 for o in observables}
    return res


def _crude_ruin_exp(x0, c, theta, mean, T, rng):
    """Vectorized independent ruin paths with Exp(mean) claims."""
    pos = x0.astype(float).copy()
    t = np.zeros(len(pos))
    alive = np.ones(len(pos), dtype=bool)
    active = np.arange(len(pos))
    while len(active):
        tn = t[active] + rng.standard_exponential(len(active)) / theta
        done = tn > T
        fin = active[done]
        pos[fin] += c * (T - t[fin])
        active, tn = active[~done], tn[~done]
        if not len(active):
            break
        x = pos[active] + c * (tn - t[active])
        fx = -np.expm1(-x / mean)
        ok = rng.random(len(active)) < fx
        alive[active[~ok]] = False
        keep = active[ok]
        y = -mean * np.log1p(-rng.random(len(keep)) * fx[ok])
        pos[keep] = np.maximum(x[ok] - y, 0.0)
        t[keep] = tn[ok]
        active = keep
    return pos, alive


# --------------------------------------------------------------------------
# quadratic-variation diagnostic
# --------------------------------------------------------------------------


def qv_integrand(model: ModelSpec, run: RunResult, observable):
    """Per-snapshot integrand of N d<M,M>_t / dt for one Fleming-Viot run.

    (p_t^N)^2 [ eta_t^N(Gamma_{T-t} phi) + (1/N) sum_n lambda(X^n) V_n ]
    where V_n is the variance of Q^{T-t} phi over the other N-1 particles.
    """
    oracle = model.oracle
    if oracle is None or oracle.carre_du_champ is None:
        raise OracleMissing(f"model {model.name!r} lacks semigroup/carre du champ closed forms")
    N, T = run.N, run.T
    out = np.empty(len(run.snapshot_times))
    for k, (t, X, B) in enumerate(zip(run.snapshot_times, run.snapshot_states, run.snapshot_B)):
        p = survival_estimate(int(B), N)
        f = np.asarray(oracle.semigroup(T - t, observable, X), dtype=float)
        g = np.asarray(oracle.carre_du_champ(T - t, observable, X), dtype=float)
        lam = np.asarray(model.intensity(X), dtype=float)
        s1, s2 = f.sum(), np.dot(f, f)
        loo_mean = (s1 - f) / (N - 1)
        loo_var = np.maximum((s2 - f * f) / (N - 1) - loo_mean**2, 0.0)
        out[k] = p * p * (g.mean() + np.mean(lam * loo_var))
    return out


def qv_diagnostic(model: ModelSpec, N: int, T: float, observable, rng=None, grid_points: int = 64) -> float:
    """Trapezoid integral over [0, T] of the quadratic-variation integrand of one run.

    Converges in L1 to sigma_T^2(phi) - V_{eta_0}(Q^T phi) as N grows.
    """
    if model.oracle is None or model.oracle.carre_du_champ is None:
        raise OracleMissing(f"model {model.name!r} lacks semigroup/carre du champ closed forms")
    grid = np.linspace(0.0, T, grid_points)
    run = run_fleming_viot(model, N, T, rng=rng, snapshots=grid)
    return float(np.trapezoid(qv_integrand(model, run, observable), grid))


# --------------------------------------------------------------------------
# event log output
# --------------------------------------------------------------------------


def write_event_log(log: EventLog, path) -> None:
    """CSV with header ``time,killed,donor,cum_count``, one row per branching."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "killed", "donor", "cum_count"])
        for j in range(len(log)):
            w.writerow([repr(float(log.time[j])), int(log.killed[j]), int(log.donor[j]), j + 1])
