"""Estimators, the replication harness and the statistical checks.

For a single run with final particles ``X^1..X^N``:

* Fleming-Viot: ``eta_hat(phi) = mean_i phi(X^i)``, ``p_hat = (1 - 1/N)**B_T``
  and ``gamma_hat = p_hat * eta_hat``.
* crude Monte Carlo: ``p_hat = #alive / N``, ``eta_hat = sum_alive phi / #alive``
  (0/0 = 0) and ``gamma_hat = sum_alive phi / N``.
* discrete-time resampling: ``gamma_hat`` is the product of the survivor
  fractions before the last level times ``sum_alive phi / N``.

All three are written as ``weight * sum(phi over states) / N`` with a
run-specific weight, see :func:`gamma_hat`.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import stats

from .errors import DomainError, FailedRun, InsufficientReplications
from .rng import STREAM_DERIVATION, stream

# --------------------------------------------------------------------------
# observables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Pointwise test function with a declared sup-norm bound.

    ``func`` maps an array of states to an array of values.  Every
    evaluation is checked against ``sup``.
    """

    name: str
    func: Callable
    sup: float

    def __call__(self, states) -> np.ndarray:
        n = len(states)
        vals = np.asarray(self.func(states), dtype=float)
        if vals.shape != (n,):
            vals = np.broadcast_to(vals, (n,))
        if n and np.abs(vals).max() > self.sup * (1 + 1e-12):
            raise DomainError(f"observable {self.name!r} exceeds its declared bound {self.sup}")
        return vals

    def scaled(self, a: float) -> "Observable":
        return Observable(f"{a}*{self.name}", lambda x, f=self.func: a * np.asarray(f(x), dtype=float), abs(a) * self.sup)


def _ones(x):
    return np.ones(len(x))


INDICATOR_F = Observable("indicator_F", _ones, 1.0)


def indicator_state(k: int) -> Observable:
    """1 on the discrete label ``k``."""
    return Observable(f"indicator_state_{k}", lambda x: (np.asarray(x) == k).astype(float), 1.0)


def constant(c: float) -> Observable:
    return Observable(f"constant_{c}", lambda x: np.full(len(x), float(c)), abs(float(c)))


class ObservableSet:
    """Ordered, name-indexed observables; ``indicator_F`` is always first."""

    def __init__(self, observables: Iterable[Observable] = ()):
        obs = [INDICATOR_F]
        for o in observables:
            if o.name == INDICATOR_F.name:
                continue
            if any(o.name == p.name for p in obs):
                raise DomainError(f"duplicate observable name {o.name!r}")
            obs.append(o)
        self._obs = tuple(obs)

    def __iter__(self):
        return iter(self._obs)

    def __len__(self):
        return len(self._obs)

    def __getitem__(self, name: str) -> Observable:
        for o in self._obs:
            if o.name == name:
                return o
        raise KeyError(name)

    @property
    def names(self):
        return [o.name for o in self._obs]


# --------------------------------------------------------------------------
# single-run estimators
# --------------------------------------------------------------------------


def _check(run):
    if run.failed:
        raise FailedRun(run.failure or "run failed")


def _weight(run) -> float:
    w = getattr(run, "gamma_weight", None)
    if w is not None:
        return w
    return 1.0 if run.is_crude else run.p_hat


def p_hat(run) -> float:
    _check(run)
    return run.p_hat


def gamma_hat(run, phi: Observable) -> float:
    """Estimate of gamma_T(phi) = p_T eta_T(phi)."""
    _check(run)
    if len(run.states) == 0:
        return 0.0
    return _weight(run) * (float(np.sum(phi(run.states))) / run.N)


def eta_hat(run, phi: Observable) -> float:
    """Estimate of eta_T(phi); 0 when no particle survives (crude, discrete)."""
    _check(run)
    n = len(run.states)
    if n == 0:
        return 0.0
    return float(np.sum(phi(run.states))) / n


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Count, mean and centered sum of squares with a pairwise (Chan) merge."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def from_values(cls, values) -> "RunningStats":
        v = np.asarray(values, dtype=float)
        if len(v) == 0:
            return cls()
        m = float(np.mean(v))
        return cls(len(v), m, float(np.sum(np.square(v - m))))

    def push(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.n == 0:
            return RunningStats(self.n, self.mean, self.m2)
        if self.n == 0:
            return RunningStats(other.n, other.mean, other.m2)
        n = self.n + other.n
        d = other.mean - self.mean
        mean = self.mean + d * other.n / n
        m2 = self.m2 + other.m2 + d * d * self.n * other.n / n
        return RunningStats(n, mean, m2)

    @property
    def var(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else float("nan")

    @property
    def se(self) -> float:
        return math.sqrt(self.var / self.n) if self.n > 1 else float("nan")

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "var": self.var, "se": self.se}


@dataclass
class ObservableSummary:
    name: str
    gamma: RunningStats
    eta: RunningStats
    target_gamma: Optional[float] = None
    target_eta: Optional[float] = None
    sq_err: Optional[RunningStats] = None

    def merge(self, other: "ObservableSummary") -> "ObservableSummary":
        sq = None
        if self.sq_err is not None and other.sq_err is not None:
            sq = self.sq_err.merge(other.sq_err)
        return ObservableSummary(self.name, self.gamma.merge(other.gamma), self.eta.merge(other.eta), self.target_gamma, self.target_eta, sq)


@dataclass
class ReplicationSummary:
    """Aggregates over R independent runs.

    Runs that failed (discretized total extinction, discrete-level
    extinction) are counted in ``extinctions`` and left out of every
    statistic.  Wall-clock figures live in ``timing`` and are not part of the
    deterministic JSON unless requested.
    """

    model: str
    method: str
    mode: str
    N: int
    T: float
    R: int
    seed: Optional[int]
    extinctions: int
    all_dead: int
    p: RunningStats
    B: RunningStats
    observables: dict
    target_p: Optional[float] = None
    samples: Optional[dict] = None
    timing: dict = field(default_factory=dict)

    @property
    def n_ok(self) -> int:
        return self.p.n

    def scaled_variance(self, observable: str = "indicator_F", quantity: str = "gamma") -> float:
        """N * sample variance of the per-run estimates."""
        o = self.observables[observable]
        st = o.gamma if quantity == "gamma" else o.eta
        return self.N * st.var

    def scaled_mse(self, observable: str = "indicator_F") -> Optional[float]:
        sq = self.observables[observable].sq_err
        return None if sq is None else self.N * sq.mean

    def variance_ci(self, observable: str = "indicator_F", quantity: str = "gamma", level: float = 0.997):
        """Chi-square interval for N * Var of the estimator, assuming normal errors."""
        s2 = self.scaled_variance(observable, quantity)
        df = self.n_ok - 1
        a = 1.0 - level
        return df * s2 / stats.chi2.ppf(1 - a / 2, df), df * s2 / stats.chi2.ppf(a / 2, df)

    def merge(self, other: "ReplicationSummary") -> "ReplicationSummary":
        if (self.model, self.method, self.mode, self.N, self.T) != (other.model, other.method, other.mode, other.N, other.T):
            raise ValueError("cannot merge summaries of different experiments")
        samples = None
        if self.samples is not None and other.samples is not None:
            samples = {k: np.concatenate([self.samples[k], other.samples[k]]) for k in self.samples}
        return ReplicationSummary(
            model=self.model,
            method=self.method,
            mode=self.mode,
            N=self.N,
            T=self.T,
            R=self.R + other.R,
            seed=self.seed if self.seed == other.seed else None,
            extinctions=self.extinctions + other.extinctions,
            all_dead=self.all_dead + other.all_dead,
            p=self.p.merge(other.p),
            B=self.B.merge(other.B),
            observables={k: v.merge(other.observables[k]) for k, v in self.observables.items()},
            target_p=self.target_p,
            samples=samples,
            timing={k: self.timing.get(k, 0.0) + other.timing.get(k, 0.0) for k in set(self.timing) | set(other.timing)},
        )

    def to_dict(self, include_timing: bool = False) -> dict:
        obs = {}
        for name, o in self.observables.items():
            d = {
                "gamma": o.gamma.to_dict(),
                "eta": o.eta.to_dict(),
                "scaled_variance_gamma": self.scaled_variance(name, "gamma"),
                "scaled_variance_eta": self.scaled_variance(name, "eta"),
                "target_gamma": o.target_gamma,
                "target_eta": o.target_eta,
            }
            if o.sq_err is not None:
                d["scaled_mse"] = self.scaled_mse(name)
            obs[name] = d
        out = {
            "model": self.model,
            "method": self.method,
            "mode": self.mode,
            "N": self.N,
            "T": self.T,
            "R": self.R,
            "seed": self.seed,
            "stream_derivation": STREAM_DERIVATION,
            "successful_runs": self.n_ok,
            "extinctions": self.extinctions,
            "all_dead_runs": self.all_dead,
            "p_hat": self.p.to_dict(),
            "target_p": self.target_p,
            "branchings": self.B.to_dict() if self.B.n else None,
            "observables": obs,
        }
        if include_timing:
            out["timing"] = dict(self.timing)
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(_finite(self.to_dict(include_timing)), indent=2, sort_keys=True)

    def csv_rows(self, checks: Optional[dict] = None) -> list:
        """Flat table rows keyed by observable, one verdict per row when a check is given."""
        rows = []
        for name, o in self.observables.items():
            lo, hi = self.variance_ci(name) if self.n_ok > 1 else (float("nan"), float("nan"))
            chk = (checks or {}).get(name)
            rows.append(
                {
                    "observable": name,
                    "N": self.N,
                    "R": self.n_ok,
                    "mean": o.gamma.mean,
                    "scaled_variance": self.scaled_variance(name),
                    "target": "" if chk is None else chk.target,
                    "ci_low": lo,
                    "ci_high": hi,
                    "verdict": "" if chk is None else ("PASS" if chk.passed else "FAIL"),
                }
            )
        return rows

    def to_csv(self, checks: Optional[dict] = None) -> str:
        buf = io.StringIO()
        rows = self.csv_rows(checks)
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
        return buf.getvalue()


def _finite(obj):
    """JSON has no NaN; map non-finite floats to null."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# replication harness
# --------------------------------------------------------------------------

FV = "fv"
CRUDE = "crude"
DISCRETE = "discrete"


def _oracle_targets(model, T, observables, mesh=None):
    oracle = model.oracle
    if oracle is None:
        return None, {}
    if mesh is not None:
        T = mesh.T
    tg = {}
    for o in observables:
        tg[o.name] = (oracle.gamma(T, o.func), oracle.eta_expectation(T, o.func))
    return oracle.survival(T), tg


def replicate(
    model,
    N: int,
    T: float,
    R: int,
    observables=None,
    seed: int = 0,
    method: str = FV,
    mode: str = "exact",
    dt: Optional[float] = None,
    mesh=None,
    threads: Optional[int] = None,
    keep_samples: bool = False,
    chunk: int = 256,
) -> ReplicationSummary:
    """R independent runs, replication ``i`` driven by ``stream(seed, i)``.

    Per-run results are gathered in index order before aggregation, so the
    summary is bit-identical for every thread count.
    """
    from .discrete import run_discrete
    from .engine import run_crude_mc, run_fleming_viot

    if R < 2:
        raise ValueError("replicate needs R >= 2")
    obs = observables if isinstance(observables, ObservableSet) else ObservableSet(observables or ())
    obs_list = list(obs)
    k = len(obs_list)
    if method == DISCRETE:
        if mesh is None:
            raise ValueError("method 'discrete' needs a time mesh")
        T = mesh.T

    def one(i):
        rng = stream(seed, i)
        if method == FV:
            run = run_fleming_viot(model, N, T, rng=rng, mode=mode, dt=dt)
        elif method == CRUDE:
            run = run_crude_mc(model, N, T, rng=rng, dt=dt)
        elif method == DISCRETE:
            run = run_discrete(model, N, mesh, rng=rng)
        else:
            raise ValueError(f"unknown method {method!r}")
        if run.failed:
            return True, 0, math.nan, 0, [math.nan] * k, [math.nan] * k
        b = getattr(run, "B", None)
        n = len(run.states)
        if n == 0:
            return False, 0 if b is None else b, run.p_hat, 1, [0.0] * k, [0.0] * k
        # one evaluation per observable feeds both estimators
        sums = [float(np.sum(o(run.states))) for o in obs_list]
        w = _weight(run)
        return False, 0 if b is None else b, run.p_hat, 0, [w * (s / run.N) for s in sums], [s / n for s in sums]

    def block(lo):
        hi = min(lo + chunk, R)
        recs = [one(i) for i in range(lo, hi)]
        return (
            np.array([r[0] for r in recs], dtype=bool),
            np.array([r[1] for r in recs], dtype=np.int64),
            np.array([r[2] for r in recs], dtype=float),
            np.array([r[3] for r in recs], dtype=np.int64),
            np.array([r[4] for r in recs], dtype=float).reshape(-1, k),
            np.array([r[5] for r in recs], dtype=float).reshape(-1, k),
        )

    threads = threads or os.cpu_count() or 1
    starts = range(0, R, chunk)
    t0 = time.perf_counter()
    if threads == 1:
        parts = [block(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(block, starts))
    wall = time.perf_counter() - t0

    failed, Bv, pv, dead, gv, ev = (np.concatenate([p[j] for p in parts]) for j in range(6))
    ok = ~failed
    target_p, targets = _oracle_targets(model, T, obs_list, mesh)
    osum = {}
    for j, o in enumerate(obs_list):
        tg, te = targets.get(o.name, (None, None))
        g = gv[ok, j]
        osum[o.name] = ObservableSummary(
            o.name,
            RunningStats.from_values(g),
            RunningStats.from_values(ev[ok, j]),
            tg,
            te,
            RunningStats.from_values(np.square(g - tg)) if tg is not None else None,
        )
    samples = None
    if keep_samples:
        samples = {"B": Bv[ok], "p_hat": pv[ok]}
        for j, o in enumerate(obs_list):
            samples[f"gamma:{o.name}"] = gv[ok, j]
            samples[f"eta:{o.name}"] = ev[ok, j]
    return ReplicationSummary(
        model=model.name,
        method=method,
        mode=mode if method == FV else method,
        N=N,
        T=float(T),
        R=R,
        seed=seed,
        extinctions=int(failed.sum()),
        all_dead=int(dead[ok].sum()),
        p=RunningStats.from_values(pv[ok]),
        B=RunningStats.from_values(Bv[ok]) if method != DISCRETE else RunningStats(),
        observables=osum,
        target_p=target_p,
        samples=samples,
        timing={"wall_seconds": wall, "threads": threads},
    )


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------


@dataclass
class CheckReport:
    name: str
    passed: bool
    observed: float
    target: float
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    tolerance: Optional[float] = None
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        s = f"{verdict} {self.name}: observed={self.observed:.6g} target={self.target:.6g}"
        if self.ci_low is not None:
            s += f" ci=[{self.ci_low:.6g}, {self.ci_high:.6g}]"
        return s

    def to_dict(self) -> dict:
        return _finite(
            {
                "name": self.name,
                "passed": self.passed,
                "observed": self.observed,
                "target": self.target,
                "ci_low": self.ci_low,
                "ci_high": self.ci_high,
                "tolerance": self.tolerance,
                "details": self.details,
            }
        )


def clt_check(
    summary: ReplicationSummary,
    target_sigma2: float,
    rel_tol: float,
    observable: str = "indicator_F",
    quantity: str = "gamma",
    level: float = 0.997,
) -> CheckReport:
    """Compare N * Var of the estimator against an asymptotic variance.

    PASS iff the target lies in the chi-square interval of level ``level``
    widened to ``[lo (1 - rel_tol), hi (1 + rel_tol)]``.  A Kolmogorov-Smirnov
    normality p-value of the scaled errors is attached for information only.
    """
    if summary.n_ok < 100:
        raise InsufficientReplications(f"need at least 100 successful runs, have {summary.n_ok}")
    s2 = summary.scaled_variance(observable, quantity)
    lo, hi = summary.variance_ci(observable, quantity, level)
    passed = lo * (1 - rel_tol) <= target_sigma2 <= hi * (1 + rel_tol)
    details = {"level": level, "interval_width": hi - lo, "relative_error": s2 / target_sigma2 - 1 if target_sigma2 else None}
    key = f"{quantity}:{observable}"
    if summary.samples is not None and key in summary.samples:
        x = summary.samples[key]
        sd = np.std(x, ddof=1)
        if sd > 0:
            details["ks_normality_pvalue"] = float(stats.kstest((x - x.mean()) / sd, "norm").pvalue)
    return CheckReport(f"clt[{quantity}:{observable}]", bool(passed), s2, target_sigma2, lo, hi, rel_tol, details)


def l2_bound_check(summary: ReplicationSummary, phi_sup: float, observable: str = "indicator_F") -> CheckReport:
    """N * E[(gamma_hat - gamma_T)^2] <= 7 ||phi||^2, with 3 standard errors of slack."""
    sq = summary.observables[observable].sq_err
    if sq is None:
        raise DomainError("the L2 bound check needs an oracle target gamma_T(phi)")
    bound = 7.0 * phi_sup**2
    mse = summary.N * sq.mean
    se = summary.N * sq.se
    passed = mse <= bound + 3 * se
    return CheckReport(f"l2_bound[{observable}]", bool(passed), mse, bound, details={"se": se})


def eta_clt_variance(sigma2_of_centered: float, p_T: float) -> float:
    """Asymptotic variance of sqrt(N)(eta_hat - eta_T): sigma_T^2(phi - eta_T(phi)) / p_T^2."""
    if not p_T > 0:
        raise DomainError("p_T must be positive")
    return sigma2_of_centered / (p_T * p_T)
