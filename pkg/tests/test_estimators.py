import csv
import io
import json
import math

import numpy as np
import pytest

from fvlab.discrete import run_discrete, uniform_mesh
from fvlab.engine import run_crude_mc, run_fleming_viot
from fvlab.errors import DomainError, FailedRun, InsufficientReplications
from fvlab.estimators import (
    INDICATOR_F,
    Observable,
    ObservableSet,
    RunningStats,
    clt_check,
    constant,
    eta_clt_variance,
    eta_hat,
    gamma_hat,
    indicator_state,
    l2_bound_check,
    p_hat,
    replicate,
)
from fvlab.models import constant_rate_model, two_state_model
from fvlab.rng import stream
from fvlab.variance import sigma2_final, sigma2_two_state

from conftest import LN4


class TestObservable:
    def test_bound_enforced(self):
        bad = Observable("big", lambda x: np.full(len(x), 2.0), 1.0)
        with pytest.raises(DomainError):
            bad(np.zeros(3))

    def test_scalar_broadcast(self):
        o = Observable("c", lambda x: 0.5, 1.0)
        np.testing.assert_array_equal(o(np.zeros(4)), np.full(4, 0.5))

    def test_scaled(self):
        o = indicator_state(1).scaled(-3.0)
        assert o.sup == 3.0
        np.testing.assert_array_equal(o(np.array([0, 1])), [0.0, -3.0])

    def test_set(self):
        s = ObservableSet([indicator_state(0), constant(0.5)])
        assert s.names[0] == "indicator_F" and len(s) == 3
        assert s["constant_0.5"].sup == 0.5
        with pytest.raises(KeyError):
            s["missing"]
        with pytest.raises(DomainError):
            ObservableSet([indicator_state(0), indicator_state(0)])


class TestSingleRun:
    def test_gamma_of_one_equals_p_hat(self):
        m = two_state_model(0.5, LN4)
        runs = [
            run_fleming_viot(m, 50, 1.0, rng=stream(0, 0)),
            run_crude_mc(m, 50, 1.0, rng=stream(0, 1)),
            run_discrete(m, 50, uniform_mesh(1.0, 10), rng=stream(0, 2)),
        ]
        for r in runs:
            assert gamma_hat(r, INDICATOR_F) == p_hat(r)

    def test_fv_product_form(self):
        m = two_state_model(0.5, LN4)
        r = run_fleming_viot(m, 100, 1.0, rng=stream(1, 0))
        phi = indicator_state(0)
        assert gamma_hat(r, phi) == pytest.approx(p_hat(r) * eta_hat(r, phi), rel=1e-15)

    def test_crude_empty(self):
        r = run_crude_mc(constant_rate_model(100.0), 10, 1.0, rng=stream(0, 0))
        assert eta_hat(r, INDICATOR_F) == 0.0 and gamma_hat(r, INDICATOR_F) == 0.0

    def test_failed_run_raises(self):
        r = run_fleming_viot(constant_rate_model(50.0), 3, 1.0, rng=stream(0, 0), mode="discretized", dt=0.5)
        assert r.failed
        for f in (lambda: p_hat(r), lambda: gamma_hat(r, INDICATOR_F), lambda: eta_hat(r, INDICATOR_F)):
            with pytest.raises(FailedRun):
                f()

    def test_survival_example(self):
        # N = 100 and B = 100 branchings
        assert math.exp(100 * math.log1p(-1 / 100)) == pytest.approx(0.3660, abs=5e-5)


class TestRunningStats:
    def test_merge_associative(self, rng):
        x = rng.normal(3.0, 2.0, 3000)
        a, b, c = (RunningStats.from_values(v) for v in np.split(x, [700, 1900]))
        left = a.merge(b).merge(c)
        right = a.merge(b.merge(c))
        full = RunningStats.from_values(x)
        for s in (left, right):
            assert s.n == full.n
            assert s.mean == pytest.approx(full.mean, rel=1e-12)
            assert s.var == pytest.approx(full.var, rel=1e-12)
        assert full.var == pytest.approx(np.var(x, ddof=1), rel=1e-12)

    def test_push_matches_batch(self, rng):
        x = rng.exponential(size=500)
        s = RunningStats()
        for v in x:
            s.push(v)
        f = RunningStats.from_values(x)
        assert s.mean == pytest.approx(f.mean, rel=1e-12) and s.var == pytest.approx(f.var, rel=1e-12)

    def test_empty(self):
        e = RunningStats()
        s = RunningStats.from_values([1.0, 2.0])
        assert e.merge(s) == s and s.merge(e) == s
        assert math.isnan(e.var) and math.isnan(e.se)


@pytest.fixture(scope="module")
def small_summary():
    m = two_state_model(0.5, LN4)
    return replicate(m, 50, 1.0, 400, observables=[indicator_state(0)], seed=17, threads=1, keep_samples=True)


class TestReplicate:
    def test_thread_count_invariance(self):
        m = two_state_model(0.5, LN4)
        a = replicate(m, 30, 1.0, 600, seed=4, threads=1, chunk=64)
        b = replicate(m, 30, 1.0, 600, seed=4, threads=4, chunk=64)
        assert a.to_json() == b.to_json()

    def test_chunking_invariance(self):
        m = two_state_model(0.5, LN4)
        a = replicate(m, 30, 1.0, 300, seed=4, threads=1, chunk=7, keep_samples=True)
        b = replicate(m, 30, 1.0, 300, seed=4, threads=1, chunk=300, keep_samples=True)
        np.testing.assert_array_equal(a.samples["p_hat"], b.samples["p_hat"])

    def test_replication_uses_its_stream(self, small_summary):
        m = two_state_model(0.5, LN4)
        r = run_fleming_viot(m, 50, 1.0, rng=stream(17, 123))
        assert small_summary.samples["p_hat"][123] == r.p_hat
        assert small_summary.samples["B"][123] == r.B

    def test_targets(self, small_summary):
        assert small_summary.target_p == pytest.approx(0.625)
        o = small_summary.observables["indicator_state_0"]
        assert o.target_gamma == pytest.approx(0.5) and o.target_eta == pytest.approx(0.8)

    def test_merge_equals_single_run(self):
        m = two_state_model(0.5, LN4)
        full = replicate(m, 20, 1.0, 512, seed=2, threads=1, keep_samples=True)
        part = replicate(m, 20, 1.0, 256, seed=2, threads=1, keep_samples=True)
        other = full.samples["p_hat"][256:]
        merged = part.p.merge(RunningStats.from_values(other))
        assert merged.mean == pytest.approx(full.p.mean, rel=1e-12)
        assert merged.var == pytest.approx(full.p.var, rel=1e-12)
        assert part.merge(part).R == 512
        with pytest.raises(ValueError):
            part.merge(replicate(m, 21, 1.0, 2, seed=2, threads=1))

    def test_json_is_deterministic_and_timing_free(self, small_summary):
        d = json.loads(small_summary.to_json())
        assert "timing" not in d
        assert d["successful_runs"] == 400 and d["extinctions"] == 0
        assert "timing" in json.loads(small_summary.to_json(include_timing=True))

    def test_csv(self, small_summary):
        rows = list(csv.reader(io.StringIO(small_summary.to_csv())))
        assert rows[0] == ["observable", "N", "R", "mean", "scaled_variance", "target", "ci_low", "ci_high", "verdict"]
        assert [r[0] for r in rows[1:]] == ["indicator_F", "indicator_state_0"]

    def test_extinctions_excluded(self):
        s = replicate(constant_rate_model(10.0), 2, 1.0, 200, seed=0, method="fv", mode="discretized", dt=0.5, threads=1)
        assert s.extinctions > 0 and s.n_ok + s.extinctions == 200
        assert math.isfinite(s.p.mean)

    def test_bad_arguments(self):
        m = two_state_model(0.5, LN4)
        with pytest.raises(ValueError):
            replicate(m, 10, 1.0, 1)
        with pytest.raises(ValueError):
            replicate(m, 10, 1.0, 10, method="discrete")
        with pytest.raises(ValueError):
            replicate(m, 10, 1.0, 10, method="magic")


class TestChecks:
    def test_insufficient(self):
        s = replicate(two_state_model(0.5, LN4), 10, 1.0, 50, seed=0, threads=1)
        with pytest.raises(InsufficientReplications):
            clt_check(s, 0.2347, 0.1)

    def test_clt_pass_and_fail(self):
        s = replicate(two_state_model(0.5, LN4), 200, 1.0, 4000, seed=1, threads=1, keep_samples=True)
        target = sigma2_two_state(0.5, LN4)
        ok = clt_check(s, target, 0.1)
        assert ok.passed and ok.line().startswith("PASS")
        assert 0 <= ok.details["ks_normality_pvalue"] <= 1
        bad = clt_check(s, 2 * target, 0.1)
        assert not bad.passed and bad.line().startswith("FAIL")

    def test_l2_bound_scales(self, small_summary):
        rep = l2_bound_check(small_summary, 1.0)
        assert rep.passed and rep.target == 7.0
        assert l2_bound_check(small_summary, 3.0).target == 63.0
        with pytest.raises(DomainError):
            m = oracle_free_model()
            l2_bound_check(replicate(m, 10, 1.0, 10, seed=0, threads=1), 1.0)

    def test_eta_clt_variance(self):
        assert eta_clt_variance(0.25, 0.5) == 1.0
        with pytest.raises(DomainError):
            eta_clt_variance(0.25, 0.0)

    def test_eta_clt(self):
        # fluctuations of eta_hat for the indicator of state 0 against the centered gamma variance
        m = two_state_model(0.5, LN4)
        phi = indicator_state(0)
        eta_T = m.oracle.eta_expectation(1.0, phi.func)
        centered = lambda x: (np.asarray(x) == 0).astype(float) - eta_T  # noqa: E731
        target = eta_clt_variance(sigma2_final(m.oracle, centered, 1.0), m.oracle.survival(1.0))
        s = replicate(m, 200, 1.0, 8000, observables=[phi], seed=9, threads=1)
        rep = clt_check(s, target, 0.1, observable=phi.name, quantity="eta")
        assert rep.passed, rep.line()


def oracle_free_model():
    """A model without an oracle, so no target is known."""
    from fvlab.models import ruin_pdmp_model

    return ruin_pdmp_model(1.0, 1.0, 1.0)
