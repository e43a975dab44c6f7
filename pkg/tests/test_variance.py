import math

import numpy as np
import pytest
from scipy import integrate as sp_integrate

from fvlab.errors import DomainError, OracleMissing, QuadratureNotConverged
from fvlab.estimators import INDICATOR_F, indicator_state
from fvlab.models import constant_rate_model, finite_state_model, ruin_pdmp_model, two_state_model
from fvlab.variance import (
    QuadratureSettings,
    integrate,
    ptn_exact_law,
    sigma2_final,
    sigma2_path,
    sigma2_path_curve,
    sigma2_two_state,
    variance_bounds,
    variance_report,
)

from conftest import LN4

GRID_P = [0.1, 0.3, 0.5, 0.7, 0.9]
GRID_L = [0.2, 0.7, LN4, 3.0, 8.0]


def independent_sigma2(p, lam, T=1.0):
    """Final-time variance of 1_F for the two-state model from scipy quadrature of closed forms."""

    def pt(t):
        return p + (1 - p) * math.exp(-lam * t)

    def dpt(t):
        return -lam * (1 - p) * math.exp(-lam * t)

    def V(t):
        # eta_t puts p/p_t on the absorbing-free state, where Q^{T-t} 1 = 1; elsewhere it is exp(-lam (T-t))
        w = p / pt(t)
        a, b = 1.0, math.exp(-lam * (T - t))
        return w * (1 - w) * (a - b) ** 2

    integral, _ = sp_integrate.quad(lambda t: V(t) * pt(t) * dpt(t), 0, T, epsabs=1e-14, epsrel=1e-12)
    P = pt(T)
    return -P * P * math.log(P) - 2 * integral


class TestClosedForm:
    @pytest.mark.parametrize("p", GRID_P)
    @pytest.mark.parametrize("lam", GRID_L)
    def test_quadrature_matches_closed_form(self, p, lam):
        m = two_state_model(p, lam)
        q = sigma2_final(m.oracle, INDICATOR_F, 1.0)
        c = sigma2_two_state(p, lam)
        assert abs(q - c) <= 1e-6 * max(abs(c), 1e-12)
        assert c == pytest.approx(independent_sigma2(p, lam), rel=1e-8)

    def test_reference_value(self):
        assert sigma2_two_state(0.5, LN4) == pytest.approx(0.2347265, abs=1e-7)

    def test_horizon_scaling(self):
        assert sigma2_two_state(0.4, 2.0, T=0.5) == pytest.approx(sigma2_two_state(0.4, 1.0, T=1.0), rel=1e-14)

    def test_domain(self):
        with pytest.raises(DomainError):
            sigma2_two_state(1.0, 1.0)
        with pytest.raises(DomainError):
            variance_bounds(0.0)


class TestBounds:
    @pytest.mark.parametrize(
        "model",
        [two_state_model(0.5, LN4), two_state_model(0.05, 3.0), constant_rate_model(0.8),
         finite_state_model([0.2, 0.3, 0.5], [0.0, 1.0, 4.0])],
        ids=["two_state", "two_state_small_p", "constant_rate", "three_state"],
    )
    def test_within_bounds(self, model):
        rep = variance_report(model.oracle, INDICATOR_F, 1.0)
        assert rep.bounds_apply
        assert rep.lower_bound - 1e-12 <= rep.sigma2_final <= rep.upper_bound + 1e-12

    def test_constant_rate_attains_lower_bound(self):
        o = constant_rate_model(1.7).oracle
        lo, _ = variance_bounds(o.survival(1.0))
        assert sigma2_final(o, INDICATOR_F, 1.0) == pytest.approx(lo, rel=1e-12)
        assert lo == pytest.approx(1.7 * math.exp(-3.4), rel=1e-14)

    def test_near_upper_bound(self):
        # fast killing of the second state: the variance sits just below the upper bound
        p, lam = 0.5, 8.0
        s = sigma2_two_state(p, lam)
        _, hi = variance_bounds(p + (1 - p) * math.exp(-lam))
        assert s == pytest.approx(0.32651355, abs=1e-8)
        assert hi == pytest.approx(0.32668077, abs=1e-8)
        assert 0 < (hi - s) / hi < 1e-3

    def test_vanishing_killing(self):
        vals = [sigma2_two_state(0.5, lam) for lam in (1e-1, 1e-2, 1e-3, 1e-4)]
        assert np.all(np.diff(vals) < 0) and vals[-1] < 1e-4


class TestHomogeneity:
    def test_quadratic_scaling(self):
        o = two_state_model(0.5, LN4).oracle
        phi = indicator_state(0)
        assert sigma2_final(o, phi.scaled(3.0), 1.0) == pytest.approx(9 * sigma2_final(o, phi, 1.0), rel=1e-10)
        assert sigma2_path(o, phi.scaled(3.0), 0.6, 1.0) == pytest.approx(9 * sigma2_path(o, phi, 0.6, 1.0), rel=1e-10)


class TestPath:
    @pytest.mark.parametrize("model", [two_state_model(0.5, LN4), two_state_model(0.2, 5.0), constant_rate_model(1.0)])
    def test_path_endpoint_equals_final(self, model):
        for phi in (INDICATOR_F, indicator_state(0)):
            a = sigma2_path(model.oracle, phi, 1.0, 1.0)
            b = sigma2_final(model.oracle, phi, 1.0)
            assert a == pytest.approx(b, rel=1e-6, abs=1e-12)

    def test_path_start(self):
        o = two_state_model(0.5, LN4).oracle
        assert sigma2_path(o, INDICATOR_F, 0.0, 1.0) == pytest.approx(0.140625, abs=1e-14)

    def test_curve_monotone(self):
        o = two_state_model(0.5, LN4).oracle
        ts, vals = sigma2_path_curve(o, INDICATOR_F, 1.0, grid_points=33)
        assert len(ts) == 33 and ts[0] == 0.0 and ts[-1] == 1.0
        assert np.all(np.diff(vals) >= -1e-14)
        assert vals[-1] == pytest.approx(sigma2_two_state(0.5, LN4), rel=1e-6)

    def test_path_domain(self):
        o = two_state_model(0.5, LN4).oracle
        with pytest.raises(DomainError):
            sigma2_path(o, INDICATOR_F, 1.5, 1.0)
        with pytest.raises(OracleMissing):
            sigma2_final(ruin_pdmp_model(1.0, 1.0).oracle, INDICATOR_F, 1.0)


class TestQuadrature:
    def test_polynomial_exact(self):
        assert integrate(lambda t: t**3, 0.0, 2.0) == pytest.approx(4.0, rel=1e-14)

    def test_not_converged(self):
        quad = QuadratureSettings(intervals=8, rel_tol=1e-15, abs_tol=0.0, max_doublings=1)
        with pytest.raises(QuadratureNotConverged):
            integrate(lambda t: math.sqrt(t), 0.0, 1.0, quad)

    def test_settings_validated(self):
        with pytest.raises(DomainError):
            QuadratureSettings(intervals=7)


class TestExactLaw:
    def test_probabilities(self):
        law = ptn_exact_law(100, 1.0, 1.0)
        assert math.fsum(law.probs) + law.tail_mass == pytest.approx(1.0, abs=1e-14)
        assert law.tail_mass < 1e-15
        assert law.numeric_mean == pytest.approx(math.exp(-1.0), rel=1e-12)
        assert law.numeric_variance == pytest.approx(law.variance, rel=1e-9)
        assert 100 * law.variance == pytest.approx(0.136014, abs=1e-6)

    def test_large_n_limit(self):
        lam, T = 1.0, 1.0
        law = ptn_exact_law(10**6, lam, T)
        sigma2 = sigma2_final(constant_rate_model(lam).oracle, INDICATOR_F, T)
        assert law.N * law.variance == pytest.approx(sigma2, rel=1e-5)
        assert law.N * law.numeric_variance == pytest.approx(sigma2, rel=1e-5)

    def test_no_killing(self):
        law = ptn_exact_law(10, 0.0, 1.0)
        assert law.mean == 1.0 and law.variance == 0.0 and law.probs.tolist() == [1.0]

    def test_domain(self):
        with pytest.raises(DomainError):
            ptn_exact_law(1, 1.0, 1.0)
