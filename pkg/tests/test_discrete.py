import math

import numpy as np
import pytest

from fvlab.discrete import (
    TimeMesh,
    mesh_from_survival,
    run_discrete,
    sigma_tilde,
    sigma_tilde_terms,
    uniform_mesh,
)
from fvlab.errors import DomainError, NotStrictlyDecreasing, OracleMissing
from fvlab.estimators import INDICATOR_F, gamma_hat, indicator_state, replicate
from fvlab.models import constant_rate_model, finite_state_model, ou_diffusion_model, ruin_pdmp_model, two_state_model
from fvlab.rng import stream
from fvlab.variance import sigma2_final

from conftest import LN4, within_se

# frozen regression value of the first interior time for n = 2 (two-state, p = 1/2, lambda = ln 4)
T1_N2 = 0.3915226200615507


class TestMesh:
    def test_two_state_midpoint(self):
        o = two_state_model(0.5, LN4).oracle
        mesh = mesh_from_survival(o, 2, 1.0)
        assert mesh.times[1] == pytest.approx(T1_N2, abs=1e-12)
        assert o.survival(mesh.times[1]) == pytest.approx(math.sqrt(0.625), abs=1e-12)

    def test_constant_rate_is_uniform(self):
        mesh = mesh_from_survival(constant_rate_model(1.3).oracle, 4, 1.0)
        np.testing.assert_allclose(mesh.times, [0, 0.25, 0.5, 0.75, 1.0], atol=1e-12)

    def test_equal_ratios(self):
        o = two_state_model(0.3, 2.0).oracle
        mesh = mesh_from_survival(o, 7, 2.0)
        p = np.array([o.survival(t) for t in mesh.times])
        np.testing.assert_allclose(p[1:] / p[:-1], (p[-1]) ** (1 / 7), rtol=1e-10)

    def test_flat_survival_rejected(self):
        with pytest.raises(NotStrictlyDecreasing):
            mesh_from_survival(constant_rate_model(0.0).oracle, 3, 1.0)
        with pytest.raises(OracleMissing):
            mesh_from_survival(None, 3, 1.0)
        with pytest.raises(DomainError):
            mesh_from_survival(constant_rate_model(1.0).oracle, 0, 1.0)

    def test_validation(self):
        for bad in [(0.0,), (0.1, 1.0), (0.0, 0.5, 0.5)]:
            with pytest.raises(DomainError):
                TimeMesh(bad)
        m = uniform_mesh(2.0, 4)
        assert m.n == 4 and m.T == 2.0


class TestSigmaTilde:
    def test_single_level_without_killing_is_iid_variance(self):
        m = finite_state_model([0.3, 0.7], [0.0, 0.0])
        mesh = TimeMesh((0.0, 1.0))
        assert sigma_tilde(m.oracle, indicator_state(0), mesh) == pytest.approx(0.21, abs=1e-14)
        assert sigma_tilde(m.oracle, INDICATOR_F, mesh) == pytest.approx(0.0, abs=1e-14)

    def test_single_level_hand_computation(self):
        # one level: V_{eta_0}(Q^T 1) + r(1 - r) - r V_{eta_0}(Q^T 1) with r = p_T; the first and
        # last terms do not cancel, a gap of order 1 - r that vanishes as the mesh is refined
        o = two_state_model(0.5, LN4).oracle
        v0, r = 0.140625, 0.625
        expected = v0 + r * (1 - r) - r * v0
        assert sigma_tilde(o, INDICATOR_F, TimeMesh((0.0, 1.0))) == pytest.approx(expected, abs=1e-14)
        assert expected == 0.287109375

    def test_homogeneity(self):
        o = two_state_model(0.5, LN4).oracle
        mesh = mesh_from_survival(o, 10, 1.0)
        phi = indicator_state(0)
        for a in (2.0, 3.0):
            assert sigma_tilde(o, phi.scaled(a), mesh) == pytest.approx(a * a * sigma_tilde(o, phi, mesh), rel=1e-12)

    def test_reference_values(self):
        o = two_state_model(0.5, LN4).oracle
        ref = {5: 0.243770, 20: 0.236910, 50: 0.235594, 80: 0.235267, 320: 0.234861}
        for n, v in ref.items():
            assert sigma_tilde(o, INDICATOR_F, mesh_from_survival(o, n, 1.0)) == pytest.approx(v, abs=1e-6)

    @pytest.mark.parametrize("model", [two_state_model(0.5, LN4), constant_rate_model(1.0)], ids=["two_state", "constant_rate"])
    def test_converges_monotonically(self, model):
        o = model.oracle
        target = sigma2_final(o, INDICATOR_F, 1.0)
        vals = [sigma_tilde(o, INDICATOR_F, mesh_from_survival(o, n, 1.0)) for n in (5, 20, 80, 320)]
        assert np.all(np.diff(vals) < 0) and vals[-1] > target
        gaps = np.array(vals) - target
        # the excess shrinks like 1/n
        assert np.all(gaps[1:] / gaps[:-1] < 0.3)
        assert gaps[-1] / target < 1e-2

    def test_terms(self):
        o = two_state_model(0.5, LN4).oracle
        a, b = sigma_tilde_terms(o, INDICATOR_F, uniform_mesh(1.0, 3))
        assert a > b > 0
        with pytest.raises(OracleMissing):
            sigma_tilde_terms(None, INDICATOR_F, uniform_mesh(1.0, 3))


class TestRunDiscrete:
    def test_unbiased_constant_rate(self):
        m = constant_rate_model(1.0)
        mesh = mesh_from_survival(m.oracle, 5, 1.0)
        ps = [run_discrete(m, 50, mesh, rng=stream(1, i)).p_hat for i in range(4000)]
        assert within_se(ps, math.exp(-1.0))

    def test_constant_rate_reference_case(self):
        m = constant_rate_model(1.0)
        s = replicate(m, 1000, 1.0, 5000, seed=21, method="discrete", mesh=mesh_from_survival(m.oracle, 20, 1.0), threads=1)
        assert s.extinctions == 0
        assert abs(s.p.mean - math.exp(-1.0)) <= 3 * s.p.se

    def test_single_level_is_crude(self):
        m = two_state_model(0.5, LN4)
        ps = np.array([run_discrete(m, 100, TimeMesh((0.0, 1.0)), rng=stream(2, i)).p_hat for i in range(4000)])
        assert within_se(ps, 0.625)
        assert abs(ps.var(ddof=1) / (0.625 * 0.375 / 100) - 1) < 3 * math.sqrt(2 / 4000)

    def test_equals_crude_without_killing(self):
        from fvlab.engine import run_crude_mc

        m = finite_state_model([0.3, 0.7], [0.0, 0.0])
        mesh = TimeMesh((0.0, 1.0))
        for i in range(20):
            d = run_discrete(m, 40, mesh, rng=stream(8, i))
            c = run_crude_mc(m, 40, 1.0, rng=stream(8, i))
            assert d.p_hat == c.p_hat == 1.0
            np.testing.assert_array_equal(d.states, c.states)

    def test_no_killing(self):
        m = finite_state_model([0.5, 0.5], [0.0, 0.0])
        r = run_discrete(m, 20, uniform_mesh(1.0, 4), rng=stream(0, 0))
        assert r.p_hat == 1.0 and r.n_alive == 20 and not r.failed

    def test_gamma_of_one_is_estimator(self):
        m = two_state_model(0.5, LN4)
        mesh = uniform_mesh(1.0, 8)
        for i in range(50):
            r = run_discrete(m, 30, mesh, rng=stream(3, i))
            assert gamma_hat(r, INDICATOR_F) == r.p_hat
            assert r.estimator == pytest.approx(float(np.prod(r.fractions)))

    def test_extinction(self):
        r = run_discrete(constant_rate_model(30.0), 3, uniform_mesh(1.0, 2), rng=stream(0, 0))
        assert r.failed and r.extinct_level == 1 and r.p_hat == 0.0
        assert r.failure == "extinction at level 1"

    def test_kernel_matches_generic_in_law(self):
        m = two_state_model(0.5, LN4)
        mesh = uniform_mesh(1.0, 5)
        a = [run_discrete(m, 40, mesh, rng=stream(4, i)).p_hat for i in range(600)]
        b = [run_discrete(m, 40, mesh, rng=stream(5, i), use_kernel=False).p_hat for i in range(600)]
        se = math.sqrt(np.var(a, ddof=1) / 600 + np.var(b, ddof=1) / 600)
        assert abs(np.mean(a) - np.mean(b)) <= 3 * se

    def test_scaled_variance_matches_sigma_tilde(self):
        m = two_state_model(0.5, LN4)
        mesh = mesh_from_survival(m.oracle, 5, 1.0)
        s = replicate(m, 200, 1.0, 4000, seed=6, method="discrete", mesh=mesh, threads=1)
        target = sigma_tilde(m.oracle, INDICATOR_F, mesh)
        assert abs(s.scaled_variance() / target - 1) < 0.1
        assert s.extinctions == 0

    def test_pdmp_and_diffusion(self):
        r = run_discrete(ruin_pdmp_model(1.0, 1.0, 1.0), 50, uniform_mesh(1.0, 4), rng=stream(0, 0))
        assert 0 < r.p_hat <= 1 and np.all(r.states >= 0)
        d = ou_diffusion_model(dt=0.01)
        r = run_discrete(d, 50, uniform_mesh(1.0, 4), rng=stream(0, 1))
        assert r.states.shape[1] == 1
        with pytest.raises(DomainError):
            run_discrete(d, 50, TimeMesh((0.0, 0.333, 1.0)), rng=stream(0, 2))

    def test_needs_two_particles(self):
        with pytest.raises(ValueError):
            run_discrete(constant_rate_model(1.0), 1, uniform_mesh(1.0, 2))
