from dataclasses import replace

import numpy as np
import pytest

from acedlnm import dual as dl
from acedlnm.fit import FitOptions, Fitter, LevelResult, fit_fixed_weights, starting_values
from acedlnm.model import DataSet, ModelSpec, PreparedModel, SmoothTerm, discrete_weights
from acedlnm.nbinom import nb_logpmf
from acedlnm.reparam import phi_to_alpha, weight_integrals
from acedlnm.simulate import ScenarioSpec, scenario_truth, simulate_dataset, true_response, true_weight
from acedlnm.inference import fitted_exposure

from conftest import SMALL_SPEC

TIGHT = FitOptions(tol_inner=1e-10, tol_middle=1e-9, record=False)


def random_point(model, rng, u_hat, scale=0.05):
    u = u_hat + scale * rng.standard_normal(model.n_u)
    rho = np.r_[rng.uniform(0, 8, len(model.penalties)), rng.uniform(0.5, 3)]
    return u, rho


def naive_penalized_loglik(model, u, rho):
    """Per-observation sum with explicit penalty quadratic forms."""
    phi, af, beta = model.split(u)
    a = phi_to_alpha(phi, model.C).alpha_w_plus
    E = model.Dp @ a
    eta = model.f_basis.design(E) @ af + model.Xh @ beta
    theta = np.exp(rho[-1])
    total = sum(float(nb_logpmf(y, np.exp(e), theta)) for y, e in zip(model.y, eta))
    lam = np.exp(rho[:-1])
    total -= 0.5 * lam[0] * a @ model.Sw_plus @ a
    total -= 0.5 * lam[1] * af @ model.penalties[1].matrix @ af
    for p, lh in zip(model.penalties[2:], lam[2:]):
        b = u[p.index]
        total -= 0.5 * lh * b @ p.matrix @ b
    return total


def profile_value(fitter, u, rho, phi):
    start = u.copy()
    start[fitter.model.phi_slice] = phi
    return fitter.inner(start, rho).value


def laml_at(model, rho, u_start):
    f = Fitter(model, TIGHT)
    res = f.middle(u_start, rho)
    assert res.converged
    u_hat, _ = f.polish(res.u, rho, res.value)
    return f.laml_value(u_hat, rho), f.laml_gradient(u_hat, rho), u_hat


class TestPenalizedLoglik:
    def test_matches_naive(self, small_model, small_fit, rng):
        for _ in range(3):
            u, rho = random_point(small_model, rng, small_fit.u_hat)
            got = float(small_model.evaluate(u, rho, 0)["value"])
            np.testing.assert_allclose(got, naive_penalized_loglik(small_model, u, rho), rtol=1e-10)

    def test_no_penalty_is_loglik(self, small_model, small_fit):
        rho = np.r_[np.full(len(small_model.penalties), -np.inf), np.log(6.0)]
        got = float(small_model.evaluate(small_fit.u_hat, rho, 0)["value"])
        np.testing.assert_allclose(got, small_model.loglik(small_fit.u_hat, 6.0), rtol=1e-13)

    def test_null_space_is_free(self, small_model, small_fit):
        u = small_fit.u_hat.copy()
        rho = small_fit.rho_hat
        base = float(small_model.evaluate(u, rho, 0)["value"])
        ll_base = small_model.loglik(u, np.exp(rho[-1]))
        # adding a constant to alpha_f shifts eta only; the f-penalty is unchanged
        u[small_model.f_slice] += 0.3
        shifted = float(small_model.evaluate(u, rho, 0)["value"])
        ll_shifted = small_model.loglik(u, np.exp(rho[-1]))
        np.testing.assert_allclose(shifted - base, ll_shifted - ll_base, rtol=1e-10)

    def test_gradient_and_hessian_against_differences(self, small_model, small_fit, rng):
        m = small_model
        for _ in range(3):
            u, rho = random_point(m, rng, small_fit.u_hat)
            r = m.evaluate(u, rho, 2)
            h = 1e-6
            fd_g = np.array([(m.evaluate(u + h * e, rho, 0)["value"] - m.evaluate(u - h * e, rho, 0)["value"])
                             / (2 * h) for e in np.eye(m.n_u)])
            np.testing.assert_allclose(r["grad"], fd_g, rtol=1e-5, atol=1e-5 * np.abs(r["grad"]).max())
            h = 1e-5
            fd_h = np.column_stack([(m.evaluate(u + h * e, rho, 1)["grad"] - m.evaluate(u - h * e, rho, 1)["grad"])
                                    / (2 * h) for e in np.eye(m.n_u)])
            np.testing.assert_allclose(r["hess"], fd_h, rtol=1e-4, atol=1e-4 * np.abs(r["hess"]).max())

    def test_zero_response_coefficients_remove_weight_signal(self, small_model, small_fit):
        m = small_model
        u = small_fit.u_hat.copy()
        u[m.f_slice] = 0.0
        rho = np.r_[-np.inf, small_fit.rho_hat[1:]]
        g = m.evaluate(u, rho, 1)["grad"]
        assert np.all(g[m.phi_slice] == 0)

    def test_linear_in_response_coefficients(self, small_model, small_fit, rng):
        m = small_model
        u1, u2 = small_fit.u_hat.copy(), small_fit.u_hat.copy()
        u2[m.f_slice] = rng.standard_normal(m.n_f)
        both = u1.copy()
        both[m.f_slice] += u2[m.f_slice]
        u2[m.beta_slice] = 0.0
        np.testing.assert_allclose(m.linear_predictor(both), m.linear_predictor(u1) + m.linear_predictor(u2),
                                   rtol=1e-12, atol=1e-12)


class FakeQuadratic:
    """Concave quadratic in the gamma block, exposed through the model interface."""
    n_phi, free_w = 0, False

    def __init__(self, A, b):
        self.A, self.b = A, b
        self.gamma_slice = slice(0, len(b))

    def evaluate(self, u, rho, order=2, gamma_only=False):
        return {"value": -0.5 * u @ self.A @ u + self.b @ u, "grad": self.b - self.A @ u, "hess": -self.A}


class TestInnerNewton:
    def test_quadratic_converges_in_one_step(self, rng):
        B = rng.standard_normal((6, 6))
        model = FakeQuadratic(B @ B.T + np.eye(6), rng.standard_normal(6))
        f = Fitter(model, FitOptions())
        res = f.inner(np.zeros(6), np.zeros(1))
        assert res.converged
        assert len(f.traces.inner[0]) == 2
        np.testing.assert_allclose(res.u, np.linalg.solve(model.A, model.b), rtol=1e-10)

    def test_stationary_and_monotone(self, small_model, small_fit):
        f = Fitter(small_model, FitOptions())
        u0 = small_model.initial_u()
        u0[small_model.phi_slice] = small_fit.phi
        res = f.inner(u0, small_fit.rho_hat)
        assert res.converged
        g = small_model.evaluate(res.u, small_fit.rho_hat, 1, gamma_only=True)["grad"]
        assert np.linalg.norm(g) < 1e-7 or res.message == "stationary to rounding"
        assert np.all(np.diff(f.traces.inner[0]) >= 0)


class TestProfile:
    def test_gradient_and_hessian_against_profile_differences(self, small_model, small_fit, rng):
        m = small_model
        f = Fitter(m, TIGHT)
        rho = small_fit.rho_hat
        phi0 = small_fit.phi + 0.05 * rng.standard_normal(m.n_phi)
        start = small_fit.u_hat.copy()
        start[m.phi_slice] = phi0
        inner = f.inner(start, rho)
        g, HQ, _ = f._profile(m.evaluate(inner.u, rho, 2))
        h = 1e-5
        fd = np.array([(profile_value(f, inner.u, rho, phi0 + h * e) - profile_value(f, inner.u, rho, phi0 - h * e))
                       / (2 * h) for e in np.eye(m.n_phi)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.abs(g).max())
        np.testing.assert_allclose(HQ, HQ.T, atol=1e-8 * np.abs(HQ).max())

        def profile_grad(phi):
            s = inner.u.copy()
            s[m.phi_slice] = phi
            res = f.inner(s, rho)
            return f._profile(m.evaluate(res.u, rho, 2))[0]

        h = 1e-4
        fd_h = np.column_stack([(profile_grad(phi0 + h * e) - profile_grad(phi0 - h * e)) / (2 * h)
                                for e in np.eye(m.n_phi)])
        np.testing.assert_allclose(HQ, fd_h, rtol=1e-4, atol=1e-4 * np.abs(HQ).max())

    def test_schur_complement_identity(self, small_model, small_fit):
        m = small_model
        f = Fitter(m, TIGHT)
        r = m.evaluate(small_fit.u_hat, small_fit.rho_hat, 2)
        H = r["hess"]
        ps, gs = m.phi_slice, m.gamma_slice
        schur = H[ps, ps] - H[ps, gs] @ np.linalg.solve(H[gs, gs], H[gs, ps])
        np.testing.assert_allclose(f._profile(r)[1], schur, rtol=1e-8, atol=1e-8 * np.abs(schur).max())


class TestMiddleNewton:
    def test_monotone_and_stationary(self, small_model, small_fit):
        f = Fitter(small_model, FitOptions())
        res = f.middle(small_model.initial_u(), small_fit.rho_hat)
        assert res.converged
        assert all(np.all(np.diff(t) >= 0) for t in f.traces.middle)
        r = small_model.evaluate(res.u, small_fit.rho_hat, 2)
        g = f._profile(r)[0]
        assert np.linalg.norm(g) < 1e-6 or res.message == "stationary to rounding"

    def test_range_guard_forces_halving(self, small_data, small_fit, monkeypatch):
        model = PreparedModel(SMALL_SPEC, small_data)
        calls = []
        original = model.range_covers

        def guarded(phi, min_knots=4):
            calls.append(min_knots)
            return len(calls) > 1 and original(phi, min_knots)

        monkeypatch.setattr(model, "range_covers", guarded)
        f = Fitter(model, FitOptions())
        # one rejected candidate, then halved steps proceed
        res = f.middle(model.initial_u(), small_fit.rho_hat)
        assert res.converged and len(calls) > 2

    def test_guard_never_loses_coverage(self, small_model, small_fit):
        f = Fitter(small_model, FitOptions(min_f_knots=4))
        start = small_model.initial_u()
        before = small_model.knots_covered(start[small_model.phi_slice])
        res = f.middle(start, small_fit.rho_hat)
        assert small_model.knots_covered(res.u[small_model.phi_slice]) >= min(4, before)

    def test_weight_recovery_at_fixed_hyperparameters(self):
        sc = ScenarioSpec(n=1000, n_rep=1)
        truth = scenario_truth(sc)
        data = simulate_dataset(truth, 8.0, np.random.default_rng(77))
        spec = ModelSpec(max_lag=15.0, smooth=(SmoothTerm("time", 10),))
        model = PreparedModel(spec, data)
        rho = np.r_[4.0, 6.0, 10.0, np.log(8.0)]
        res = Fitter(model, FitOptions()).middle(model.initial_u(), rho)
        assert res.converged
        grid = np.linspace(0, 15, 100)
        a = phi_to_alpha(res.u[model.phi_slice], model.C).alpha_w_plus
        w_hat = model.stz.design(grid) @ a
        assert np.sqrt(np.mean((w_hat - true_weight("i", grid)) ** 2)) < 0.05


class TestLaml:
    def test_matches_dense_eigen_path(self, small_model, small_fit):
        m = small_model
        rho = small_fit.rho_hat
        u = small_fit.u_hat
        r = m.evaluate(u, rho, 2)
        logdet_h = np.sum(np.log(np.linalg.eigvalsh(-r["hess"])))
        pen = 0.0
        for p, lr in zip(m.penalties, rho[:-1]):
            ev = np.linalg.eigvalsh(np.exp(lr) * p.matrix)
            pen += np.sum(np.log(ev[ev > 1e-10 * ev.max()]))
        naive = float(r["value"]) - 0.5 * logdet_h + 0.5 * pen
        np.testing.assert_allclose(Fitter(m).laml_value(u, rho), naive, rtol=1e-8)

    def test_logdet_slope_for_huge_smoothing(self, small_model, small_fit):
        m = small_model
        fitter = Fitter(m)
        u = small_fit.u_hat
        j = m.penalty_names().index("f")
        vals = []
        for lr in (28.0, 29.0, 30.0):
            rho = small_fit.rho_hat.copy()
            rho[j] = lr
            vals.append(fitter.neg_hessian_logdet(u, rho))
        # range directions grow with lambda, null directions keep their data curvature
        np.testing.assert_allclose(np.diff(vals), m.penalties[j].rank, atol=1e-6)

    def test_penalty_rank_and_logdet_slope(self, small_model):
        m = small_model
        pf = m.penalties[1]
        assert pf.rank == m.n_f - 2
        rho = np.zeros(m.n_rho)
        e = np.zeros(m.n_rho)
        e[1] = 1.0
        np.testing.assert_allclose(0.5 * (m.penalty_logdet(rho + e) - m.penalty_logdet(rho)), pf.rank / 2)

    def test_gradient_against_differences(self, small_model, small_fit):
        m = small_model
        rho = small_fit.rho_hat + np.array([0.7, -0.5, 0.4, 0.2])
        _, grad, u_hat = laml_at(m, rho, small_fit.u_hat)
        h = 1e-3
        fd = np.array([(laml_at(m, rho + h * e, u_hat)[0] - laml_at(m, rho - h * e, u_hat)[0]) / (2 * h)
                       for e in np.eye(m.n_rho)])
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-4 * np.abs(grad).max())

    def test_gradient_by_differences_option(self, small_model, small_fit):
        m = small_model
        rho = small_fit.rho_hat + 0.3
        f = Fitter(m, TIGHT)
        res = f.middle(small_fit.u_hat, rho)
        exact = f.laml_gradient(res.u, rho)
        fd = Fitter(m, replace(TIGHT, logdet_by_differences=True)).laml_gradient(res.u, rho)
        np.testing.assert_allclose(exact, fd, rtol=1e-5, atol=1e-6)

    def test_response_smoothing_gradient_sign(self, small_model, small_fit):
        rho = small_fit.rho_hat.copy()
        rho[1] = rho[1] - 8.0
        assert laml_at(small_model, rho, small_fit.u_hat)[1][1] > 0

    def test_dispersion_gradient_vanishes_for_poisson_data(self, small_truth):
        data = simulate_dataset(small_truth, 1e8, np.random.default_rng(5))
        model = PreparedModel(SMALL_SPEC, data)
        rho = np.r_[4.0, 6.0, 10.0, np.log(1e8)]
        value, grad, _ = laml_at(model, rho, model.initial_u())
        assert abs(grad[-1]) < 1e-3


class TestOuter:
    def test_result(self, small_fit):
        assert small_fit.converged
        assert np.max(np.abs(small_fit.laml_grad)) < 1e-4
        assert np.all(np.diff(small_fit.traces.outer) >= -1e-9 * np.abs(small_fit.traces.outer).max())
        assert np.all(np.linalg.eigvalsh(small_fit.neg_hessian) > 0)
        assert small_fit.edf > 0
        np.testing.assert_allclose(small_fit.aic, -2 * small_fit.loglik + 2 * (small_fit.edf + 1))

    def test_one_sided_stationarity(self, small_model):
        f = Fitter(small_model)

        def negated(laml_grad):
            return lambda x: (0.0, -laml_grad(x))

        def kink(x):
            # maximum of -|x0| + 0.5 x0 - x1^2 at the origin, a corner in x0
            return np.array([-np.sign(x[0]) + 0.5 if x[0] != 0 else 0.5, -2 * x[1]])

        assert f._one_sided_stationary(negated(kink), np.zeros(2))
        assert not f._one_sided_stationary(negated(kink), np.array([0.0, 1e-3]))
        assert not f._one_sided_stationary(negated(lambda x: np.array([2e-4, 0.0])), np.zeros(2))
        # steep curvature does not hide a nonzero smooth slope
        assert not f._one_sided_stationary(negated(lambda x: np.array([1e-3 - 500 * x[0]])), np.zeros(1))

    def test_constraints_hold_along_the_path(self, small_fit):
        assert small_fit.traces.constraints
        for sq, integral in small_fit.traces.constraints:
            assert abs(sq - 1) < 1e-9 and integral > 0

    def test_starting_values(self, small_data, small_model):
        rho0, u0 = starting_values(SMALL_SPEC, small_data, small_model)
        gam = fit_fixed_weights(SMALL_SPEC, small_data, "lag0")
        assert rho0[0] == 6.0
        np.testing.assert_allclose(rho0[1:], gam.rho_hat)
        np.testing.assert_allclose(u0[small_model.beta_slice], gam.beta)

    def test_deterministic(self, small_data, small_fit):
        from acedlnm.fit import fit
        again = fit(SMALL_SPEC, small_data, FitOptions())
        np.testing.assert_array_equal(again.u_hat, small_fit.u_hat)
        np.testing.assert_array_equal(again.rho_hat, small_fit.rho_hat)


class TestFixedWeights:
    def test_lag0_exposure_is_the_series(self, small_data):
        model = PreparedModel(SMALL_SPEC, small_data, fixed_weights="lag0")
        np.testing.assert_array_equal(model.E_fixed, small_data.x[model.rows])
        assert model.n_phi == 0

    def test_window_weights(self):
        w = discrete_weights("avg0-7")
        np.testing.assert_allclose(w, np.full(8, 1 / np.sqrt(8)))
        np.testing.assert_allclose(discrete_weights([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            discrete_weights("avg5-2")
        with pytest.raises(ValueError):
            discrete_weights([-1.0, 0.0])

    def test_correct_window_beats_same_day(self):
        sc = ScenarioSpec(w_kind="avg0-7", n=2000, n_rep=1)
        truth = scenario_truth(sc)
        data = simulate_dataset(truth, 8.0, np.random.default_rng(3))
        spec = ModelSpec(max_lag=15.0, smooth=(SmoothTerm("time", 10),))
        target = true_response("i", truth.E) + truth.h_shift
        rmse = {}
        for window in ("lag0", "avg0-7"):
            res = fit_fixed_weights(spec, data, window)
            assert res.converged
            if window == "lag0":
                # the misspecified exposure drives the response smoothing to its limit
                assert res.laml_grad[0] == 0.0
            fitted = res.model.f_basis.design(fitted_exposure(res)) @ res.alpha_f
            rmse[window] = np.sqrt(np.mean((fitted - target) ** 2))
        assert rmse["avg0-7"] < rmse["lag0"]
        assert rmse["avg0-7"] < 0.15

    def test_window_longer_than_lag_rejected(self, small_data):
        with pytest.raises(ValueError):
            PreparedModel(SMALL_SPEC, small_data, fixed_weights="avg0-20")


class TestModelValidation:
    def test_bad_inputs(self, small_data):
        with pytest.raises(ValueError):
            ModelSpec(max_lag=0)
        with pytest.raises(KeyError):
            PreparedModel(ModelSpec(smooth=("nope",)), small_data)
        bad = DataSet(small_data.times, np.r_[-1.0, small_data.y[1:]] * 0 - 1, small_data.x)
        with pytest.raises(ValueError):
            PreparedModel(SMALL_SPEC, bad)
        with pytest.raises(ValueError):
            PreparedModel(ModelSpec(max_lag=1000.0), small_data)

    def test_level_result_fields(self):
        r = LevelResult(np.zeros(2), 1.0, True, 3, "ok")
        assert r.converged and r.n_iter == 3

    def test_weight_integrals_of_fit(self, small_fit):
        m = small_fit.model
        sq, integral = weight_integrals(m.stz, small_fit.alpha_w_plus())
        assert abs(sq - 1) < 1e-9 and integral > 0
        assert dl.value(m.exposure_values(small_fit.phi)).shape == (len(m.rows),)
