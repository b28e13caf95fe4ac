"""
Unit tests for the penalized solvers, lambda selection and scalar root finding.

Run with: pytest plm_tools/tests/test_optim.py -v
"""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plm_tools.data import FoldAssignment, make_folds
from plm_tools.exceptions import (
    DegenerateFoldWarning,
    ExponentGuardWarning,
    RootFindingError,
    SolverError,
)
from plm_tools.optim import (
    EXPONENT_CAP,
    PenalizedProblem,
    cv_losses,
    cv_select_lambda,
    default_lambda_grid,
    kkt_violations,
    loss_terms,
    soft_threshold,
    solve_penalized,
    solve_scalar_root,
)


def _logistic_problem(n=200, p=10, seed=0, lam=0.02):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
    eta = 0.5 + x[:, 1] - 0.8 * x[:, 2]
    y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    mask = np.r_[False, np.ones(p, dtype=bool)]
    return PenalizedProblem("logistic", x, y, lam=lam, penalty_mask=mask)


class TestLossTerms:
    """Per-sample losses and their derivatives"""

    @pytest.mark.parametrize("kind,link", [
        ("squared", "identity"),
        ("logistic", "identity"),
        ("weighted-link-integral", "identity"),
        ("weighted-link-integral", "expit"),
        ("calibration-exponential", "identity"),
    ])
    def test_derivatives_match_finite_differences(self, kind, link):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        u = np.array([-1.3, -0.2, 0.4, 2.1])
        h = 1e-6
        loss, d1, d2, _ = loss_terms(kind, y, u, link)
        up, d1_up, _, _ = loss_terms(kind, y, u + h, link)
        down, d1_down, _, _ = loss_terms(kind, y, u - h, link)
        np.testing.assert_allclose(d1, (up - down) / (2 * h), atol=1e-6)
        np.testing.assert_allclose(d2, (d1_up - d1_down) / (2 * h), atol=1e-6)

    def test_exponent_guard_counts_capped_samples(self):
        _, d1, _, guard = loss_terms("calibration-exponential", np.array([1.0, 1.0, 0.0]),
                                     np.array([-40.0, 0.0, -50.0]))
        assert guard == 2
        assert d1[0] == pytest.approx(-np.exp(EXPONENT_CAP))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="Unknown loss"):
            loss_terms("hinge", np.zeros(2), np.zeros(2))


class TestPenalizedProblem:
    """Problem validation"""

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError, match="nonnegative"):
            PenalizedProblem("squared", np.ones((3, 1)), np.zeros(3), weights=[1.0, -1.0, 1.0])

    def test_rejects_non_binary_calibration_response(self):
        with pytest.raises(ValueError, match="binary"):
            PenalizedProblem("calibration-exponential", np.ones((2, 1)), [0.0, 0.5])

    def test_rejects_negative_lambda(self):
        with pytest.raises(ValueError, match="lambda"):
            PenalizedProblem("squared", np.ones((2, 1)), [0.0, 1.0], lam=-0.1)


class TestSolvePenalized:
    """Coordinate descent solutions and their certificates"""

    @settings(max_examples=30, deadline=None)
    @given(lam=st.floats(min_value=0.0, max_value=1.5), seed=st.integers(0, 1000))
    def test_single_predictor_soft_threshold(self, lam, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=60)
        x = (x - x.mean()) / x.std()
        y = 0.7 * x + rng.normal(size=60)
        rho = x @ y / 60
        sol = solve_penalized(PenalizedProblem("squared", x, y, lam=lam))
        assert sol.coef[0] == pytest.approx(float(soft_threshold(rho, lam)), abs=1e-8)

    def test_soft_threshold_values(self):
        np.testing.assert_array_equal(soft_threshold(np.array([-2.0, -0.5, 0.5, 3.0]), 1.0),
                                      [-1.0, 0.0, 0.0, 2.0])

    def test_lambda_max_zeroes_penalized_coefficients(self):
        rng = np.random.default_rng(2)
        n, p = 80, 6
        x = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
        y = x[:, 1] + rng.normal(size=n)
        lam_max = np.max(np.abs(x[:, 1:].T @ (y - y.mean()) / n))
        mask = np.r_[False, np.ones(p, dtype=bool)]
        sol = solve_penalized(PenalizedProblem("squared", x, y, lam=lam_max * 1.0001,
                                               penalty_mask=mask))
        assert np.all(sol.coef[1:] == 0.0)
        assert sol.coef[0] == pytest.approx(y.mean(), abs=1e-10)

    def test_zero_lambda_matches_normal_equations(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 3))
        y = x @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=50)
        sol = solve_penalized(PenalizedProblem("squared", x, y), tol=1e-11)
        direct = np.linalg.solve(x.T @ x, x.T @ y)
        np.testing.assert_allclose(sol.coef, direct, atol=1e-6)
        assert sol.converged

    def test_subgradient_condition_holds(self):
        prob = _logistic_problem()
        sol = solve_penalized(prob, tol=1e-8)
        assert sol.converged
        assert sol.kkt_residual <= 1e-8
        grad = prob.gradient(sol.coef)
        pen = prob.penalty_mask
        nz = pen & (sol.coef != 0)
        zero = pen & (sol.coef == 0)
        assert np.all(np.abs(grad[~pen]) <= 1e-8)
        assert np.all(np.abs(grad[nz] + prob.lam * np.sign(sol.coef[nz])) <= 1e-8)
        assert np.all(np.abs(grad[zero]) <= prob.lam + 1e-8)
        assert sol.gradient_sup <= prob.lam + 1e-8

    def test_objective_trace_is_non_increasing(self):
        for kind in ("logistic", "weighted-link-integral"):
            prob = _logistic_problem(seed=5)
            if kind != "logistic":
                prob = PenalizedProblem(kind, prob.design, prob.response, lam=0.01,
                                        penalty_mask=prob.penalty_mask, link="expit")
            sol = solve_penalized(prob, record_trace=True)
            trace = np.array(sol.trace)
            assert trace.shape[0] == sol.iterations + 1
            assert np.all(np.diff(trace) <= 1e-12)

    def test_row_permutation_invariance(self):
        prob = _logistic_problem(seed=7)
        perm = np.random.default_rng(0).permutation(prob.n)
        permuted = prob.subset(perm)
        a = solve_penalized(prob, tol=1e-9).coef
        b = solve_penalized(permuted, tol=1e-9).coef
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_warm_start_gives_same_solution(self):
        prob = _logistic_problem(seed=8)
        cold = solve_penalized(prob, tol=1e-9)
        warm = solve_penalized(prob, tol=1e-9, init=cold.coef)
        np.testing.assert_allclose(cold.coef, warm.coef, atol=1e-7)
        assert warm.iterations <= cold.iterations

    def test_calibration_exponential_solution(self):
        rng = np.random.default_rng(9)
        n = 300
        x = np.column_stack([np.ones(n), rng.normal(size=(n, 4))])
        y = (rng.uniform(size=n) < 0.4).astype(float)
        w = rng.uniform(0.5, 1.5, size=n)
        mask = np.r_[False, np.ones(4, dtype=bool)]
        prob = PenalizedProblem("calibration-exponential", x, y, weights=w,
                                offset=0.3 * rng.normal(size=n), lam=0.05, penalty_mask=mask)
        sol = solve_penalized(prob, tol=1e-8)
        assert sol.converged
        assert sol.guard_events == 0
        # The intercept solves the weighted calibration equation.
        u = prob.offset + x @ sol.coef
        assert np.mean(w * (-y * np.exp(-u) + (1 - y))) == pytest.approx(0.0, abs=1e-8)

    def test_guard_saturation_warns(self):
        prob = PenalizedProblem("calibration-exponential", np.zeros((3, 1)), [1.0, 0.0, 1.0],
                                offset=[-40.0, 0.0, 0.0])
        with pytest.warns(ExponentGuardWarning):
            sol = solve_penalized(prob)
        assert sol.guard_events == 1

    def test_rejects_bad_warm_start(self):
        with pytest.raises(ValueError, match="warm start"):
            solve_penalized(_logistic_problem(), init=np.zeros(3))

    def test_kkt_violations_by_hand(self):
        grad = np.array([0.3, -0.2, 0.05, 0.5])
        coef = np.array([1.0, -1.0, 0.0, 0.0])
        mask = np.array([False, True, True, True])
        np.testing.assert_allclose(kkt_violations(grad, coef, 0.1, mask),
                                   [0.3, 0.3, 0.0, 0.4])


class TestLambdaSelection:
    """Default grid and cross-validated lambda"""

    def test_default_grid_endpoints(self):
        grid = default_lambda_grid(1000, 200)
        assert grid.shape == (20,)
        assert grid[0] == pytest.approx(0.1456, rel=1e-3)
        assert grid[-1] == pytest.approx(0.01456, rel=1e-3)
        assert np.all(np.diff(grid) < 0)

    def test_single_element_grid(self):
        prob = _logistic_problem()
        assert cv_select_lambda(prob, [0.3], make_folds(prob.n, 5, 0)) == 0.3

    def test_pure_noise_prefers_large_lambda(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(100, 20))
        y = rng.normal(size=100)
        prob = PenalizedProblem("squared", x, y)
        folds = make_folds(100, 5, 11)
        grid = [1.0, 0.01]
        losses = cv_losses(prob, grid, folds)
        chosen = cv_select_lambda(prob, grid, folds)
        assert chosen == grid[int(np.argmin(losses))]
        assert chosen == 1.0

    def test_rejects_ascending_grid(self):
        prob = _logistic_problem()
        with pytest.raises(ValueError, match="descending"):
            cv_losses(prob, [0.01, 0.1], make_folds(prob.n, 5, 0))

    def test_degenerate_fold_is_skipped(self):
        rng = np.random.default_rng(12)
        n = 12
        x = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
        y = np.zeros(n)
        y[[0, 1, 4, 5]] = 1.0
        folds = FoldAssignment(np.repeat([1, 2, 3], 4), 3)
        prob = PenalizedProblem("logistic", x, y, penalty_mask=[False, True, True])
        with pytest.warns(DegenerateFoldWarning, match="fold 3"):
            losses = cv_losses(prob, [0.5, 0.1], folds)
        assert np.all(np.isfinite(losses))

    def test_all_folds_degenerate(self):
        n = 20
        y = np.zeros(n)
        y[0] = 1.0
        prob = PenalizedProblem("logistic", np.ones((n, 1)), y, penalty_mask=[False])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateFoldWarning)
            with pytest.raises(SolverError, match="degenerate"):
                cv_losses(prob, [0.5, 0.1], make_folds(n, 5, 0))

    def test_parallel_folds_match_serial(self):
        prob = _logistic_problem(seed=13)
        folds = make_folds(prob.n, 4, 13)
        grid = default_lambda_grid(prob.n, 10, size=5)
        np.testing.assert_allclose(cv_losses(prob, grid, folds, n_jobs=1),
                                   cv_losses(prob, grid, folds, n_jobs=2), rtol=1e-12)


class TestScalarRoot:
    """Bracket expansion and Brent refinement"""

    def test_log_two(self):
        root = solve_scalar_root(lambda b: np.exp(-b) - 0.5)
        assert root == pytest.approx(np.log(2.0), abs=1e-8)

    def test_identity_root(self):
        assert solve_scalar_root(lambda b: b) == 0.0

    def test_far_root_needs_expansion(self):
        root = solve_scalar_root(lambda b: b - 17.25, init=0.0)
        assert root == pytest.approx(17.25, abs=1e-8)

    def test_matches_grid_scan(self):
        target = 0.37123456
        f = lambda b: np.tanh(3.0 * (target - b)) + 0.01 * (target - b)
        grid = np.arange(0.0, 1.0, 1e-5)
        signs = np.sign([f(g) for g in grid])
        crossing = grid[np.flatnonzero(np.diff(signs) != 0)[0]]
        root = solve_scalar_root(f, init=0.0)
        assert abs(root - target) <= 1e-8
        assert crossing <= root <= crossing + 1e-5

    def test_no_sign_change(self):
        with pytest.raises(RootFindingError, match="no sign change"):
            solve_scalar_root(lambda b: b * b + 1.0)

    def test_deterministic(self):
        f = lambda b: np.exp(-2 * b) - 0.3
        assert solve_scalar_root(f, init=1.0) == solve_scalar_root(f, init=1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
