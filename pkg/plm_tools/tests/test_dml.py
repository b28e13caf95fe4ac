"""
Unit tests for the cross-fitted estimator and full model refitting.

Run with: pytest plm_tools/tests/test_dml.py -v
"""

from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit, logit

from plm_tools.data import Dataset, derive_seed
from plm_tools.dml import (
    DifferenceR,
    DmlConfig,
    RatioR,
    check_sample_splitting,
    fit_dml,
    fit_m_hat,
    fmr_breve_beta,
    fmr_fit_r,
)
from plm_tools.exceptions import DataValidationError, EstimationError, LearnerError
from plm_tools.learners import LearnerSpec
from plm_tools.score import evaluate_nuisances
from plm_tools.simgen import GeneratorSpec, generate


def _fast_cfg(**kwargs):
    kwargs.setdefault("k_outer", 2)
    kwargs.setdefault("k_inner", 2)
    kwargs.setdefault("bootstrap_draws", 0)
    return DmlConfig.for_learner("penalized-linear", **kwargs)


class _Fixed:
    """Stand-in fitted model returning a known function of x."""
    train_rows = None

    def __init__(self, fn):
        self.fn = fn

    def predict(self, x):
        return self.fn(x)


@pytest.fixture(scope="module")
def sim():
    return generate(GeneratorSpec("hd-i", 400, p=6, seed=21))


@pytest.fixture(scope="module")
def fit(sim):
    return fit_dml(sim.dataset, _fast_cfg(seed=3))


class TestConfig:
    """DmlConfig validation"""

    def test_defaults(self):
        cfg = DmlConfig()
        assert cfg.k_outer == 5 and cfg.k_inner == 5
        assert cfg.r_variant == "difference"
        assert cfg.learner("m").kind == "boosted-trees"

    def test_objectives_are_forced(self):
        cfg = DmlConfig(learner_full=LearnerSpec("random-forest"),
                        learner_m=LearnerSpec("random-forest", objective="logistic"))
        assert cfg.learner("full").objective == "logistic"
        assert cfg.learner("m").objective == "squared"

    @pytest.mark.parametrize("kwargs", [
        {"k_outer": 1},
        {"k_inner": 1},
        {"r_variant": "product"},
        {"bootstrap_draws": 10},
        {"candidates": (LearnerSpec("k-nearest"),)},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            DmlConfig(**kwargs)

    def test_for_learner(self):
        cfg = DmlConfig.for_learner("k-nearest", k_outer=3)
        assert {cfg.learner(c).kind for c in ("m", "full", "a", "t")} == {"k-nearest"}
        assert cfg.k_outer == 3


class TestMHat:
    """Exposure regression among controls"""

    def test_independent_exposure_gives_control_mean(self):
        rng = np.random.default_rng(0)
        n = 2000
        x = rng.normal(size=(n, 3))
        a = rng.normal(size=n)
        y = (rng.uniform(size=n) < 0.3).astype(float)
        train, held = Dataset(y[:1500], a[:1500], x[:1500]), slice(1500, None)
        model = fit_m_hat(train, LearnerSpec("penalized-linear"))
        controls = y[held] == 0
        mse = np.mean((a[held][controls] - model.predict(x[held][controls])) ** 2)
        assert mse <= 1.1 * np.var(a[held][controls])

    def test_constant_control_exposure(self):
        rng = np.random.default_rng(1)
        y = np.r_[np.zeros(20), np.ones(10)]
        a = np.r_[np.full(20, 2.0), rng.normal(size=10)]
        model = fit_m_hat(Dataset(y, a, rng.normal(size=(30, 2))), LearnerSpec("random-forest"))
        np.testing.assert_array_equal(model.predict(rng.normal(size=(4, 2))), np.full(4, 2.0))

    def test_trained_on_controls_only(self, sim):
        train = sim.dataset.subset(np.arange(0, 400, 2))
        model = fit_m_hat(train, LearnerSpec("penalized-linear"))
        controls = set(train.row_ids[train.y == 0].tolist())
        assert set(model.train_rows.tolist()) == controls

    def test_too_few_controls(self):
        y = np.r_[np.zeros(9), np.ones(20)]
        d = Dataset(y, np.arange(29.0), np.ones((29, 1)))
        with pytest.raises(LearnerError, match="too few controls"):
            fit_m_hat(d, LearnerSpec("penalized-linear"))


class TestFmr:
    """Inner cross-fitting and the two forms of r-hat"""

    def test_breve_beta_is_least_squares_slope(self, sim):
        inner = fmr_breve_beta(sim.dataset, _fast_cfg(), seed=4)
        w, res = inner.pseudo_outcome, inner.a_residual
        assert inner.breve_beta == pytest.approx(w @ res / (res @ res), rel=1e-12)
        assert len(inner.full_models) == len(inner.a_models) == 2
        assert inner.inner_folds.k == 2

    def test_pseudo_outcome_is_out_of_fold(self, sim):
        d = sim.dataset
        inner = fmr_breve_beta(d, _fast_cfg(), seed=4)
        for j, _, test in inner.inner_folds.splits():
            model = inner.full_models[j - 1]
            assert not set(d.row_ids[test].tolist()) & set(model.train_rows.tolist())
            expected = logit(model.predict(np.column_stack([d.a[test], d.x[test]])))
            np.testing.assert_allclose(inner.pseudo_outcome[test], expected)

    def test_deterministic(self, sim):
        a = fmr_breve_beta(sim.dataset, _fast_cfg(), seed=8)
        b = fmr_breve_beta(sim.dataset, _fast_cfg(), seed=8)
        assert a.breve_beta == b.breve_beta

    def test_perfectly_predicted_exposure(self, sim):
        d = sim.dataset
        constant = Dataset(d.y, np.full(d.n, 1.5), d.x)
        with pytest.raises(LearnerError, match="zero variance"):
            fmr_breve_beta(constant, _fast_cfg(), seed=0)

    def test_difference_form_with_truths_is_r0(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 2))
        beta0 = 0.7
        a0 = lambda z: np.sin(z[:, 0])  # noqa: E731
        r0 = lambda z: 0.3 - z[:, 1] ** 2  # noqa: E731
        t0 = lambda z: beta0 * a0(z) + r0(z)  # noqa: E731
        r_hat = DifferenceR(_Fixed(t0), [_Fixed(a0), _Fixed(a0)], beta0)
        np.testing.assert_allclose(r_hat(x), r0(x), atol=1e-12)

    def test_ratio_and_difference_agree_under_truths(self):
        # A | x takes the values a0(x) -+ 1 with equal probability.
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 2))
        beta0 = 1.0
        a0 = lambda z: 0.5 * z[:, 0]  # noqa: E731
        r0 = lambda z: -0.2 + 0.4 * z[:, 1]  # noqa: E731

        def expect(fn):
            return lambda z: 0.5 * (fn(a0(z) - 1.0, z) + fn(a0(z) + 1.0, z))

        numerator = expect(lambda a, z: expit(beta0 * a + r0(z)) * np.exp(-beta0 * a))
        denominator = expect(lambda a, z: expit(-(beta0 * a + r0(z))))
        ratio = RatioR(_Fixed(numerator), _Fixed(denominator))
        diff = DifferenceR(_Fixed(lambda z: beta0 * a0(z) + r0(z)), [_Fixed(a0)], beta0)
        np.testing.assert_allclose(ratio(x), diff(x), atol=1e-6)
        np.testing.assert_allclose(ratio(x), r0(x), atol=1e-6)

    def test_population_slope_is_beta0(self):
        # Six support points: X in {0, 1}, A in {-1, 0, 2} given X.
        beta0 = 0.8
        p_x = {0.0: 0.45, 1.0: 0.55}
        p_a = {0.0: (0.2, 0.5, 0.3), 1.0: (0.4, 0.25, 0.35)}
        a_vals = np.array([-1.0, 0.0, 2.0])
        r0 = {0.0: -0.3, 1.0: 0.6}
        grid = np.round(np.arange(-2.0, 2.0001, 1e-4), 4)
        loss = np.zeros_like(grid)
        for x, px in p_x.items():
            probs = np.array(p_a[x])
            a0 = probs @ a_vals
            for a, pa in zip(a_vals, probs):
                w = logit(expit(beta0 * a + r0[x]))
                loss += px * pa * (w - grid * (a - a0)) ** 2
        assert grid[np.argmin(loss)] == pytest.approx(beta0, abs=1e-4)

    def test_ratio_clipping_error(self):
        x = np.arange(20.0).reshape(-1, 1)
        den = _Fixed(lambda z: np.where(z[:, 0] < 2, 0.0, 0.5))
        r_hat = RatioR(_Fixed(lambda z: np.ones(z.shape[0])), den)
        with pytest.raises(LearnerError, match="difference variant"):
            r_hat(x)

    def test_ratio_clipping_within_tolerance(self):
        x = np.arange(40.0).reshape(-1, 1)
        den = _Fixed(lambda z: np.where(z[:, 0] < 1, 0.0, 0.5))
        r_hat = RatioR(_Fixed(lambda z: np.ones(z.shape[0])), den)
        out = r_hat(x)
        assert out[0] == pytest.approx(np.log(1.0 / 1e-3))
        np.testing.assert_allclose(out[1:], np.log(2.0))

    def test_fit_r_variants(self, sim):
        d = sim.dataset
        cfg = _fast_cfg()
        inner = fmr_breve_beta(d, cfg, seed=5)
        diff = fmr_fit_r(d, inner.breve_beta, inner, cfg, seed=5)
        assert isinstance(diff, DifferenceR) and diff.breve_beta == inner.breve_beta
        ratio = fmr_fit_r(d, inner.breve_beta, inner, replace(cfg, r_variant="ratio"), seed=5)
        assert isinstance(ratio, RatioR)
        assert np.all(np.isfinite(ratio(d.x)))

    def test_fit_r_rejects_non_finite_beta(self, sim):
        cfg = _fast_cfg()
        inner = fmr_breve_beta(sim.dataset, cfg, seed=5)
        with pytest.raises(LearnerError, match="not finite"):
            fmr_fit_r(sim.dataset, float("nan"), inner, cfg)


class TestFitDml:
    """End-to-end cross-fitted fits"""

    def test_sample_splitting(self, sim, fit):
        assert check_sample_splitting(fit, sim.dataset)
        for nuisance in fit.nuisances:
            assert set(nuisance.provenance) == {"m", "r"}

    def test_tampered_provenance_is_detected(self, sim, fit):
        _, _, test = next(fit.folds.splits())
        leaky = replace(fit.nuisances[0], provenance={
            "m": np.r_[fit.nuisances[0].provenance["m"], sim.dataset.row_ids[test[:1]]],
            "r": fit.nuisances[0].provenance["r"],
        })
        tampered = replace(fit, nuisances=[leaky] + fit.nuisances[1:])
        with pytest.raises(EstimationError) as exc:
            check_sample_splitting(tampered, sim.dataset)
        assert exc.value.stage == "sample-splitting"
        assert exc.value.info == {"fold": 1, "component": "m"}

    def test_equation_and_psi_range(self, sim, fit):
        assert abs(fit.equation_residual) <= 1e-8
        values = evaluate_nuisances(sim.dataset, fit.nuisances, fit.folds)
        assert np.all((values.psi > 0) & (values.psi < 1))

    def test_fit_fields(self, fit):
        assert fit.breve_betas.shape == (2,)
        assert np.all(np.isfinite(fit.breve_betas))
        assert fit.fold_seed == derive_seed(3, 0)
        assert fit.r_variant == "difference" and not fit.oracle
        assert fit.selected == [{"m": "penalized-linear", "full": "penalized-linear",
                                 "a": "penalized-linear", "t": "penalized-linear"}] * 2
        assert fit.inference.ci_low <= fit.beta_hat <= fit.inference.ci_high
        assert abs(fit.beta_hat - 0.5) < 1.0

    def test_deterministic_and_parallel(self, sim, fit):
        again = fit_dml(sim.dataset, _fast_cfg(seed=3, n_jobs=2))
        assert again.beta_hat == fit.beta_hat
        np.testing.assert_array_equal(again.breve_betas, fit.breve_betas)
        assert again.inference.se == fit.inference.se

    def test_bootstrap_interval(self, sim):
        result = fit_dml(sim.dataset, _fast_cfg(seed=3, bootstrap_draws=200))
        assert result.inference.bootstrap_draws == 200
        assert result.inference.ci_low < result.beta_hat < result.inference.ci_high

    def test_ratio_variant(self, sim):
        result = fit_dml(sim.dataset, _fast_cfg(seed=3, r_variant="ratio"))
        assert result.r_variant == "ratio"
        assert np.isfinite(result.beta_hat)
        assert abs(result.equation_residual) <= 1e-8

    def test_oracle_nuisances(self):
        sim = generate(GeneratorSpec("hd-i", 2000, p=10, seed=8))
        result = fit_dml(sim.dataset, _fast_cfg(seed=8), oracle=sim.oracle())
        assert result.oracle
        assert np.all(np.isnan(result.breve_betas))
        assert abs(result.beta_hat - 0.5) <= 4 * result.inference.se

    def test_constant_response(self):
        rng = np.random.default_rng(0)
        d = Dataset(np.zeros(60), rng.normal(size=60), rng.normal(size=(60, 2)))
        with pytest.raises(DataValidationError) as exc:
            fit_dml(d, _fast_cfg())
        assert exc.value.stage == "dataset"
        assert "both classes" in str(exc.value)

    def test_per_fold_selection(self, sim):
        cfg = _fast_cfg(seed=3, candidates=(LearnerSpec("penalized-linear"),
                                            LearnerSpec("k-nearest")))
        result = fit_dml(sim.dataset, cfg)
        assert len(result.selected) == 2
        for chosen in result.selected:
            assert set(chosen) == {"m", "full", "a", "t"}
            assert set(chosen.values()) <= {"penalized-linear", "k-nearest"}
        assert check_sample_splitting(result, sim.dataset)

    def test_failure_is_labeled_with_fold_and_stage(self, sim, mocker):
        mocker.patch("plm_tools.dml.fmr_breve_beta", side_effect=LearnerError("boom"))
        with pytest.raises(LearnerError) as exc:
            fit_dml(sim.dataset, _fast_cfg())
        assert exc.value.stage == "fold 1 / fmr"
        assert str(exc.value) == "[fold 1 / fmr] boom"

    def test_intercept_column_is_dropped(self, sim):
        with_int = fit_dml(sim.dataset.with_intercept(), _fast_cfg(seed=3))
        assert with_int.beta_hat == pytest.approx(
            fit_dml(sim.dataset, _fast_cfg(seed=3)).beta_hat, rel=1e-10)


@pytest.mark.slow
class TestMonteCarlo:
    """Replicate-level behavior of the oracle and learned estimators"""

    def test_oracle_coverage(self):
        hits = 0
        for rep in range(300):
            sim = generate(GeneratorSpec("hd-i", 2000, p=20, seed=5000 + rep))
            result = fit_dml(sim.dataset, _fast_cfg(seed=rep), oracle=sim.oracle())
            hits += abs(result.beta_hat - 0.5) <= 3 * result.inference.se
        assert hits >= 279

    def test_breve_beta_with_boosting(self):
        close = 0
        for rep in range(50):
            sim = generate(GeneratorSpec("ml", 2000, seed=7000 + rep))
            cfg = DmlConfig(bootstrap_draws=0)
            close += abs(fmr_breve_beta(sim.dataset, cfg, seed=rep).breve_beta - 1.0) <= 0.15
        assert close >= 45

    def test_r_hat_error_shrinks_with_n(self):
        def grid_mse(n):
            errors = []
            for rep in range(50):
                sim = generate(GeneratorSpec("ml", n, seed=n * 100 + rep))
                grid = generate(GeneratorSpec("ml", 500, seed=99)).dataset.x
                cfg = DmlConfig(bootstrap_draws=0)
                inner = fmr_breve_beta(sim.dataset, cfg, seed=rep)
                r_hat = fmr_fit_r(sim.dataset, inner.breve_beta, inner, cfg, seed=rep)
                errors.append(np.mean((r_hat(grid) - sim.r0(grid)) ** 2))
            return np.mean(errors)

        assert grid_mse(500) >= 1.4 * grid_mse(2000)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
