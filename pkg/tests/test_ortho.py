import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from conftest import make_panel
from errors import StructuralError
from features import BalanceSpec, Transform, apply_features, history
from ortho import compute_residuals, fit_projections, regressors
from panel import build_strata


def residualize(data, spec=None, **kwargs):
    spec = spec or BalanceSpec.identity(data.P)
    features = apply_features(data, spec)
    strata = build_strata(data)
    fits = fit_projections(features, strata, intercept=spec.include_intercept_in_projection,
                           pool_on_last_treatment=spec.pool_on_last_treatment, **kwargs)
    return features, strata, fits, compute_residuals(features, fits, strata)


def random_panel(seed, n=120):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((n, 2))
    z1 = (rng.random(n) < 0.5).astype(int)
    x2 = x1 @ rng.standard_normal((2, 2)) + z1[:, None] + rng.standard_normal((n, 2))
    z2 = (rng.random(n) < 0.5).astype(int)
    return make_panel(np.column_stack([z1, z2]), [x1, x2], rng.standard_normal(n))


class TestClosedForm:

    def test_perfect_linear_fit(self):
        data = make_panel([[0, 0], [0, 1], [0, 0]], [[[0.0], [1.0], [2.0]], [[0.0], [1.0], [2.0]]], [0, 0, 0])
        _, _, fits, residuals = residualize(data)
        npt.assert_allclose(fits.get(2, (0,)).coef[:, 0], [0.0, 1.0], atol=1e-12)
        npt.assert_allclose(residuals.values[1][:, 0], [0.0, 0.0, 0.0], atol=1e-12)

    def test_three_point_ols(self):
        data = make_panel([[0, 0], [0, 1], [0, 0]], [[[0.0], [1.0], [2.0]], [[0.0], [1.0], [3.0]]], [0, 0, 0])
        _, _, fits, residuals = residualize(data)
        npt.assert_allclose(fits.get(2, (0,)).coef[:, 0], [-1 / 6, 1.5], atol=1e-12)
        npt.assert_allclose(residuals.values[1][:, 0], [1 / 6, -1 / 3, 1 / 6], atol=1e-12)

    def test_copy_of_history_column(self, study1):
        spec = BalanceSpec(transforms=(tuple(Transform('identity', p) for p in range(1, 5)),
                                       (Transform('identity', 1), Transform('identity', 2))),
                           delta_std=0.01)
        copied = make_panel(study1.treatments, [study1.covariates[0], study1.covariates[0][:, :2]],
                            study1.outcome)
        _, _, _, residuals = residualize(copied, spec)
        npt.assert_allclose(residuals.values[1], 0.0, atol=1e-9)

    def test_single_period(self):
        data = make_panel([[0], [1], [1]], [[[1.0], [2.0], [6.0]]], [0, 0, 0])
        _, _, fits, residuals = residualize(data)
        assert residuals.T == 1
        assert fits.fits == {}
        npt.assert_array_equal(residuals.values[0][:, 0], [1.0, 2.0, 6.0])
        npt.assert_allclose(residuals.target((1,), 1), [3.0])

    def test_constant_feature(self):
        x2 = np.full((6, 1), 4.0)
        data = make_panel([[0, 0], [0, 1], [1, 0], [1, 1], [0, 0], [1, 1]],
                          [np.arange(6.0)[:, None], x2], np.zeros(6))
        _, _, _, residuals = residualize(data)
        npt.assert_allclose(residuals.values[1], 0.0, atol=1e-12)
        for prefix in ((0,), (1,)):
            npt.assert_allclose(residuals.target((*prefix, 0), 2), 0.0, atol=1e-12)


class TestProperties:

    @pytest.mark.parametrize('seed', range(50))
    def test_centering_and_orthogonality(self, seed):
        data = random_panel(seed)
        features, strata, fits, residuals = residualize(data)
        r2 = residuals.values[1]
        for prefix, idx in strata.level(1).items():
            sub = r2[idx]
            sd = data.covariates[1][idx].std(axis=0)
            assert np.all(np.abs(sub.mean(axis=0)) <= 1e-8 * np.maximum(sd, 1.0))
            H = regressors(features, 2, idx)
            for h in H.T:
                for col in sub.T:
                    cosine = abs(h @ col) / (np.linalg.norm(h) * np.linalg.norm(col) + 1e-12)
                    assert cosine < 1e-8

    @pytest.mark.parametrize('seed', range(50))
    def test_idempotent(self, seed):
        data = random_panel(seed)
        _, _, _, residuals = residualize(data)
        again = make_panel(data.treatments, [residuals.values[0], residuals.values[1]], data.outcome)
        _, _, _, twice = residualize(again)
        npt.assert_allclose(twice.values[1], residuals.values[1], atol=1e-9)

    @pytest.mark.parametrize('seed', range(50))
    def test_affine_equivariance(self, seed):
        data = random_panel(seed)
        _, _, _, residuals = residualize(data)
        shifted = make_panel(data.treatments, [data.covariates[0] * 3.0 - 1.0, data.covariates[1] * 2.0 + 5.0],
                             data.outcome)
        _, _, _, moved = residualize(shifted)
        npt.assert_allclose(moved.values[1], 2.0 * residuals.values[1], atol=1e-8)

    def test_study1_stratum_centered(self, study1):
        _, strata, _, residuals = residualize(study1)
        idx = strata.get((1,))
        npt.assert_allclose(residuals.values[1][idx].mean(axis=0), 0.0, atol=1e-8)


class TestFallbacks:

    def test_singleton_stratum_projects_to_zero(self):
        data = make_panel([[0, 0], [0, 1], [0, 0], [1, 1]],
                          [[[0.0], [1.0], [2.0], [5.0]], [[1.0], [2.0], [2.0], [7.0]]], np.zeros(4))
        _, _, fits, residuals = residualize(data)
        assert fits.get(2, (1,)).fallback == 'zero'
        assert residuals.values[1][3, 0] == 7.0

    def test_minimum_norm_when_underdetermined(self):
        x1 = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 2.0, 0.0]])
        data = make_panel([[0, 0], [0, 1], [0, 0]], [x1, np.array([[1.0], [2.0], [4.0]])], np.zeros(3))
        _, _, fits, residuals = residualize(data)
        assert fits.get(2, (0,)).fallback == 'min_norm'
        npt.assert_allclose(residuals.values[1], 0.0, atol=1e-9)

    def test_missing_fit(self, study1):
        _, _, fits, _ = residualize(study1)
        with pytest.raises(StructuralError):
            fits.get(3, (0, 1))

    def test_without_intercept(self, study1):
        spec = BalanceSpec.identity(study1.P, include_intercept_in_projection=False)
        features, strata, fits, residuals = residualize(study1, spec)
        idx = strata.get((0,))
        H = history(features, 1)[idx]
        npt.assert_allclose(H.T @ residuals.values[1][idx], 0.0, atol=1e-7)
        assert fits.get(2, (0,)).coef.shape == (4, 4)

    def test_pooled_on_last_treatment(self, study1):
        spec = BalanceSpec.identity(study1.P, pool_on_last_treatment=True)
        _, _, fits, _ = residualize(study1, spec)
        assert fits.pooled
        assert fits.get(2, (0,)).group == (0,)


class TestExport:

    def test_to_frame(self, study1):
        _, _, _, residuals = residualize(study1)
        frame = residuals.to_frame(study1.ids)
        assert list(frame.columns) == ['unit_id', 't', 'feature', 'residual']
        assert len(frame) == study1.n * 8
        assert isinstance(frame, pd.DataFrame)
