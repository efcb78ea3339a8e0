import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from config import make_rng
from errors import FitError, SpecificationError
from estimate import TuningConfig
from panel import TreatmentPath, build_strata
from simlab import (ESTIMATORS, EstimatorOutput, StudyConfig, add_mar_censoring, clamp, closed_form_truth,
                    forced_path_mean, generate, render_svg, run_replications, true_params)


@pytest.fixture
def oracle(monkeypatch):
    def estimator(data, design, config, seed):
        tau = closed_form_truth(1)
        return EstimatorOutput(coef=tau.copy(), ci_lower=tau - 1.0, ci_upper=tau + 1.0)

    def broken(data, design, config, seed):
        raise FitError('no fit')

    monkeypatch.setitem(ESTIMATORS, 'oracle', estimator)
    monkeypatch.setitem(ESTIMATORS, 'broken', broken)


class TestTruth:

    def test_study1_closed_form(self):
        truth = true_params(1)
        assert truth.method == 'closed_form'
        npt.assert_allclose(truth.coef, [308.30, 4.57, -10.00], atol=0.01)
        assert truth.design.terms == ('intercept', 'z1', 'z2')

    def test_study2_closed_form(self):
        npt.assert_allclose(closed_form_truth(2), [261.80, 58.50], atol=0.05)

    def test_unknown_study(self):
        with pytest.raises(SpecificationError):
            closed_form_truth(4)

    def test_forced_path_mean_study3(self):
        mean, se = forced_path_mean(3, TreatmentPath((1, 0)), draws=20000, chunk=5000)
        assert abs(mean - 27.84) <= 5 * se

    def test_forced_path_mean_is_reproducible(self):
        a = forced_path_mean(1, TreatmentPath((0, 1)), draws=1000, seed=2)
        b = forced_path_mean(1, TreatmentPath((0, 1)), draws=1000, seed=2)
        assert a == b

    def test_monte_carlo_truth(self):
        truth = true_params(3, draws=20000)
        assert truth.method == 'monte_carlo'
        assert np.all(np.abs(truth.coef - [27.84, 0.0, 0.0]) <= 5 * truth.mc_se)
        assert len(truth.path_means) == 4


class TestGenerators:

    def test_clamp(self):
        x = np.array([-3.0, -0.5, 0.0, 0.7, 9.0])
        npt.assert_array_equal(clamp(x, 1.0), [-1.0, -0.5, 0.0, 0.7, 1.0])
        npt.assert_array_equal(clamp(x, np.abs(x)), x)

    @pytest.mark.parametrize('study, T', [(1, 2), (2, 3), (3, 2)])
    def test_shapes(self, study, T):
        data = generate(study, 60, seed=0, replicate=0)
        assert data.n == 60
        assert data.T == T
        assert data.P == (4,) * T
        assert set(np.unique(data.treatments)) <= {0, 1}
        assert np.isfinite(data.outcome).all()

    def test_deterministic(self):
        a = generate(2, 80, seed=5, replicate=3)
        b = generate(2, 80, seed=5, replicate=3)
        assert a.equals(b)
        assert not a.equals(generate(2, 80, seed=5, replicate=4))

    def test_unknown_study(self):
        with pytest.raises(SpecificationError):
            generate(7, 60, seed=0, replicate=0)

    def test_study1_first_period_moments(self):
        x = generate(1, 20000, seed=1, replicate=0).covariates[0]
        assert abs(x[:, 0].mean()) < 0.05
        assert x[:, 2:].min() >= 0.0
        assert x[:, 2].mean() == pytest.approx(np.sqrt(2.0 / np.pi), abs=0.03)

    def test_study3_binary_covariate(self):
        data = generate(3, 200, seed=0, replicate=0)
        assert set(np.unique(data.covariates[0][:, 3])) <= {0.0, 1.0}
        assert data.covariates[1][:, 2].min() >= 0.0

    def test_mar_censoring_is_monotone(self):
        data = add_mar_censoring(generate(1, 300, seed=0, replicate=0), make_rng(0, 99))
        assert data.has_censoring
        assert (np.diff(data.censoring, axis=1) >= 0).all()
        censored = data.censoring[:, -1] == 1
        assert censored.any()
        assert np.isnan(data.outcome[censored]).all()
        assert build_strata(data).n_observed == int((~censored).sum())


class TestStudyConfig:

    def test_minimum_n(self):
        with pytest.raises(SpecificationError):
            StudyConfig(study=1, n=10)

    def test_unknown_method(self):
        with pytest.raises(SpecificationError):
            StudyConfig(study=1, n=100, methods=('bao', 'tmle'))

    def test_defaults(self):
        config = StudyConfig(study=2, n=100)
        assert config.design_name == 'cumulative'
        assert config.to_dict()['methods'] == ['bao']


class TestReplications:

    @pytest.fixture
    def report(self, oracle):
        config = StudyConfig(study=1, n=60, reps=2, seed=3, methods=('oracle', 'unadj', 'broken'))
        return run_replications(config)

    def test_oracle_metrics(self, report):
        frame = report.to_frame()
        oracle = frame[frame.method == 'oracle']
        assert list(oracle.parameter) == ['intercept', 'z1', 'z2']
        npt.assert_allclose(oracle.bias, 0.0, atol=1e-12)
        npt.assert_allclose(oracle.rmse, 0.0, atol=1e-12)
        npt.assert_allclose(oracle.coverage, 100.0)
        npt.assert_allclose(oracle['length'], 2.0)

    def test_failures_counted(self, report):
        frame = report.to_frame()
        broken = frame[frame.method == 'broken']
        assert (broken.failures == 2).all()
        assert broken.bias.isna().all()
        unadj = frame[frame.method == 'unadj']
        assert (unadj.failures == 0).all()
        assert unadj.coverage.between(0.0, 100.0).all()

    def test_replicate_frame(self, report):
        frame = report.replicate_frame()
        assert len(frame) == 3 * 2 * 3
        assert frame[frame.method == 'broken'].estimate.isna().all()
        assert frame[frame.method == 'oracle'].estimate.notna().all()

    def test_imbalance(self, report):
        table = report.imbalance_frame()
        assert set(table.method) == {'unadj'}
        assert (table.replicates <= 2).all()
        npt.assert_allclose(table.asmd, table.asmd_pre)
        svg = render_svg(table)
        assert '<svg' in svg
        assert svg == render_svg(table)

    def test_reproducible(self, report, oracle):
        again = run_replications(report.config)
        pd.testing.assert_frame_equal(again.to_frame(), report.to_frame())
        pd.testing.assert_frame_equal(again.imbalance_frame(), report.imbalance_frame())

    def test_to_dict(self, report):
        d = report.to_dict()
        assert d['config']['n'] == 60
        assert d['truth']['method'] == 'closed_form'
        assert len(d['metrics']) == 9

    def test_gcomputation_methods_run(self):
        config = StudyConfig(study=1, n=200, reps=1, seed=4, methods=('gpool', 'gstrat'), bootstrap=2)
        frame = run_replications(config).to_frame()
        assert set(frame.method) == {'gpool', 'gstrat'}
        assert (frame.failures == 0).all()
        assert frame.bias.notna().all()

    def test_design_must_match_truth(self, oracle):
        config = StudyConfig(study=1, n=60, methods=('oracle',), design='cumulative')
        with pytest.raises(SpecificationError):
            run_replications(config)


@pytest.mark.slow
class TestMonteCarloSlices:

    def test_study2_and_study3_truth(self):
        npt.assert_allclose(true_params(2).coef, [261.80, 58.50], atol=0.05)
        npt.assert_allclose(true_params(3).coef, [27.82, 0.0, 0.0], atol=0.05)

    def test_study1_bias(self):
        config = StudyConfig(study=1, n=1000, reps=300, seed=2024, methods=('bao', 'gpool'), bootstrap=20,
                             tuning=TuningConfig(B=10), n_jobs=8)
        frame = run_replications(config).to_frame().set_index(['method', 'parameter'])
        assert (frame.loc['gpool', 'bias'].abs() <= 0.3).all()
        assert 0.3 <= frame.loc[('bao', 'z2'), 'bias'] <= 1.5
        assert 0.7 <= frame.loc[('bao', 'z2'), 'rmse'] <= 1.6
        assert frame.loc[('bao', 'intercept'), 'rmse'] <= 4.5

    def test_study3_bias_and_coverage(self):
        config = StudyConfig(study=3, n=1000, reps=200, seed=2024, methods=('bao', 'gpool'), bootstrap=50,
                             tuning=TuningConfig(B=10), n_jobs=8)
        frame = run_replications(config).to_frame().set_index(['method', 'parameter'])
        assert abs(frame.loc[('bao', 'z2'), 'bias']) < abs(frame.loc[('gpool', 'z2'), 'bias'])
        assert frame.loc[('bao', 'z2'), 'coverage'] >= 85.0

    def test_bao_weights_vary_less_than_stabilized_ipw(self):
        config = StudyConfig(study=1, n=1000, reps=100, seed=2024, methods=('bao', 'lr-stab'), bootstrap=2,
                             tuning=TuningConfig(B=10), n_jobs=8)
        table = run_replications(config).imbalance_frame().set_index(['method', 'path'])
        for path in ('00', '01', '10', '11'):
            assert table.loc[('bao', path), 'cv'] < table.loc[('lr-stab', path), 'cv']
