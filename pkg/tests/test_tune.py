import numpy as np
import numpy.testing as npt
import pytest

import tune
from conftest import make_panel
from diagnostics import fit_balance
from errors import SpecificationError, TuningError
from features import BalanceSpec
from simlab import generate
from tune import (BOOTSTRAP_TAG, TUNE_TAG, CandidateResult, imbalance_of, resample_indices, select_candidate,
                  tune_delta)
from weights import fit_weights


def candidate(delta, imbalance, rate=0.0):
    return CandidateResult(delta=delta, imbalance=imbalance, infeasibility_rate=rate, cv=0.1, resamples=10)


@pytest.fixture
def separated():
    x = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
    return make_panel(np.array([[0], [0], [0], [1], [1], [1]]), [x], np.zeros(6))


class TestSelection:

    def test_lowest_imbalance_wins(self):
        assert select_candidate([candidate(0.1, 0.3), candidate(0.01, 0.2), candidate(0.05, 0.25)]) == 0.01

    def test_ties_go_to_smaller_delta(self):
        assert select_candidate([candidate(0.1, 0.2), candidate(0.01, 0.2)]) == 0.01

    def test_infeasible_candidates_excluded(self):
        assert select_candidate([candidate(0.001, 0.0, rate=0.5), candidate(0.1, 0.4, rate=0.2)]) == 0.1

    def test_nothing_eligible(self):
        assert select_candidate([candidate(0.001, 0.0, rate=0.9)]) is None


class TestResampling:

    def test_deterministic(self):
        npt.assert_array_equal(resample_indices(50, 3, TUNE_TAG, 0), resample_indices(50, 3, TUNE_TAG, 0))

    def test_streams_differ(self):
        a = resample_indices(50, 3, TUNE_TAG, 0)
        assert not np.array_equal(a, resample_indices(50, 3, BOOTSTRAP_TAG, 0))
        assert not np.array_equal(a, resample_indices(50, 3, TUNE_TAG, 1))

    def test_range(self):
        idx = resample_indices(20, 0, TUNE_TAG, 4)
        assert idx.size == 20
        assert idx.min() >= 0 and idx.max() < 20


class TestTuneDelta:

    def test_single_candidate(self, study1, study1_spec):
        report = tune_delta(study1, study1_spec, candidates=(1.0,), B=2, seed=4)
        assert report.selected == 1.0
        assert report.result_for(1.0).infeasibility_rate == 0.0
        assert report.B == 2

    def test_reproducible(self, study1, study1_spec):
        first = tune_delta(study1, study1_spec, candidates=(0.5, 1.0), B=2, seed=9)
        second = tune_delta(study1, study1_spec, candidates=(0.5, 1.0), B=2, seed=9, n_jobs=2)
        assert first.to_dict() == second.to_dict()

    def test_tight_tolerance_beats_uniform_weights(self, confounded):
        report = tune_delta(confounded, BalanceSpec.identity(confounded.P), candidates=(0.001, 1e6), B=3, seed=2)
        assert report.selected == 0.001
        assert report.result_for(1e6).imbalance > report.result_for(0.001).imbalance

    @pytest.mark.slow
    def test_tight_tolerance_selected_on_study1(self):
        data = generate(1, 500, seed=21, replicate=0)
        report = tune_delta(data, BalanceSpec.identity(data.P), candidates=(0.001, 1e6), B=20, seed=21)
        assert report.selected == 0.001

    def test_infeasible_tight_candidate_skipped(self, monkeypatch):
        # both groups sit on parallel lines 0.02 apart; the pooled mean is 0.01 off either line
        base = np.array([[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]])
        x = np.vstack([base, base + [0.0, 0.02]])
        data = make_panel(np.array([[0]] * 3 + [[1]] * 3), [x], np.zeros(6))
        monkeypatch.setattr(tune, 'resample_indices', lambda n, seed, tag, index: np.arange(n))
        report = tune_delta(data, BalanceSpec.identity(data.P), candidates=(0.001, 0.05), B=2)
        assert report.result_for(0.001).infeasibility_rate == 1.0
        assert report.result_for(0.05).infeasibility_rate == 0.0
        assert report.selected == 0.05

    def test_more_resamples_keep_earlier_draws(self, confounded, monkeypatch):
        seen = []
        real = tune.resample_indices

        def recording(n, seed, tag, index):
            draw = real(n, seed, tag, index)
            seen.append(draw)
            return draw

        monkeypatch.setattr(tune, 'resample_indices', recording)
        spec = BalanceSpec.identity(confounded.P)
        tune_delta(confounded, spec, candidates=(1.0,), B=2, seed=6)
        short = list(seen)
        seen.clear()
        tune_delta(confounded, spec, candidates=(1.0,), B=4, seed=6)
        assert (len(short), len(seen)) == (2, 4)
        for a, b in zip(short, seen):
            npt.assert_array_equal(a, b)

    def test_all_candidates_infeasible(self, separated):
        with pytest.raises(TuningError) as info:
            tune_delta(separated, BalanceSpec.identity((1,), delta=0.01), candidates=(0.01,), B=4)
        report = info.value.report
        assert report.selected is None
        assert report.candidates[0].infeasibility_rate >= 0.5

    @pytest.mark.parametrize('kwargs', [{'candidates': ()}, {'candidates': (-0.1,)}, {'B': 1}])
    def test_bad_arguments(self, study1, study1_spec, kwargs):
        with pytest.raises(SpecificationError):
            tune_delta(study1, study1_spec, **kwargs)


class TestImbalance:

    def test_matches_feature_table(self, study1, study1_spec):
        fit = fit_weights(study1, study1_spec)
        assert imbalance_of(fit) == pytest.approx(fit_balance(fit, basis='feature').mean_post())
