import io

import numpy as np
import numpy.testing as npt
import pytest

from conftest import make_panel
from errors import InfeasibleError
from features import BalanceSpec
from panel import TreatmentPath, load_panel
from weights import check_balance, fit_weights


@pytest.fixture(scope='module')
def study1_fit(study1, study1_spec):
    return fit_weights(study1, study1_spec)


def separated(extra=False):
    x = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0]
    z = [0, 0, 0, 1, 1, 1]
    if extra:
        x.append(6.0)
        z.append(1)
    return make_panel(np.array(z)[:, None], [np.array(x)[:, None]], np.zeros(len(x)))


class TestFitWeights:

    def test_every_path_balanced(self, study1_fit, study1):
        assert len(study1_fit.accepted) == 4
        assert study1_fit.dropped == ()
        for excess in check_balance(study1_fit).values():
            assert excess <= 1e-7
        for path, w in study1_fit.weights().items():
            assert w.min() >= 0.0
            assert w.sum() == pytest.approx(1.0, abs=1e-12)
            assert w.size == study1_fit.strata.count(path)

    def test_problem_shape(self, study1_fit):
        for path, prob in study1_fit.problems.items():
            assert prob.K == 8
            assert prob.row_labels[0] == 't1:x1_1'
            assert prob.row_labels[-1] == 't2:x2_4'

    def test_weights_frame(self, study1_fit, study1):
        frame = study1_fit.weights_frame()
        assert list(frame.columns) == ['unit_id', 'path', 'weight']
        assert len(frame) == study1.n
        npt.assert_allclose(frame.groupby('path')['weight'].sum().to_numpy(), 1.0)

    def test_tolerances_include_multiplier(self, study1_fit):
        for path, tol in study1_fit.tolerances().items():
            npt.assert_allclose(tol, study1_fit.problems[path].delta * study1_fit.multipliers[path])

    def test_to_dict(self, study1_fit):
        d = study1_fit.to_dict()
        assert set(d['paths']) == {'00', '01', '10', '11'}
        assert d['strata']['n'] == 400

    def test_deterministic(self, study1, study1_spec, study1_fit):
        again = fit_weights(study1, study1_spec, n_jobs=2)
        for path in study1_fit.accepted:
            assert again.solutions[path].weights.tobytes() == study1_fit.solutions[path].weights.tobytes()


class TestInfeasiblePaths:

    def test_all_paths_infeasible(self):
        with pytest.raises(InfeasibleError) as info:
            fit_weights(separated(), BalanceSpec.identity((1,), delta=0.01))
        assert set(info.value.paths) == {'0', '1'}

    def test_report_instead_of_raise(self):
        fit = fit_weights(separated(), BalanceSpec.identity((1,), delta=0.01), require_feasible=False)
        assert set(fit.dropped) == {TreatmentPath((0,)), TreatmentPath((1,))}
        assert fit.accepted == []

    def test_one_path_dropped(self):
        fit = fit_weights(separated(extra=True), BalanceSpec.identity((1,), delta=0.01))
        assert fit.dropped == (TreatmentPath((0,)),)
        assert fit.multipliers[TreatmentPath((1,))] == 1.0
        w = fit.solutions[TreatmentPath((1,))].weights
        x = np.array([10.0, 11.0, 12.0, 6.0])
        assert abs(w @ x - 6.0) <= 0.01 * np.std([0, 1, 2, 10, 11, 12, 6], ddof=1) + 1e-9

    def test_relaxation_recorded(self):
        # Path 1 reaches the grand mean 1.5 only once the tolerance doubles
        data = make_panel(np.array([0, 0, 1, 1])[:, None], [np.array([[0.0], [1.0], [2.0], [3.0]])], np.zeros(4))
        sd = np.std([0.0, 1.0, 2.0, 3.0], ddof=1)
        fit = fit_weights(data, BalanceSpec.identity((1,), delta=0.4 / sd), ladder=(1.0, 2.0, 4.0),
                          require_feasible=False)
        assert fit.multipliers[TreatmentPath((1,))] == 2.0
        assert fit.multipliers[TreatmentPath((0,))] == 2.0


class TestCensoring:

    def test_complete_cases_by_default(self, censored_csv):
        data = load_panel(io.StringIO(censored_csv))
        spec = BalanceSpec.identity(data.P, delta=10.0)
        fit = fit_weights(data, spec, require_feasible=False)
        assert fit.data.n == 2
        assert not fit.data.has_censoring
