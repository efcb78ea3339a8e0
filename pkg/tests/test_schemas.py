import pytest
from marshmallow import ValidationError

from estimate import TuningConfig
from features import BalanceSpec, Transform
from panel import ColumnMapping
from qpsolve import SolverOptions
from schemas import (BalanceSpecSchema, ColumnMappingSchema, RunConfig, RunConfigSchema, SolverOptionsSchema,
                     TuningSchema)


class TestBalanceSpecSchema:

    def test_full_spec(self):
        spec = BalanceSpecSchema().load({
            'transforms': {
                't2': [{'kind': 'identity', 'column': 'x2_1'}],
                't1': [{'kind': 'identity', 'column': 1},
                       {'kind': 'interaction', 'column': 1, 'column_b': 2},
                       {'kind': 'indicator', 'column': 2, 'threshold': 0.5}],
            },
            'delta_std': {'t1': [0.1, 0.2, 0.3], 't2': 0.05},
            'pool_on_last_treatment': True,
        })
        assert isinstance(spec, BalanceSpec)
        assert spec.transforms[0][1] == Transform('interaction', 1, column_b=2)
        assert spec.transforms[1][0].column == 'x2_1'
        assert spec.delta_std == ((0.1, 0.2, 0.3), (0.05,))
        assert spec.pool_on_last_treatment
        assert spec.include_intercept_in_projection

    def test_default_delta(self):
        spec = BalanceSpecSchema().load({'transforms': {'t1': [{'kind': 'square', 'column': 1}]}})
        assert spec.delta_std == ((0.01,),)

    def test_reloads_own_dict(self):
        spec = BalanceSpec.identity((2, 1), delta=[0.1, [0.2]])
        assert BalanceSpecSchema().load(spec.to_dict()) == spec

    @pytest.mark.parametrize('payload', [
        {'transforms': {'t1': [{'kind': 'cube', 'column': 1}]}},
        {'transforms': {'t1': [{'kind': 'interaction', 'column': 1}]}},
        {'transforms': {'t1': [{'kind': 'indicator', 'column': 1}]}},
        {'transforms': {'t1': [{'kind': 'identity', 'column': 0}]}},
        {'transforms': {'t1': [{'kind': 'identity', 'column': True}]}},
        {'transforms': {'x1': [{'kind': 'identity', 'column': 1}]}},
        {'transforms': {'t1': [{'kind': 'identity', 'column': 1}], 't3': [{'kind': 'identity', 'column': 1}]}},
        {'transforms': {'t1': [{'kind': 'identity', 'column': 1}]}, 'delta_std': -0.1},
        {'transforms': {'t1': [{'kind': 'identity', 'column': 1}]}, 'delta_std': 'small'},
        {'transforms': {'t1': []}},
    ])
    def test_rejected(self, payload):
        with pytest.raises(ValidationError):
            BalanceSpecSchema().load(payload)


class TestColumnMappingSchema:

    def test_mapping(self):
        mapping = ColumnMappingSchema().load({
            'id': 'subject', 'z': ['a1', 'a2'], 'x': {'t1': ['age'], 't2': ['cd4', 'vl']}, 'y': 'outcome',
        })
        assert mapping == ColumnMapping(id='subject', z=('a1', 'a2'), x=(('age',), ('cd4', 'vl')), y='outcome')

    def test_group_count_mismatch(self):
        with pytest.raises(ValidationError):
            ColumnMappingSchema().load({'z': ['z1', 'z2'], 'x': {'t1': ['x1_1']}})


class TestRunConfigSchema:

    def test_defaults(self):
        config = RunConfigSchema().load({})
        assert config == RunConfig()
        assert config.solver == SolverOptions()
        assert config.tuning == TuningConfig()

    def test_nested(self):
        config = RunConfigSchema().load({
            'data': 'panel.csv',
            'msm': 'cumulative',
            'solver': {'eps': 1e-9, 'ladder': [1, 3, 9]},
            'tuning': {'candidates': [0.02], 'B': 5},
            'bootstrap': 50,
            'seed': 4,
        })
        assert config.msm == 'cumulative'
        assert config.solver.ladder == (1.0, 3.0, 9.0)
        assert config.solver.eps == 1e-9
        assert config.tuning == TuningConfig(candidates=(0.02,), B=5)
        assert config.seed == 4

    @pytest.mark.parametrize('payload', [
        {'bootstrap': 0},
        {'threads': 0},
        {'msm': 'quadratic'},
        {'solver': {'alpha': 2.0}},
        {'solver': {'ladder': [2, 1]}},
        {'solver': {'ladder': []}},
        {'tuning': {'B': 1}},
        {'tuning': {'candidates': []}},
        {'unexpected': 1},
    ])
    def test_rejected(self, payload):
        with pytest.raises(ValidationError):
            RunConfigSchema().load(payload)

    def test_merge_skips_none(self):
        config = RunConfig(seed=3, bootstrap=10).merge(seed=None, bootstrap=20, out='x.json')
        assert (config.seed, config.bootstrap, config.out) == (3, 20, 'x.json')

    def test_solver_and_tuning_alone(self):
        assert SolverOptionsSchema().load({}) == SolverOptions()
        assert TuningSchema().load({'enabled': False}) == TuningConfig(enabled=False)
