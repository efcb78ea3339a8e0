import re
from dataclasses import dataclass, field, replace

from marshmallow import Schema, ValidationError, fields, post_load, validate, validates, validates_schema

from errors import SpecificationError
from estimate import DEFAULT_LADDER, TuningConfig, msm_presets
from features import BalanceSpec, Transform, transform_kinds
from panel import ColumnMapping
from qpsolve import SolverOptions
from tune import DEFAULT_CANDIDATES

_PERIOD_KEY = re.compile(r'^t([1-9]\d*)$')


def _by_period(mapping, what):
    """Order a {"t1": ..., "t2": ...} mapping by period, rejecting gaps."""
    keyed = {}
    for key, value in mapping.items():
        m = _PERIOD_KEY.match(key)
        if not m:
            raise ValidationError(f'{what} keys must look like t1, t2, ...; got {key!r}')
        keyed[int(m.group(1))] = value
    if sorted(keyed) != list(range(1, len(keyed) + 1)):
        raise ValidationError(f'{what} must cover t1..tT without gaps')
    return [keyed[t] for t in sorted(keyed)]


class ColumnRef(fields.Field):
    """1-based column position or column label."""

    def _deserialize(self, value, attr, data, **kwargs):
        if isinstance(value, bool):
            raise ValidationError('column must be a 1-based position or a label')
        if isinstance(value, int):
            if value < 1:
                raise ValidationError('column positions start at 1')
            return value
        if isinstance(value, str) and value:
            return value
        raise ValidationError('column must be a 1-based position or a label')


class ColumnMappingSchema(Schema):
    id = fields.Str(load_default='id')
    z = fields.List(fields.Str(), required=True)
    x = fields.Dict(keys=fields.Str(), values=fields.List(fields.Str()), required=True)
    y = fields.Str(load_default='y')
    c = fields.List(fields.Str(), allow_none=True, load_default=None)

    @post_load
    def make_mapping(self, data, **kwargs):
        x = _by_period(data['x'], 'x')
        try:
            return ColumnMapping(id=data['id'], z=tuple(data['z']), x=tuple(tuple(g) for g in x),
                                 y=data['y'], c=tuple(data['c']) if data['c'] else None)
        except ValueError as e:
            raise ValidationError(str(e))


class TransformSchema(Schema):
    kind = fields.Str(required=True, validate=validate.OneOf(transform_kinds))
    column = ColumnRef(required=True)
    column_b = ColumnRef(load_default=None, allow_none=True)
    threshold = fields.Float(load_default=None, allow_none=True, allow_nan=False)

    @validates_schema
    def validate_arguments(self, data, **kwargs):
        if data['kind'] == 'interaction' and data.get('column_b') is None:
            raise ValidationError('interaction needs column_b', 'column_b')
        if data['kind'] == 'indicator' and data.get('threshold') is None:
            raise ValidationError('indicator needs a threshold', 'threshold')

    @post_load
    def make_transform(self, data, **kwargs):
        return Transform(**data)


class BalanceSpecSchema(Schema):
    transforms = fields.Dict(keys=fields.Str(), values=fields.List(fields.Nested(TransformSchema)), required=True)
    delta_std = fields.Raw(load_default=0.01)
    intercept = fields.Bool(load_default=True)
    pool_on_last_treatment = fields.Bool(load_default=False)

    @validates('delta_std')
    def validate_delta(self, value, **kwargs):
        if isinstance(value, bool) or not isinstance(value, (int, float, dict)):
            raise ValidationError('delta_std must be a number or a {"t1": ...} mapping')

    @post_load
    def make_spec(self, data, **kwargs):
        transforms = _by_period(data['transforms'], 'transforms')
        delta = data['delta_std']
        if isinstance(delta, dict):
            delta = _by_period(delta, 'delta_std')
        try:
            return BalanceSpec(transforms=tuple(tuple(g) for g in transforms), delta_std=delta,
                               include_intercept_in_projection=data['intercept'],
                               pool_on_last_treatment=data['pool_on_last_treatment'])
        except (SpecificationError, TypeError, ValueError) as e:
            raise ValidationError(str(e))


class SolverOptionsSchema(Schema):
    eps = fields.Float(load_default=1e-8, validate=validate.Range(min=0, min_inclusive=False))
    max_iter = fields.Int(load_default=None, allow_none=True, validate=validate.Range(min=1))
    rho = fields.Float(load_default=0.1, validate=validate.Range(min=0, min_inclusive=False))
    sigma = fields.Float(load_default=1e-6, validate=validate.Range(min=0, min_inclusive=False))
    alpha = fields.Float(load_default=1.6, validate=validate.Range(min=0, max=2, min_inclusive=False,
                                                                   max_inclusive=False))
    polish_every = fields.Int(load_default=25, validate=validate.Range(min=1))
    feasibility_tol = fields.Float(load_default=1e-7, validate=validate.Range(min=0))
    ladder = fields.List(fields.Float(validate=validate.Range(min=0), allow_nan=False),
                         load_default=lambda: list(DEFAULT_LADDER))

    @validates('ladder')
    def validate_ladder(self, value, **kwargs):
        if not value:
            raise ValidationError('ladder must not be empty')
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValidationError('ladder must be strictly increasing')

    @post_load
    def make_options(self, data, **kwargs):
        return SolverOptions(**{**data, 'ladder': tuple(data['ladder'])})


class TuningSchema(Schema):
    candidates = fields.List(fields.Float(validate=validate.Range(min=0), allow_nan=False),
                             load_default=lambda: list(DEFAULT_CANDIDATES), validate=validate.Length(min=1))
    B = fields.Int(load_default=20, validate=validate.Range(min=2))
    enabled = fields.Bool(load_default=True)

    @post_load
    def make_tuning(self, data, **kwargs):
        return TuningConfig(candidates=tuple(data['candidates']), B=data['B'], enabled=data['enabled'])


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration of one CLI run."""
    data: str | None = None
    mapping: ColumnMapping | None = None
    spec: BalanceSpec | None = None
    msm: str = 'additive'
    solver: SolverOptions = field(default_factory=SolverOptions)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    bootstrap: int = 100
    seed: int | None = None
    threads: int = 1
    out: str | None = None

    def merge(self, **overrides):
        """Apply command-line values; None leaves the current value."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self):
        return {
            'data': self.data,
            'mapping': self.mapping.to_dict() if self.mapping else None,
            'spec': self.spec.to_dict() if self.spec else None,
            'msm': self.msm,
            'solver': self.solver.to_dict(),
            'tuning': self.tuning.to_dict(),
            'bootstrap': self.bootstrap,
            'seed': self.seed,
            'threads': self.threads,
            'out': self.out,
        }


class RunConfigSchema(Schema):
    data = fields.Str(load_default=None, allow_none=True)
    mapping = fields.Nested(ColumnMappingSchema, load_default=None, allow_none=True)
    spec = fields.Nested(BalanceSpecSchema, load_default=None, allow_none=True)
    msm = fields.Str(load_default='additive', validate=validate.OneOf(msm_presets))
    solver = fields.Nested(SolverOptionsSchema, load_default=None, allow_none=True)
    tuning = fields.Nested(TuningSchema, load_default=None, allow_none=True)
    bootstrap = fields.Int(load_default=100, validate=validate.Range(min=1))
    seed = fields.Int(load_default=None, allow_none=True)
    threads = fields.Int(load_default=1, validate=validate.Range(min=1))
    out = fields.Str(load_default=None, allow_none=True)

    @post_load
    def make_config(self, data, **kwargs):
        data['solver'] = data['solver'] or SolverOptions()
        data['tuning'] = data['tuning'] or TuningConfig()
        return RunConfig(**data)
