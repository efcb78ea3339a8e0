"""Per-period covariate transforms and their scale statistics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import SpecificationError

logger = logging.getLogger('bao.features')

transform_kinds = ('identity', 'square', 'interaction', 'indicator')

# Below this SD a column is treated as constant within its stratum
DEGENERATE_SD = 1e-12


@dataclass(frozen=True)
class Transform:
    kind: str
    column: object
    column_b: object = None
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in transform_kinds:
            raise SpecificationError(f'Unknown transform {self.kind!r}. Must be one of: {transform_kinds}')
        if self.kind == 'interaction' and self.column_b is None:
            raise SpecificationError('interaction needs a second column')
        if self.kind == 'indicator' and self.threshold is None:
            raise SpecificationError('indicator needs a threshold')

    @staticmethod
    def _position(ref, labels, t):
        if isinstance(ref, (int, np.integer)) and not isinstance(ref, bool):
            if not 1 <= ref <= len(labels):
                raise SpecificationError(f'column {ref} does not exist at t={t} (P_t={len(labels)})')
            return int(ref) - 1
        if ref in labels:
            return labels.index(ref)
        raise SpecificationError(f'column {ref!r} does not exist at t={t}')

    def columns(self, labels, t):
        first = self._position(self.column, labels, t)
        if self.kind == 'interaction':
            return first, self._position(self.column_b, labels, t)
        return (first,)

    def label(self, labels, t):
        cols = [labels[i] for i in self.columns(labels, t)]
        if self.kind == 'identity':
            return cols[0]
        if self.kind == 'square':
            return f'{cols[0]}^2'
        if self.kind == 'interaction':
            return f'{cols[0]}*{cols[1]}'
        return f'1{{{cols[0]}>{self.threshold:g}}}'

    def evaluate(self, x, labels, t):
        cols = self.columns(labels, t)
        a = x[:, cols[0]]
        if self.kind == 'identity':
            return a.copy()
        if self.kind == 'square':
            return a * a
        if self.kind == 'interaction':
            return a * x[:, cols[1]]
        return np.where(np.isnan(a), np.nan, (a > self.threshold).astype(float))

    def to_dict(self):
        out = {'kind': self.kind, 'column': self.column}
        if self.column_b is not None:
            out['column_b'] = self.column_b
        if self.threshold is not None:
            out['threshold'] = self.threshold
        return out


@dataclass(frozen=True)
class BalanceSpec:
    transforms: tuple
    delta_std: tuple
    include_intercept_in_projection: bool = True
    pool_on_last_treatment: bool = False

    def __post_init__(self):
        transforms = tuple(tuple(group) for group in self.transforms)
        if not transforms:
            raise SpecificationError('BalanceSpec needs transforms for at least one period')
        if any(len(group) == 0 for group in transforms):
            raise SpecificationError('feature lists must be non-empty for every t')

        delta = self.delta_std
        if isinstance(delta, (int, float)):
            delta = [delta] * len(transforms)
        if len(delta) != len(transforms):
            raise SpecificationError(f'delta_std has {len(delta)} periods, transforms have {len(transforms)}')

        normalized = []
        for t, (group, d) in enumerate(zip(transforms, delta), start=1):
            d = tuple(float(v) for v in np.atleast_1d(d))
            if len(d) == 1:
                d = d * len(group)
            if len(d) != len(group):
                raise SpecificationError(f'delta_std at t={t} has {len(d)} entries for {len(group)} features')
            if any(math.isnan(v) or v < 0 for v in d):
                raise SpecificationError(f'delta_std at t={t} must be nonnegative')
            normalized.append(d)

        object.__setattr__(self, 'transforms', transforms)
        object.__setattr__(self, 'delta_std', tuple(normalized))

    @classmethod
    def identity(cls, P, delta=0.01, **options):
        """Linear specification: every raw covariate balanced as-is."""
        P = getattr(P, 'P', P)
        transforms = tuple(tuple(Transform('identity', p) for p in range(1, width + 1)) for width in P)
        return cls(transforms=transforms, delta_std=delta, **options)

    @property
    def T(self):
        return len(self.transforms)

    @property
    def K(self):
        return sum(len(group) for group in self.transforms)

    def with_delta(self, delta):
        return BalanceSpec(
            transforms=self.transforms,
            delta_std=float(delta),
            include_intercept_in_projection=self.include_intercept_in_projection,
            pool_on_last_treatment=self.pool_on_last_treatment,
        )

    def validate_against(self, data):
        if self.T != data.T:
            raise SpecificationError(f'spec covers {self.T} periods, data has {data.T}')
        for t, (group, labels) in enumerate(zip(self.transforms, data.covariate_labels), start=1):
            for transform in group:
                transform.columns(labels, t)

    def to_dict(self):
        return {
            'transforms': {f't{t}': [tr.to_dict() for tr in group]
                           for t, group in enumerate(self.transforms, start=1)},
            'delta_std': {f't{t}': list(d) for t, d in enumerate(self.delta_std, start=1)},
            'intercept': self.include_intercept_in_projection,
            'pool_on_last_treatment': self.pool_on_last_treatment,
        }


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    t: int
    values: np.ndarray
    labels: tuple

    @property
    def width(self):
        return self.values.shape[1]


def apply_features(data, spec):
    spec.validate_against(data)
    blocks = []
    for t, (group, x, labels) in enumerate(zip(spec.transforms, data.covariates, data.covariate_labels), start=1):
        values = np.column_stack([tr.evaluate(x, labels, t) for tr in group])
        blocks.append(FeatureMatrix(t=t, values=values, labels=tuple(tr.label(labels, t) for tr in group)))
    return blocks


def history(features, t):
    """Feature blocks 1..t side by side."""
    return np.hstack([block.values for block in features[:t]])


@dataclass(frozen=True, eq=False)
class StratumScale:
    sd: np.ndarray
    mean: np.ndarray
    size: int
    degenerate: np.ndarray


def _as_arrays(blocks):
    return [getattr(block, 'values', block) for block in blocks]


def feature_scales(blocks, strata):
    """SD (ddof=1) of each column of block t within every treatment-prefix stratum at t-1.

    Keys are (t, prefix) with prefix of length t-1.
    """
    scales = {}
    for t, values in enumerate(_as_arrays(blocks), start=1):
        for prefix, idx in strata.level(t - 1).items():
            sub = values[idx]
            size = idx.size
            mean = sub.mean(axis=0) if size else np.full(values.shape[1], np.nan)
            if size >= 2:
                sd = sub.std(axis=0, ddof=1)
                degenerate = sd <= DEGENERATE_SD * np.maximum(1.0, np.abs(mean))
            else:
                sd = np.full(values.shape[1], np.nan)
                degenerate = np.ones(values.shape[1], dtype=bool)
            scales[(t, prefix)] = StratumScale(sd=sd, mean=mean, size=size, degenerate=degenerate)
    return scales


def raw_tolerances(delta_std, scale):
    """Convert standardized tolerances to raw units for one stratum."""
    delta = np.asarray(delta_std, dtype=float)
    fallback = delta * np.maximum(np.abs(np.nan_to_num(scale.mean)), 1.0)
    with np.errstate(invalid='ignore'):
        raw = np.where(scale.degenerate, fallback, delta * np.nan_to_num(scale.sd))
    # inf * 0 stays inf so unlimited tolerances remain unlimited
    raw[np.isinf(delta)] = np.inf
    return raw
