"""Residualization of each feature block on its history within treatment strata.

Period 1 features are kept as they are. Later features lose their least-squares
projection on an intercept plus the feature history, fitted separately within
each stratum of units sharing the same earlier treatments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg

from errors import StructuralError
from features import history

logger = logging.getLogger('bao.ortho')


@dataclass(frozen=True, eq=False)
class StratumFit:
    t: int
    group: tuple
    coef: np.ndarray
    rank: int
    rss: np.ndarray
    size: int
    fallback: str | None = None

    def to_dict(self):
        return {
            't': self.t,
            'group': ''.join(map(str, self.group)),
            'coef': self.coef.tolist(),
            'rank': self.rank,
            'rss': self.rss.tolist(),
            'size': self.size,
            'fallback': self.fallback,
        }


@dataclass(frozen=True, eq=False)
class ProjectionFit:
    fits: dict
    intercept: bool = True
    pooled: bool = False

    def get(self, t, prefix):
        fit = self.fits.get((t, tuple(prefix)))
        if fit is None:
            raise StructuralError(f'no projection fit for t={t}, prefix {"".join(map(str, prefix)) or "(root)"}')
        return fit


def regressors(features, t, idx, intercept=True):
    """Design (1, ḡ_{t-1}) restricted to rows idx."""
    h = history(features, t - 1)[idx]
    if intercept:
        return np.column_stack([np.ones(idx.size), h])
    return h


def _groups(strata, t, pooled):
    """Fitting sets at time t, keyed by the prefixes that share them."""
    level = strata.level(t - 1)
    if not pooled:
        return [((prefix,), prefix, idx) for prefix, idx in sorted(level.items())]
    groups = []
    for last in (0, 1):
        prefixes = tuple(p for p in sorted(level) if p[-1] == last)
        if prefixes:
            idx = np.sort(np.concatenate([level[p] for p in prefixes]))
            groups.append((prefixes, (last,), idx))
    return groups


def _fit_group(features, t, group, idx, intercept):
    design = regressors(features, t, idx, intercept)
    target = features[t - 1].values[idx]
    n_reg = design.shape[1]

    if idx.size < 2:
        logger.warning('stratum %s at t=%d has %d unit(s); projection set to zero',
                       ''.join(map(str, group)), t, idx.size)
        coef = np.zeros((n_reg, target.shape[1]))
        rss = (target ** 2).sum(axis=0)
        return StratumFit(t=t, group=group, coef=coef, rank=0, rss=rss, size=idx.size, fallback='zero')

    coef, _, rank, _ = linalg.lstsq(design, target, lapack_driver='gelsy')
    resid = target - design @ coef
    fallback = None
    if idx.size < n_reg + 1:
        fallback = 'min_norm'
        logger.info('stratum %s at t=%d has %d units for %d regressors; using minimum-norm fit',
                    ''.join(map(str, group)), t, idx.size, n_reg)
    return StratumFit(t=t, group=group, coef=coef, rank=int(rank),
                      rss=(resid ** 2).sum(axis=0), size=idx.size, fallback=fallback)


def fit_projections(features, strata, censoring_aware=False, data=None, intercept=True,
                    pool_on_last_treatment=False):
    """Least-squares projections of each feature block on the feature history, per stratum.

    With censoring_aware, the fitting set at t is restricted to units with
    C_{t-1} = 0 (taken from data).
    """
    fits = {}
    for t in range(2, len(features) + 1):
        for prefixes, group, idx in _groups(strata, t, pool_on_last_treatment):
            if censoring_aware and data is not None and data.has_censoring:
                idx = idx[data.observed_through(t - 1)[idx]]
            if idx.size == 0:
                raise StructuralError(
                    f'empty fitting stratum at t={t} for prefix {"".join(map(str, group))}')
            fit = _fit_group(features, t, group, idx, intercept)
            for prefix in prefixes:
                fits[(t, prefix)] = fit
    return ProjectionFit(fits=fits, intercept=intercept, pooled=pool_on_last_treatment)


@dataclass(frozen=True, eq=False)
class ResidualSet:
    values: list
    labels: list
    targets: dict

    @property
    def T(self):
        return len(self.values)

    def target(self, path, t):
        bits = getattr(path, 'bits', path)
        return self.targets[(t, tuple(bits[:t - 1]))]

    def to_frame(self, ids):
        frames = []
        for t, (values, labels) in enumerate(zip(self.values, self.labels), start=1):
            rows, cols = np.nonzero(np.isfinite(values))
            frames.append(pd.DataFrame({
                'unit_id': np.asarray(ids)[rows],
                't': t,
                'feature': np.asarray(labels, dtype=object)[cols],
                'residual': values[rows, cols],
            }))
        return pd.concat(frames, ignore_index=True)


def compute_residuals(features, fits, strata):
    n = features[0].values.shape[0]
    values = [features[0].values.copy()]
    for t in range(2, len(features) + 1):
        g = features[t - 1].values
        resid = np.full(g.shape, np.nan)
        for prefix, idx in strata.level(t - 1).items():
            fit = fits.get(t, prefix)
            design = regressors(features, t, idx, fits.intercept)
            if fit.coef.shape[0] != design.shape[1]:
                raise StructuralError(f'fit for t={t} has {fit.coef.shape[0]} rows, design has {design.shape[1]}')
            resid[idx] = g[idx] - design @ fit.coef
        values.append(resid)

    targets = {}
    for t, r in enumerate(values, start=1):
        for prefix, idx in strata.level(t - 1).items():
            targets[(t, prefix)] = r[idx].mean(axis=0)

    logger.debug('residuals computed for n=%d over %d periods', n, len(values))
    return ResidualSet(values=values, labels=[block.labels for block in features], targets=targets)
