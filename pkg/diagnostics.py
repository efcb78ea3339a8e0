"""Balance and weight diagnostics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from features import DEGENERATE_SD

logger = logging.getLogger('bao.diagnostics')

ASMD_THRESHOLD = 0.2
bases = ('feature', 'residual')


@dataclass(frozen=True)
class BalanceRow:
    t: int
    feature: str
    path: str
    pre: float
    post: float
    difference: float
    delta_raw: float | None
    satisfied: bool | None
    degenerate: bool

    def to_dict(self):
        return {
            't': self.t,
            'feature': self.feature,
            'path': self.path,
            'asmd_pre': self.pre,
            'asmd_post': self.post,
            'difference': self.difference,
            'delta_raw': self.delta_raw,
            'satisfied': self.satisfied,
            'degenerate': self.degenerate,
        }


@dataclass(frozen=True, eq=False)
class BalanceTable:
    rows: tuple
    basis: str = 'feature'

    def __len__(self):
        return len(self.rows)

    def to_frame(self):
        columns = ['t', 'feature', 'path', 'asmd_pre', 'asmd_post', 'difference',
                   'delta_raw', 'satisfied', 'degenerate']
        return pd.DataFrame([row.to_dict() for row in self.rows], columns=columns)

    def max_post(self):
        return max((row.post for row in self.rows), default=0.0)

    def mean_post(self):
        return float(np.mean([row.post for row in self.rows])) if self.rows else 0.0

    def mean_pre(self):
        return float(np.mean([row.pre for row in self.rows])) if self.rows else 0.0

    def flagged(self, threshold=ASMD_THRESHOLD):
        return [row for row in self.rows if row.post > threshold]

    def for_path(self, label):
        return [row for row in self.rows if row.path == label]

    def to_dict(self):
        return {'basis': self.basis, 'rows': [row.to_dict() for row in self.rows]}


def _standardize(diff, sd, mean):
    if not math.isfinite(sd) or sd <= DEGENERATE_SD * max(1.0, abs(mean)):
        return abs(diff), True
    return abs(diff) / sd, False


def asmd_table(features, strata, weights, basis='feature', residuals=None, tolerances=None):
    """ASMD of every (t, feature, path) cell before and after weighting.

    weights maps TreatmentPath -> weight vector over that path's members.
    The residual basis needs the ResidualSet (its targets are the reference)
    and optionally the raw tolerances per path for the satisfied flag.
    """
    if basis not in bases:
        raise ValueError(f'Unknown basis {basis!r}. Must be one of: {bases}')
    if basis == 'residual':
        if residuals is None:
            raise ValueError('residual basis needs the ResidualSet')
        blocks, labels = residuals.values, residuals.labels
    else:
        blocks = [block.values for block in features]
        labels = [block.labels for block in features]

    path_means = {
        path: [w @ block[strata.get(path.bits)] for block in blocks]
        for path, w in weights.items()
    }

    rows = []
    for path, w in weights.items():
        members = strata.get(path.bits)
        if members.size != w.size:
            raise ValueError(f'{w.size} weights for {members.size} members of path {path}')
        offset = 0
        for t, (block, names) in enumerate(zip(blocks, labels), start=1):
            prefix = path.prefix(t - 1)
            parent = strata.get(prefix)
            sub = block[parent]
            sd = sub.std(axis=0, ddof=1) if parent.size >= 2 else np.full(block.shape[1], np.nan)
            parent_mean = sub.mean(axis=0)
            raw_pre = block[members].mean(axis=0)
            raw_post = path_means[path][t - 1]

            if basis == 'residual':
                ref_pre = ref_post = residuals.target(path, t)
            else:
                siblings = [q for q in weights if q.prefix(t - 1) == prefix]
                prevalence = np.array([strata.count(q) for q in siblings], dtype=float)
                ref_pre = parent_mean
                ref_post = prevalence @ np.array([path_means[q][t - 1] for q in siblings]) / prevalence.sum()

            for p, name in enumerate(names):
                pre, degenerate = _standardize(raw_pre[p] - ref_pre[p], sd[p], parent_mean[p])
                diff = float(raw_post[p] - ref_post[p])
                post, _ = _standardize(diff, sd[p], parent_mean[p])
                delta_raw = satisfied = None
                if basis == 'residual' and tolerances is not None:
                    delta_raw = float(tolerances[path][offset + p])
                    satisfied = bool(abs(diff) <= delta_raw + 1e-7)
                rows.append(BalanceRow(t=t, feature=name, path=path.label, pre=float(pre), post=float(post),
                                       difference=diff, delta_raw=delta_raw, satisfied=satisfied,
                                       degenerate=degenerate))
            offset += len(names)
    return BalanceTable(rows=tuple(rows), basis=basis)


def weight_summary(weights):
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    mean = w.mean()
    return {
        'cv': float(w.std() / mean) if mean > 0 else math.nan,
        'ess': float(total * total / (w @ w)),
        'max_weight': float(w.max()),
    }


def fit_balance(fit, basis='residual'):
    """Balance table for a WeightFit over its accepted paths."""
    table = asmd_table(fit.features, fit.strata, fit.weights(), basis=basis,
                       residuals=fit.residuals, tolerances=fit.tolerances())
    flagged = table.flagged()
    if flagged:
        logger.warning('%d %s-basis cells above ASMD %.1f after weighting (max %.3f)',
                       len(flagged), basis, ASMD_THRESHOLD, table.max_post())
    return table
