"""Bootstrap selection of the standardized tolerance."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from config import make_rng, progress
from diagnostics import asmd_table
from errors import SpecificationError, TuningError
from weights import fit_weights

logger = logging.getLogger('bao.tune')

DEFAULT_CANDIDATES = (0.001, 0.01, 0.05)
MAX_INFEASIBILITY = 0.5

# Stream tags keep tuning resamples apart from bootstrap resamples
TUNE_TAG = 1
BOOTSTRAP_TAG = 2


def resample_indices(n, seed, tag, index):
    return make_rng(seed, tag, index).integers(0, n, size=n)


@dataclass(frozen=True)
class CandidateResult:
    delta: float
    imbalance: float
    infeasibility_rate: float
    cv: float
    resamples: int

    @property
    def eligible(self):
        return self.infeasibility_rate < MAX_INFEASIBILITY

    def to_dict(self):
        return {
            'delta': self.delta,
            'imbalance': self.imbalance,
            'infeasibility_rate': self.infeasibility_rate,
            'cv': self.cv,
            'resamples': self.resamples,
        }


@dataclass(frozen=True)
class TuningReport:
    candidates: tuple
    selected: float | None
    B: int
    seed: int
    extras: dict = field(default_factory=dict)

    def result_for(self, delta):
        for candidate in self.candidates:
            if candidate.delta == delta:
                return candidate
        raise KeyError(delta)

    def to_dict(self):
        return {
            'candidates': [c.to_dict() for c in self.candidates],
            'selected': self.selected,
            'B': self.B,
            'seed': self.seed,
        }


def imbalance_of(fit):
    """Mean feature-basis ASMD over every (t, feature, path) cell.

    Paths the solver could not balance keep uniform weights and contribute
    their pre-weighting ASMD.
    """
    weights = {}
    for path, problem in fit.problems.items():
        if path in fit.dropped:
            weights[path] = np.full(problem.m, 1.0 / problem.m)
        else:
            weights[path] = fit.solutions[path].weights
    table = asmd_table(fit.features, fit.strata, weights, basis='feature')
    dropped = {path.label for path in fit.dropped}
    values = [row.pre if row.path in dropped else row.post for row in table.rows]
    return float(np.mean(values))


def _evaluate(data, spec, delta, indices, options, censoring_aware):
    fit = fit_weights(data.take(indices), spec.with_delta(delta), options, ladder=(1.0,),
                      censoring_aware=censoring_aware, require_feasible=False)
    cvs = [fit.solutions[path].cv for path in fit.accepted]
    return imbalance_of(fit), bool(fit.dropped), float(np.mean(cvs)) if cvs else math.nan


def select_candidate(results):
    eligible = [r for r in results if r.eligible]
    if not eligible:
        return None
    return min(eligible, key=lambda r: (r.imbalance, r.delta)).delta


def tune_delta(data, spec, candidates=DEFAULT_CANDIDATES, B=20, seed=0, options=None,
               censoring_aware=False, n_jobs=1):
    candidates = tuple(float(c) for c in candidates)
    if not candidates:
        raise SpecificationError('tuning needs at least one candidate')
    if any(math.isnan(c) or c < 0 for c in candidates):
        raise SpecificationError('tuning candidates must be nonnegative')
    if B < 2:
        raise SpecificationError(f'tuning needs B >= 2 resamples, got {B}')

    resamples = [resample_indices(data.n, seed, TUNE_TAG, b) for b in range(B)]
    tasks = [(delta, b) for delta in candidates for b in range(B)]
    if n_jobs > 1:
        outcomes = Parallel(n_jobs=n_jobs, prefer='threads')(
            delayed(_evaluate)(data, spec, delta, resamples[b], options, censoring_aware)
            for delta, b in tasks)
    else:
        outcomes = [_evaluate(data, spec, delta, resamples[b], options, censoring_aware)
                    for delta, b in progress(tasks, desc='tune')]

    results = []
    for k, delta in enumerate(candidates):
        chunk = outcomes[k * B:(k + 1) * B]
        cvs = [cv for _, _, cv in chunk if not math.isnan(cv)]
        results.append(CandidateResult(
            delta=delta,
            imbalance=float(np.mean([imb for imb, _, _ in chunk])),
            infeasibility_rate=sum(infeasible for _, infeasible, _ in chunk) / B,
            cv=float(np.mean(cvs)) if cvs else math.nan,
            resamples=B,
        ))

    selected = select_candidate(results)
    report = TuningReport(candidates=tuple(results), selected=selected, B=B, seed=seed)
    if selected is None:
        raise TuningError('every tolerance candidate is infeasible on at least half of the resamples',
                          report=report)
    logger.info('selected delta %g (mean ASMD %.4f over %d resamples)',
                selected, report.result_for(selected).imbalance, B)
    return report
