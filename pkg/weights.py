"""Balancing-weight fits: residualize, assemble one QP per path, solve.

This is the part of the pipeline shared by estimation, tuning and the
bootstrap: given data and a BalanceSpec it produces per-path weights that
balance the orthogonalized features within tolerance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import InfeasibleError, StructuralError
from features import apply_features, feature_scales, raw_tolerances
from ortho import compute_residuals, fit_projections
from panel import build_strata
from qpsolve import QpProblem, SolverOptions, relax_to_feasible

logger = logging.getLogger('bao.weights')

BALANCE_TOL = 1e-7


@dataclass(frozen=True, eq=False)
class WeightFit:
    data: object
    spec: object
    features: list
    strata: object
    fits: object
    residuals: object
    problems: dict
    solutions: dict
    multipliers: dict
    dropped: tuple

    @property
    def accepted(self):
        return [path for path in self.problems if path not in self.dropped]

    def weights(self):
        return {path: self.solutions[path].weights for path in self.accepted}

    def tolerances(self):
        """Raw tolerances actually enforced, after any ladder relaxation."""
        return {path: self.problems[path].delta * self.multipliers[path] for path in self.accepted}

    def weights_frame(self):
        rows = []
        for path in self.accepted:
            sol = self.solutions[path]
            rows.append(pd.DataFrame({
                'unit_id': self.data.ids[sol.members],
                'path': path.label,
                'weight': sol.weights,
            }))
        if not rows:
            return pd.DataFrame(columns=['unit_id', 'path', 'weight'])
        return pd.concat(rows, ignore_index=True)

    def to_dict(self):
        return {
            'paths': {
                path.label: {
                    **self.solutions[path].to_dict(),
                    'count': self.strata.count(path),
                    'multiplier': self.multipliers.get(path),
                    'dropped': path in self.dropped,
                }
                for path in self.problems
            },
            'strata': self.strata.to_dict(),
        }


def build_problems(data, features, residuals, strata, spec):
    """One QpProblem per realized full path."""
    scales = feature_scales(residuals.values, strata)
    problems = {}
    for path in strata.realized_paths():
        members = strata.get(path.bits)
        blocks, targets, deltas, labels = [], [], [], []
        for t in range(1, data.T + 1):
            block = residuals.values[t - 1][members]
            if not np.isfinite(block).all():
                raise StructuralError(f'residuals at t={t} undefined for members of path {path}')
            scale = scales[(t, path.prefix(t - 1))]
            blocks.append(block.T)
            targets.append(residuals.target(path, t))
            deltas.append(raw_tolerances(spec.delta_std[t - 1], scale))
            labels.extend(f't{t}:{label}' for label in residuals.labels[t - 1])
        problems[path] = QpProblem(
            path=path,
            members=members,
            A=np.vstack(blocks),
            b=np.concatenate(targets),
            delta=np.concatenate(deltas),
            row_labels=tuple(labels),
        )
    return problems


def fit_weights(data, spec, options=None, ladder=None, censoring_aware=False, n_jobs=1,
                require_feasible=True):
    options = options or SolverOptions()
    ladder = tuple(ladder or options.ladder)
    if data.has_censoring and not censoring_aware:
        data = data.complete_cases()

    features = apply_features(data, spec)
    strata = build_strata(data)
    fits = fit_projections(features, strata, censoring_aware=censoring_aware, data=data,
                           intercept=spec.include_intercept_in_projection,
                           pool_on_last_treatment=spec.pool_on_last_treatment)
    residuals = compute_residuals(features, fits, strata)
    problems = build_problems(data, features, residuals, strata, spec)
    if not problems:
        raise StructuralError('no realized treatment paths to weight')

    paths = list(problems)
    if n_jobs > 1 and len(paths) > 1:
        solved = Parallel(n_jobs=n_jobs, prefer='threads')(
            delayed(relax_to_feasible)(problems[path], ladder, options) for path in paths)
    else:
        solved = [relax_to_feasible(problems[path], ladder, options) for path in paths]

    solutions, multipliers, dropped = {}, {}, []
    for path, (multiplier, solution) in zip(paths, solved):
        solutions[path] = solution
        multipliers[path] = multiplier
        if multiplier is None:
            dropped.append(path)
    if dropped:
        logger.warning('dropping paths without feasible weights: %s',
                       ', '.join(p.label for p in dropped))
    if require_feasible and len(dropped) == len(paths):
        raise InfeasibleError('every treatment path is infeasible', paths=tuple(p.label for p in dropped))

    return WeightFit(data=data, spec=spec, features=features, strata=strata, fits=fits,
                     residuals=residuals, problems=problems, solutions=solutions,
                     multipliers=multipliers, dropped=tuple(dropped))


def check_balance(fit, tol=BALANCE_TOL):
    """Largest constraint violation per accepted path (0 when balanced)."""
    report = {}
    for path in fit.accepted:
        problem, sol = fit.problems[path], fit.solutions[path]
        delta = problem.delta * fit.multipliers[path]
        gap = np.abs(problem.A @ sol.weights - problem.b) - delta
        excess = float(np.max(gap[np.isfinite(delta)], initial=0.0))
        report[path] = max(excess, 0.0)
        if excess > tol:
            logger.warning('path %s violates balance by %.3g', path, excess)
    return report
