"""BAO estimation: path means, marginal structural model, bootstrap."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from config import progress
from diagnostics import fit_balance
from errors import DataError, FitError, InfeasibleError, SpecificationError, StructuralError
from panel import all_paths
from qpsolve import SolverOptions
from tune import BOOTSTRAP_TAG, DEFAULT_CANDIDATES, resample_indices, tune_delta
from weights import check_balance, fit_weights

logger = logging.getLogger('bao.estimate')

msm_presets = ('additive', 'cumulative', 'switch', 'saturated')
DEFAULT_LADDER = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
REDRAW_FACTOR = 10


def _term_value(term, bits):
    if term == 'intercept':
        return 1.0
    if term == 'cumulative':
        return float(sum(bits))
    if term == 'switches':
        return float(sum(a != b for a, b in zip(bits, bits[1:])))
    if term.startswith('path_'):
        return float(''.join(map(str, bits)) == term[5:])
    if term.startswith('s'):
        t = int(term[1:])
        return float(bits[t - 1] != bits[t - 2])
    return float(bits[int(term[1:]) - 1])


@dataclass(frozen=True)
class MsmDesign:
    name: str
    terms: tuple
    T: int

    def __post_init__(self):
        for term in self.terms:
            if term in ('intercept', 'cumulative', 'switches'):
                continue
            if term.startswith('path_') and len(term) == 5 + self.T and set(term[5:]) <= {'0', '1'}:
                continue
            if term.startswith('z') and term[1:].isdigit() and 1 <= int(term[1:]) <= self.T:
                continue
            if term.startswith('s') and term[1:].isdigit() and 2 <= int(term[1:]) <= self.T:
                continue
            raise SpecificationError(f'Unknown MSM term {term!r} for T={self.T}')
        if len(set(self.terms)) != len(self.terms):
            raise SpecificationError('MSM terms must be distinct')

    @classmethod
    def preset(cls, name, T):
        if name == 'additive':
            terms = ('intercept',) + tuple(f'z{t}' for t in range(1, T + 1))
        elif name == 'cumulative':
            terms = ('intercept', 'cumulative')
        elif name == 'switch':
            terms = ('intercept', 'z1', 'switches')
        elif name == 'saturated':
            terms = tuple(f'path_{path.label}' for path in all_paths(T))
        else:
            raise SpecificationError(f'Unknown MSM design {name!r}. Must be one of: {msm_presets}')
        return cls(name=name, terms=terms, T=T)

    @property
    def saturated(self):
        return all(term.startswith('path_') for term in self.terms)

    @property
    def p(self):
        return len(self.terms)

    def row(self, path):
        bits = getattr(path, 'bits', path)
        return np.array([_term_value(term, bits) for term in self.terms])

    def matrix(self, paths):
        return np.vstack([self.row(path) for path in paths]) if paths else np.empty((0, self.p))

    def to_dict(self):
        return {'name': self.name, 'terms': list(self.terms), 'T': self.T}


@dataclass(frozen=True)
class PathMean:
    path: object
    mean: float | None
    count: int
    reason: str | None = None
    se: float = math.nan
    ci: tuple = (math.nan, math.nan)

    def to_dict(self):
        return {'mean': self.mean, 'count': self.count, 'reason': self.reason,
                'se': self.se, 'ci': list(self.ci)}


@dataclass(frozen=True, eq=False)
class MsmFit:
    design: MsmDesign
    coef: np.ndarray
    paths: tuple
    r2_adj: float
    se: np.ndarray | None = None
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None

    def coefficients(self):
        return dict(zip(self.design.terms, self.coef.tolist()))

    def predict(self, path):
        return float(self.design.row(path) @ self.coef)

    def to_dict(self):
        p = self.design.p
        se = self.se if self.se is not None else np.full(p, np.nan)
        lo = self.ci_lower if self.ci_lower is not None else np.full(p, np.nan)
        hi = self.ci_upper if self.ci_upper is not None else np.full(p, np.nan)
        return {
            'design': self.design.to_dict(),
            'paths': [path.label for path in self.paths],
            'r2_adj': self.r2_adj,
            'coefficients': {
                term: {'estimate': float(c), 'se': float(s), 'ci': [float(a), float(b)]}
                for term, c, s, a, b in zip(self.design.terms, self.coef, se, lo, hi)
            },
        }


def estimate_path_means(data, solutions):
    means = {}
    for path, sol in solutions.items():
        count = sol.members.size
        if not sol.optimal:
            means[path] = PathMean(path=path, mean=None, count=count, reason=sol.status)
            continue
        if sol.weights.size != count:
            raise StructuralError(f'{sol.weights.size} weights for {count} members of path {path}')
        y = data.outcome[sol.members]
        if not np.isfinite(y).all():
            raise StructuralError(f'outcome missing for members of path {path}')
        means[path] = PathMean(path=path, mean=float(sol.weights @ y), count=count)
    return means


def _collinear_columns(X, terms):
    _, _, piv = linalg.qr(X, mode='economic', pivoting=True)
    rank = np.linalg.matrix_rank(X)
    return tuple(terms[j] for j in sorted(piv[rank:]))


def fit_msm(path_means, prevalences, design):
    """Prevalence-weighted least squares of path means on the design."""
    paths = tuple(sorted((p for p, v in path_means.items() if v is not None), key=lambda p: p.bits))
    y = np.array([path_means[p] for p in paths], dtype=float)
    w = np.array([prevalences[p] for p in paths], dtype=float)
    X = design.matrix(paths)
    if len(paths) < design.p:
        raise FitError(f'{len(paths)} estimated paths for {design.p} MSM columns',
                       columns=_collinear_columns(X, design.terms) if paths else design.terms)
    if np.linalg.matrix_rank(X) < design.p:
        columns = _collinear_columns(X, design.terms)
        raise FitError(f'MSM design is rank deficient; collinear columns: {", ".join(columns)}', columns=columns)
    w = w / w.sum()

    if design.saturated:
        coef = X.T @ y
        fitted = y.copy()
    else:
        sw = np.sqrt(w)
        coef = linalg.lstsq(X * sw[:, None], y * sw, lapack_driver='gelsy')[0]
        fitted = X @ coef

    k, p = len(paths), design.p
    sst = w @ (y - w @ y) ** 2
    r2_adj = math.nan
    if k > p and sst > 0:
        r2 = 1.0 - (w @ (y - fitted) ** 2) / sst
        r2_adj = float(1.0 - (1.0 - r2) * (k - 1) / (k - p))
    return MsmFit(design=design, coef=coef, paths=paths, r2_adj=r2_adj)


def percentile_ci(draws, point, level=0.95):
    """Percentile interval (type 7), widened to contain the point estimate."""
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(draws, [100 * alpha, 100 * (1 - alpha)])
    return float(min(lo, point)), float(max(hi, point))


@dataclass(frozen=True)
class TuningConfig:
    candidates: tuple = DEFAULT_CANDIDATES
    B: int = 20
    enabled: bool = True

    def to_dict(self):
        return {'candidates': list(self.candidates), 'B': self.B, 'enabled': self.enabled}


@dataclass(frozen=True, eq=False)
class BaoResult:
    means: dict
    msm: MsmFit
    delta: object
    fit: object
    balance: object
    feature_balance: object
    tuning: object = None
    bootstrap: dict = field(default_factory=dict)

    @property
    def dropped(self):
        return self.fit.dropped

    def to_dict(self):
        return {
            'delta': self.delta,
            'means': {path.label: m.to_dict() for path, m in sorted(self.means.items(), key=lambda kv: kv[0].bits)},
            'msm': self.msm.to_dict(),
            'dropped': [path.label for path in self.fit.dropped],
            'weights': self.fit.to_dict(),
            'balance': self.balance.to_dict(),
            'feature_balance': self.feature_balance.to_dict(),
            'tuning': self.tuning.to_dict() if self.tuning is not None else None,
            'bootstrap': self.bootstrap,
        }


def _point_estimate(data, spec, design, options, ladder, censoring_aware, n_jobs=1):
    fit = fit_weights(data, spec, options, ladder, censoring_aware=censoring_aware, n_jobs=n_jobs)
    means = estimate_path_means(fit.data, {p: fit.solutions[p] for p in fit.accepted})
    counts = {p: fit.strata.count(p) for p in fit.accepted}
    msm = fit_msm({p: m.mean for p, m in means.items()}, counts, design)
    return fit, means, msm


def _bootstrap_draw(data, spec, design, options, ladder, censoring_aware, seed, draw):
    indices = resample_indices(data.n, seed, BOOTSTRAP_TAG, draw)
    try:
        _, means, msm = _point_estimate(data.take(indices), spec, design, options, ladder, censoring_aware)
    except (InfeasibleError, FitError, StructuralError) as e:
        logger.debug('bootstrap draw %d discarded: %s', draw, e)
        return None
    return {p: m.mean for p, m in means.items()}, msm.coef


def bootstrap(data, spec, design, B, seed, options=None, ladder=DEFAULT_LADDER, censoring_aware=False, n_jobs=1):
    """B valid resamples at fixed tolerance; failed draws are redrawn up to REDRAW_FACTOR * B times."""
    valid, draw, cap = [], 0, REDRAW_FACTOR * B
    bar = progress(total=B, desc='bootstrap')
    while len(valid) < B and draw < cap:
        batch = range(draw, min(draw + B - len(valid), cap))
        if n_jobs > 1:
            results = Parallel(n_jobs=n_jobs, prefer='threads')(
                delayed(_bootstrap_draw)(data, spec, design, options, ladder, censoring_aware, seed, d) for d in batch)
        else:
            results = [_bootstrap_draw(data, spec, design, options, ladder, censoring_aware, seed, d) for d in batch]
        for result in results:
            if result is not None and len(valid) < B:
                valid.append(result)
                bar.update(1)
        draw = batch.stop
    bar.close()
    if len(valid) < B:
        logger.warning('only %d of %d bootstrap resamples valid after %d draws', len(valid), B, draw)
    return valid, draw


def _summarize(point, draws):
    draws = np.asarray(draws, dtype=float)
    if draws.shape[0] < 2:
        return math.nan, (math.nan, math.nan)
    return float(draws.std(ddof=1)), percentile_ci(draws, point)


def run_bao(data, spec, design='additive', tuning=None, B=100, seed=0, options=None,
            ladder=DEFAULT_LADDER, n_jobs=1, censoring_aware=False):
    options = options or SolverOptions()
    tuning = tuning or TuningConfig()
    if isinstance(design, str):
        design = MsmDesign.preset(design, data.T)
    if design.T != data.T:
        raise SpecificationError(f'MSM design is for T={design.T}, data has T={data.T}')
    spec.validate_against(data)

    report = None
    if tuning.enabled:
        report = tune_delta(data, spec, tuning.candidates, tuning.B, seed, options,
                            censoring_aware=censoring_aware, n_jobs=n_jobs)
        spec = spec.with_delta(report.selected)
        delta = report.selected
    else:
        delta = [list(d) for d in spec.delta_std]

    fit, means, msm = _point_estimate(data, spec, design, options, ladder, censoring_aware, n_jobs)
    logger.info('weights solved for %d paths (%d dropped)', len(fit.accepted), len(fit.dropped))

    violations = check_balance(fit)
    worst = max(violations.values(), default=0.0)
    if worst > 1e-7:
        logger.warning('balance re-check failed: largest violation %.3g', worst)
    balance = fit_balance(fit, basis='residual')
    feature_balance = fit_balance(fit, basis='feature')

    valid, draws = bootstrap(data, spec, design, B, seed, options, ladder, censoring_aware, n_jobs)
    coef_draws = [coef for _, coef in valid]
    se = np.full(design.p, np.nan)
    lower = np.full(design.p, np.nan)
    upper = np.full(design.p, np.nan)
    for j in range(design.p):
        se[j], (lower[j], upper[j]) = _summarize(msm.coef[j], [c[j] for c in coef_draws])
    msm = MsmFit(design=design, coef=msm.coef, paths=msm.paths, r2_adj=msm.r2_adj,
                 se=se, ci_lower=lower, ci_upper=upper)

    summarized = {}
    for path, m in means.items():
        path_draws = [d[path] for d, _ in valid if d.get(path) is not None]
        s, ci = _summarize(m.mean, path_draws)
        summarized[path] = PathMean(path=path, mean=m.mean, count=m.count, se=s, ci=ci)
    for path in fit.dropped:
        summarized[path] = PathMean(path=path, mean=None, count=fit.strata.count(path), reason='infeasible')

    return BaoResult(
        means=summarized,
        msm=msm,
        delta=delta,
        fit=fit,
        balance=balance,
        feature_balance=feature_balance,
        tuning=report,
        bootstrap={'B': B, 'valid': len(valid), 'draws': draws, 'seed': seed},
    )


def run_bao_censored(data, spec, design='additive', tuning=None, B=100, seed=0, options=None,
                     ladder=DEFAULT_LADDER, n_jobs=1):
    """run_bao with projections, targets and weights restricted to uncensored units."""
    if not data.has_censoring:
        raise DataError('censoring-aware estimation needs a censoring matrix', field='censoring')
    return run_bao(data, spec, design, tuning, B, seed, options, ladder, n_jobs, censoring_aware=True)
