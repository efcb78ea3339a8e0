"""Reference estimators: unadjusted means, logistic IPW and ICE g-computation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special, stats

from config import make_rng
from errors import FitError, StructuralError
from estimate import fit_msm, percentile_ci
from features import apply_features
from panel import TreatmentPath, all_paths, build_strata

logger = logging.getLogger('bao.comparators')

ipw_modes = ('standard', 'stabilized', 'truncated')
ice_modes = ('pooled', 'stratified')

PROB_CLIP = 1e-12
SEPARATION_CAP = 30.0
GCOMP_TAG = 3
Z_975 = stats.norm.ppf(0.975)


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coef: np.ndarray
    converged: bool = True
    separated: bool = False
    iterations: int = 0
    gradient_norm: float = 0.0
    columns: tuple = ()

    def predict(self, X):
        return np.clip(special.expit(X @ self.coef), PROB_CLIP, 1.0 - PROB_CLIP)

    def to_dict(self):
        return {
            'coef': self.coef.tolist(),
            'converged': self.converged,
            'separated': self.separated,
            'iterations': self.iterations,
            'gradient_norm': self.gradient_norm,
            'columns': list(self.columns),
        }


def _nll(X, y, beta):
    eta = X @ beta
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta))


def fit_logistic(X, y, columns=(), max_iter=100, tol=1e-8, cap=SEPARATION_CAP):
    """Newton/IRLS with step halving.

    Converged once the mean-scaled gradient max-norm drops below tol and the
    Newton step has settled; coefficients leaving [-cap, cap] signal
    separation and are capped.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    columns = tuple(columns) or tuple(f'x{j}' for j in range(p))
    if n < p:
        raise FitError(f'{n} observations for {p} logistic regressors', columns=columns)
    if not np.isin(y, (0.0, 1.0)).all():
        raise FitError('logistic response must be 0/1')
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        _, _, piv = linalg.qr(X, mode='economic', pivoting=True)
        bad = tuple(columns[j] for j in sorted(piv[rank:]))
        raise FitError(f'singular information matrix; collinear columns: {", ".join(bad)}', columns=bad)

    beta = np.zeros(p)
    current = _nll(X, y, beta)
    grad_norm = math.inf
    for it in range(1, max_iter + 1):
        mu = special.expit(X @ beta)
        grad = X.T @ (mu - y) / n
        info = X.T @ (X * (mu * (1.0 - mu))[:, None]) / n
        try:
            step = linalg.cho_solve(linalg.cho_factor(info), grad)
        except linalg.LinAlgError:
            if np.abs(beta).max(initial=0.0) > 0.5 * cap:
                return _separated(beta, cap, it, grad, columns)
            raise FitError('singular information matrix in logistic fit', columns=columns)
        grad_norm = float(np.abs(grad).max())
        if grad_norm < tol and np.abs(step).max() < 1e-6 * (1.0 + np.abs(beta).max()):
            return LogisticFit(coef=beta, converged=True, iterations=it, gradient_norm=grad_norm, columns=columns)

        scale = 1.0
        candidate = beta - step
        trial = _nll(X, y, candidate)
        while trial > current + 1e-12 * abs(current) and scale > 1e-10:
            scale /= 2.0
            candidate = beta - scale * step
            trial = _nll(X, y, candidate)
        beta, current = candidate, trial

        if np.abs(beta).max() > cap:
            return _separated(beta, cap, it, grad, columns)

    logger.warning('logistic fit stopped after %d iterations (gradient %.3g)', max_iter, grad_norm)
    return LogisticFit(coef=beta, converged=False, iterations=max_iter, gradient_norm=grad_norm, columns=columns)


def _separated(beta, cap, it, grad, columns):
    logger.warning('separation in logistic fit; coefficients capped at +/-%g', cap)
    return LogisticFit(coef=np.clip(beta, -cap, cap), converged=False, separated=True, iterations=it,
                       gradient_norm=float(np.abs(grad).max()), columns=columns)


def denominator_design(data, t):
    """Intercept, previous treatment and current covariates; no treatment column at t = 1."""
    parts = [np.ones((data.n, 1))]
    if t > 1:
        parts.append(data.treatments[:, t - 2:t - 1].astype(float))
    parts.append(data.covariates[t - 1])
    return np.hstack(parts)


def numerator_design(data, t):
    """[1, Z_1, ..., Z_{t-1}]."""
    return np.hstack([np.ones((data.n, 1)), data.treatments[:, :t - 1].astype(float)])


def _names(data, t, denominator):
    names = ['intercept']
    if denominator:
        if t > 1:
            names.append(f'z{t - 1}')
        names.extend(data.covariate_labels[t - 1])
    else:
        names.extend(f'z{s}' for s in range(1, t))
    return tuple(names)


@dataclass(frozen=True, eq=False)
class PropensityModel:
    denominator: tuple
    numerator: tuple = ()

    @property
    def T(self):
        return len(self.denominator)

    def probabilities(self, data, t, stabilizing=False):
        """P(Z_t = 1 | history) for every unit."""
        if stabilizing:
            return self.numerator[t - 1].predict(numerator_design(data, t))
        return self.denominator[t - 1].predict(denominator_design(data, t))

    def to_dict(self):
        return {
            'denominator': [fit.to_dict() for fit in self.denominator],
            'numerator': [fit.to_dict() for fit in self.numerator],
        }


def fit_propensity(data, stabilize=True):
    denominator, numerator = [], []
    for t in range(1, data.T + 1):
        rows = data.observed_through(t)
        z = data.treatments[rows, t - 1]
        denominator.append(fit_logistic(denominator_design(data, t)[rows], z, _names(data, t, True)))
        if stabilize:
            numerator.append(fit_logistic(numerator_design(data, t)[rows], z, _names(data, t, False)))
    return PropensityModel(denominator=tuple(denominator), numerator=tuple(numerator))


def ipw_weights(data, model, mode='standard', quantile=0.95):
    """Inverse-probability weights; NaN for units censored before T.

    Truncated weights are the stabilized ones capped at their quantile.
    """
    if mode not in ipw_modes:
        raise ValueError(f'Unknown IPW mode {mode!r}. Must be one of: {ipw_modes}')
    observed = data.observed_through(data.T)
    weights = np.ones(data.n)
    for t in range(1, data.T + 1):
        z = data.treatments[:, t - 1]
        p = model.probabilities(data, t)
        weights /= np.where(z == 1, p, 1.0 - p)
        if mode != 'standard':
            q = model.probabilities(data, t, stabilizing=True)
            weights *= np.where(z == 1, q, 1.0 - q)
    weights = np.where(observed, weights, np.nan)
    if mode == 'truncated':
        cap = np.percentile(weights[observed], 100 * quantile)
        weights = np.minimum(weights, cap)
    return weights


@dataclass(frozen=True, eq=False)
class MsmEstimate:
    """Coefficients of an MSM with 95% intervals, as reported by one estimator."""
    design: object
    coef: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    se: np.ndarray | None = None
    path_weights: dict = field(default_factory=dict)

    def coefficients(self):
        return dict(zip(self.design.terms, self.coef.tolist()))

    def to_dict(self):
        se = self.se if self.se is not None else np.full(self.design.p, np.nan)
        return {
            'design': self.design.to_dict(),
            'coefficients': {
                term: {'estimate': float(c), 'se': float(s), 'ci': [float(a), float(b)]}
                for term, c, s, a, b in zip(self.design.terms, self.coef, se, self.ci_lower, self.ci_upper)
            },
        }


def _unit_design(data, design, rows):
    return np.vstack([design.row(tuple(z)) for z in data.treatments[rows]])


def ipw_msm(data, weights, design):
    """WLS of Y on each unit's path row; HC0 sandwich intervals, weights held fixed."""
    weights = np.asarray(weights, dtype=float)
    rows = np.flatnonzero(np.isfinite(weights) & data.observed_through(data.T))
    if (weights[rows] <= 0).any():
        raise FitError('IPW weights must be positive')
    X = _unit_design(data, design, rows)
    y = data.outcome[rows]
    w = weights[rows]
    rank = np.linalg.matrix_rank(X)
    if rank < design.p:
        _, _, piv = linalg.qr(X, mode='economic', pivoting=True)
        bad = tuple(design.terms[j] for j in sorted(piv[rank:]))
        raise FitError(f'MSM design is rank deficient; collinear columns: {", ".join(bad)}', columns=bad)

    sw = np.sqrt(w)
    coef = linalg.lstsq(X * sw[:, None], y * sw, lapack_driver='gelsy')[0]
    resid = y - X @ coef
    bread = linalg.inv(X.T @ (X * w[:, None]))
    score = X * (w * resid)[:, None]
    cov = bread @ (score.T @ score) @ bread
    se = np.sqrt(np.diag(cov))

    path_weights = {}
    for bits in {tuple(z) for z in data.treatments[rows]}:
        members = rows[(data.treatments[rows] == bits).all(axis=1)]
        path_weights[bits] = weights[members] / weights[members].sum()
    return MsmEstimate(design=design, coef=coef, ci_lower=coef - Z_975 * se, ci_upper=coef + Z_975 * se,
                       se=se, path_weights=path_weights)


def unadjusted_means(data):
    """Plain outcome means per full path; None for paths with no units."""
    observed = data.observed_through(data.T)
    means = {}
    for path in all_paths(data.T):
        rows = observed & (data.treatments == path.bits).all(axis=1)
        means[path] = float(data.outcome[rows].mean()) if rows.any() else None
    return means


def unadjusted_msm(data, design):
    return ipw_msm(data, np.ones(data.n), design)


def _ice_regressors(data, t, spec_blocks, pooled, z_bits=None):
    history = np.hstack(spec_blocks[:t])
    parts = [np.ones((data.n, 1)), history]
    if pooled:
        if z_bits is None:
            parts.append(data.treatments[:, :t].astype(float))
        else:
            parts.append(np.tile(np.array(z_bits[:t], dtype=float), (data.n, 1)))
    return np.hstack(parts)


def gcomp_ice(data, path, mode='pooled', spec=None):
    """Iterated conditional expectation estimate of E[Y(path)].

    Outcome models use the features of spec (raw covariates when spec is None).
    """
    if mode not in ice_modes:
        raise ValueError(f'Unknown ICE mode {mode!r}. Must be one of: {ice_modes}')
    if data.has_censoring:
        data = data.complete_cases()
    bits = path.bits if isinstance(path, TreatmentPath) else tuple(path)
    if spec is None:
        blocks = list(data.covariates)
    else:
        blocks = [block.values for block in apply_features(data, spec)]
    pooled = mode == 'pooled'

    q = data.outcome.copy()
    for t in range(data.T, 0, -1):
        if pooled:
            rows = np.arange(data.n)
        else:
            rows = np.flatnonzero((data.treatments[:, :t] == bits[:t]).all(axis=1))
            if rows.size == 0:
                raise StructuralError(f'no units follow {"".join(map(str, bits[:t]))} for the stratified fit at t={t}')
        X = _ice_regressors(data, t, blocks, pooled)
        coef = linalg.lstsq(X[rows], q[rows], lapack_driver='gelsy')[0]
        q = _ice_regressors(data, t, blocks, pooled, z_bits=bits) @ coef
    return float(q.mean())


def gcomp_msm(data, design, mode='pooled', B=100, seed=0, spec=None):
    """ICE path means fitted to the MSM, with percentile bootstrap intervals."""
    def point(sample):
        strata = build_strata(sample)
        means, counts = {}, {}
        for path in strata.realized_paths():
            try:
                means[path] = gcomp_ice(sample, path, mode, spec)
            except StructuralError:
                continue
            counts[path] = strata.count(path)
        return fit_msm(means, counts, design).coef

    coef = point(data)
    draws = []
    for b in range(B):
        idx = make_rng(seed, GCOMP_TAG, b).integers(0, data.n, size=data.n)
        try:
            draws.append(point(data.take(idx)))
        except (FitError, StructuralError) as e:
            logger.debug('g-computation bootstrap draw %d discarded: %s', b, e)
    draws = np.asarray(draws)
    if draws.shape[0] < 2:
        nan = np.full(design.p, np.nan)
        return MsmEstimate(design=design, coef=coef, ci_lower=nan, ci_upper=nan.copy(), se=nan.copy())
    bounds = np.array([percentile_ci(draws[:, j], coef[j]) for j in range(design.p)])
    return MsmEstimate(design=design, coef=coef, ci_lower=bounds[:, 0], ci_upper=bounds[:, 1],
                       se=draws.std(axis=0, ddof=1))
