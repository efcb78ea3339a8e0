"""Simulation studies: data generators, true parameters and the replication harness."""
from __future__ import annotations

import functools
import io
import logging
import math
import time
from dataclasses import dataclass, field

import matplotlib
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from matplotlib.figure import Figure
from scipy import linalg, special

from comparators import fit_propensity, gcomp_msm, ipw_msm, ipw_weights, unadjusted_msm
from config import atomic_write, make_rng, progress
from diagnostics import asmd_table, weight_summary
from errors import BaoError, SpecificationError
from estimate import MsmDesign, TuningConfig, run_bao
from features import BalanceSpec, apply_features
from panel import PanelDataset, TreatmentPath, all_paths, build_strata

logger = logging.getLogger('bao.simlab')

studies = (1, 2, 3)
STUDY_T = {1: 2, 2: 3, 3: 2}
STUDY_DESIGN = {1: 'additive', 2: 'cumulative', 3: 'additive'}
STUDY_NOISE = {1: 5.0, 2: 5.0, 3: 1.0}
TRUTH_DRAWS = 10 ** 7
TRUTH_CHUNK = 10 ** 6
TRUTH_TAG = 7

_PROPENSITY_SLOPES = np.array([1.0, -0.5, 0.25, 0.1])
_OUTCOME_SLOPES = np.array([27.4, 13.7, 13.7, 13.7])
_HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)


def _treat(rng_u, lin, t, forced):
    if forced is not None:
        return np.full(lin.shape[0], forced[t - 1], dtype=np.int8)
    return (rng_u < special.expit(lin)).astype(np.int8)


def clamp(x, a):
    """min{a, max(-a, x)}."""
    return np.minimum(a, np.maximum(-a, x))


def _simulate_study1(n, rng, noise_sd, forced=None):
    x0 = rng.standard_normal((n, 2, 4))
    u = rng.random((n, 2))
    eps = rng.standard_normal(n)

    covariates, z = [], np.zeros((n, 2), dtype=np.int8)
    z_prev = np.zeros(n)
    for t in (1, 2):
        scale = np.ones(n) if t == 1 else (2.0 * z[:, 0] + 5.0) / 3.0
        x = scale[:, None] * x0[:, t - 1]
        x[:, 2:] = np.abs(x[:, 2:])
        lin = -z_prev + x @ _PROPENSITY_SLOPES + (-0.5) ** t
        z[:, t - 1] = _treat(u[:, t - 1], lin, t, forced)
        z_prev = z[:, t - 1]
        covariates.append(x)

    y = 250.0 - 10.0 * z.sum(axis=1) + sum(x @ _OUTCOME_SLOPES for x in covariates) + noise_sd * eps
    return covariates, z, y


def _simulate_study2(n, rng, noise_sd, forced=None):
    latent = rng.uniform(1.0, 5.0, n)
    x0 = rng.standard_normal((n, 3, 4))
    u = rng.random((n, 3))
    eps = rng.standard_normal(n)

    covariates, z = [], np.zeros((n, 3), dtype=np.int8)
    for t in (1, 2, 3):
        e = x0[:, t - 1] / latent[:, None]
        if t == 1:
            x = e.copy()
            x[:, 2:] = np.abs(x[:, 2:])
            z_prev = np.zeros(n)
        else:
            prev = covariates[-1]
            z_prev = z[:, t - 2].astype(float)
            x = np.empty_like(prev)
            x[:, :2] = prev[:, :2] + e[:, :2] + z_prev[:, None]
            x[:, 2:] = prev[:, 2:] + clamp(e[:, 2:], prev[:, 2:]) + z_prev[:, None]
        lin = -z_prev + x @ _PROPENSITY_SLOPES + (-0.5) ** t
        z[:, t - 1] = _treat(u[:, t - 1], lin, t, forced)
        covariates.append(x)

    y = (250.0 - 10.0 * z[:, :2].sum(axis=1) + 58.5 * z[:, 2]
         + covariates[2] @ _OUTCOME_SLOPES + latent + noise_sd * eps)
    return covariates, z, y


_STUDY3_COV = np.linalg.cholesky(np.array([[2.0, 1.0], [1.0, 1.0]]))


def _simulate_study3(n, rng, noise_sd, forced=None):
    x1 = np.empty((n, 4))
    x1[:, :2] = rng.standard_normal((n, 2)) @ _STUDY3_COV.T
    x1[:, 2] = rng.standard_normal(n) ** 2
    x1[:, 3] = rng.random(n) < 0.5
    x2 = np.empty((n, 4))
    x2[:, :2] = x1[:, :2] + 0.1 + rng.standard_normal((n, 2))
    # Noncentral chi-square with one degree of freedom and noncentrality X_13
    x2[:, 2] = (np.sqrt(x1[:, 2]) + rng.standard_normal(n)) ** 2
    x2[:, 3] = rng.random(n) < special.expit(x1[:, 3])
    u = rng.random((n, 2))
    eps = rng.standard_normal(n)

    z = np.zeros((n, 2), dtype=np.int8)
    z[:, 0] = _treat(u[:, 0], x1[:, 0] + 2 * x1[:, 1] - 0.5 * x1[:, 2] + x1[:, 3], 1, forced)
    z[:, 1] = _treat(u[:, 1], 2 * z[:, 0] + x2[:, 0] + 2 * x2[:, 1] - 0.5 * x2[:, 2] + x2[:, 3], 2, forced)
    y = x1[:, :3].sum(axis=1) ** 2 + x2[:, :3].sum(axis=1) ** 2 + noise_sd * eps
    return [x1, x2], z, y


_SIMULATORS = {1: _simulate_study1, 2: _simulate_study2, 3: _simulate_study3}


def _dataset(covariates, z, y):
    n = y.shape[0]
    return PanelDataset(ids=np.arange(1, n + 1).astype(str), covariates=tuple(covariates),
                        treatments=z, outcome=y)


def gen_study1(n, rng, noise_sd=STUDY_NOISE[1]):
    return _dataset(*_simulate_study1(n, rng, noise_sd))


def gen_study2(n, rng, noise_sd=STUDY_NOISE[2]):
    return _dataset(*_simulate_study2(n, rng, noise_sd))


def gen_study3(n, rng, noise_sd=STUDY_NOISE[3]):
    return _dataset(*_simulate_study3(n, rng, noise_sd))


GENERATORS = {1: gen_study1, 2: gen_study2, 3: gen_study3}


def generate(study, n, seed, replicate):
    """Replicate r's dataset; depends only on (seed, study, n, r)."""
    if study not in GENERATORS:
        raise SpecificationError(f'Unknown study {study!r}. Must be one of: {studies}')
    return GENERATORS[study](n, make_rng(seed, study, n, replicate))


def add_mar_censoring(data, rng, intercept=-2.0):
    """Monotone censoring with hazard expit(intercept + X_t1) among units still observed."""
    censored = np.zeros(data.n, dtype=bool)
    C = np.zeros((data.n, data.T), dtype=np.int8)
    for t in range(1, data.T + 1):
        hazard = special.expit(intercept + data.covariates[t - 1][:, 0])
        censored |= rng.random(data.n) < hazard
        C[:, t - 1] = censored
    outcome = np.where(censored, np.nan, data.outcome)
    return data.with_censoring(C).with_outcome(outcome)


@dataclass(frozen=True, eq=False)
class TruthOracle:
    study: int
    design: MsmDesign
    coef: np.ndarray
    method: str
    mc_se: np.ndarray | None = None
    path_means: dict = field(default_factory=dict)
    closed_form: np.ndarray | None = None
    draws: int = 0

    def coefficients(self):
        return dict(zip(self.design.terms, self.coef.tolist()))

    def to_dict(self):
        return {
            'study': self.study,
            'design': self.design.to_dict(),
            'method': self.method,
            'coefficients': self.coefficients(),
            'mc_se': None if self.mc_se is None else dict(zip(self.design.terms, self.mc_se.tolist())),
            'closed_form': None if self.closed_form is None else dict(zip(self.design.terms, self.closed_form.tolist())),
            'path_means': {path.label: value for path, value in self.path_means.items()},
            'draws': self.draws,
        }


def closed_form_truth(study):
    if study == 1:
        per_period = 2 * 13.7 * _HALF_NORMAL_MEAN
        return np.array([250.0 + per_period * (1.0 + 5.0 / 3.0), per_period * 2.0 / 3.0 - 10.0, -10.0])
    if study == 2:
        return np.array([253.0 + 27.4 * _HALF_NORMAL_MEAN * math.log(5.0) / 4.0, 58.5])
    if study == 3:
        return np.array([27.84, 0.0, 0.0])
    raise SpecificationError(f'Unknown study {study!r}. Must be one of: {studies}')


def forced_path_mean(study, path, draws=TRUTH_DRAWS, seed=0, chunk=TRUTH_CHUNK):
    """Monte Carlo E[Y(path)] with its standard error."""
    simulate = _SIMULATORS[study]
    total = total_sq = 0.0
    done, k = 0, 0
    code = int(''.join(map(str, path.bits)), 2)
    while done < draws:
        size = min(chunk, draws - done)
        _, _, y = simulate(size, make_rng(seed, TRUTH_TAG, study, code, k), STUDY_NOISE[study], forced=path.bits)
        total += y.sum()
        total_sq += (y ** 2).sum()
        done += size
        k += 1
    mean = total / draws
    var = max(total_sq / draws - mean * mean, 0.0)
    return mean, math.sqrt(var / draws)


@functools.lru_cache(maxsize=None)
def true_params(study, draws=TRUTH_DRAWS, seed=0):
    design = MsmDesign.preset(STUDY_DESIGN[study], STUDY_T[study])
    closed = closed_form_truth(study)
    if study == 1:
        return TruthOracle(study=study, design=design, coef=closed, method='closed_form', closed_form=closed)

    paths = all_paths(STUDY_T[study])
    means, ses = [], []
    for path in paths:
        mean, se = forced_path_mean(study, path, draws, seed)
        means.append(mean)
        ses.append(se)
    X = design.matrix(paths)
    hat = linalg.pinv(X)
    coef = hat @ np.array(means)
    mc_se = np.sqrt((hat ** 2) @ np.array(ses) ** 2)
    logger.info('study %d truth by %d forced-path draws: %s', study, draws,
                ', '.join(f'{c:.3f}' for c in coef))
    return TruthOracle(study=study, design=design, coef=coef, method='monte_carlo', mc_se=mc_se,
                       path_means=dict(zip(paths, means)), closed_form=closed, draws=draws)


@dataclass(frozen=True)
class StudyConfig:
    study: int
    n: int
    reps: int = 1
    seed: int = 0
    methods: tuple = ('bao',)
    design: str | None = None
    bootstrap: int = 100
    tuning: TuningConfig = TuningConfig()
    truth_draws: int = TRUTH_DRAWS
    n_jobs: int = 1

    def __post_init__(self):
        if self.study not in studies:
            raise SpecificationError(f'Unknown study {self.study!r}. Must be one of: {studies}')
        if self.n < 50:
            raise SpecificationError(f'n must be at least 50, got {self.n}')
        if self.reps < 1:
            raise SpecificationError(f'reps must be at least 1, got {self.reps}')
        unknown = [m for m in self.methods if m not in ESTIMATORS]
        if unknown:
            raise SpecificationError(f'Unknown methods {unknown}. Must be among: {sorted(ESTIMATORS)}')

    @property
    def design_name(self):
        return self.design or STUDY_DESIGN[self.study]

    def to_dict(self):
        return {
            'study': self.study,
            'n': self.n,
            'reps': self.reps,
            'seed': self.seed,
            'methods': list(self.methods),
            'design': self.design_name,
            'bootstrap': self.bootstrap,
            'tuning': self.tuning.to_dict(),
            'truth_draws': self.truth_draws,
        }


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    coef: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    path_weights: dict = field(default_factory=dict)


ESTIMATORS = {}


def register(name):
    def wrap(fn):
        ESTIMATORS[name] = fn
        return fn
    return wrap


@register('bao')
def _bao(data, design, config, seed):
    spec = BalanceSpec.identity(data.P)
    result = run_bao(data, spec, design, tuning=config.tuning, B=config.bootstrap, seed=seed)
    msm = result.msm
    weights = {path.bits: w for path, w in result.fit.weights().items()}
    return EstimatorOutput(coef=msm.coef, ci_lower=msm.ci_lower, ci_upper=msm.ci_upper, path_weights=weights)


def _from_estimate(estimate):
    return EstimatorOutput(coef=estimate.coef, ci_lower=estimate.ci_lower, ci_upper=estimate.ci_upper,
                           path_weights=estimate.path_weights)


@register('gpool')
def _gpool(data, design, config, seed):
    return _from_estimate(gcomp_msm(data, design, 'pooled', B=config.bootstrap, seed=seed))


@register('gstrat')
def _gstrat(data, design, config, seed):
    return _from_estimate(gcomp_msm(data, design, 'stratified', B=config.bootstrap, seed=seed))


def _ipw(mode):
    def estimator(data, design, config, seed):
        model = fit_propensity(data, stabilize=mode != 'standard')
        return _from_estimate(ipw_msm(data, ipw_weights(data, model, mode), design))
    return estimator


register('lr')(_ipw('standard'))
register('lr-stab')(_ipw('stabilized'))
register('lr-trunc')(_ipw('truncated'))


@register('unadj')
def _unadj(data, design, config, seed):
    return _from_estimate(unadjusted_msm(data, design))


def imbalance_and_cv(data, path_weights):
    """Mean feature ASMD (before and after weighting) and weight CV per path."""
    strata = build_strata(data)
    features = apply_features(data, BalanceSpec.identity(data.P))
    weights = {}
    for bits, w in path_weights.items():
        path = TreatmentPath(bits)
        if strata.count(path) == w.size:
            weights[path] = w / w.sum()
    if not weights:
        return []
    table = asmd_table(features, strata, weights, basis='feature')
    rows = []
    for path, w in weights.items():
        cells = table.for_path(path.label)
        rows.append({
            'path': path.label,
            'asmd_pre': float(np.mean([c.pre for c in cells])),
            'asmd': float(np.mean([c.post for c in cells])),
            'cv': weight_summary(w)['cv'],
        })
    return rows


def replicate_seed(seed, study, n, replicate):
    return int(np.random.SeedSequence([seed, study, n, replicate, 1]).generate_state(1)[0])


def _run_one(config, design, replicate):
    data = generate(config.study, config.n, config.seed, replicate)
    seed = replicate_seed(config.seed, config.study, config.n, replicate)
    outputs = {}
    for method in config.methods:
        try:
            out = ESTIMATORS[method](data, design, config, seed)
            outputs[method] = (out, imbalance_and_cv(data, out.path_weights))
        except (BaoError, ValueError, RuntimeError, linalg.LinAlgError) as e:
            logger.warning('replicate %d: %s failed: %s', replicate, method, e)
            outputs[method] = None
    return outputs


@dataclass(frozen=True, eq=False)
class ReplicationReport:
    config: StudyConfig
    truth: TruthOracle
    estimates: dict
    imbalance: list
    wall_time: float = 0.0

    COLUMNS = ('study', 'n', 'method', 'parameter', 'bias', 'rmse', 'coverage', 'length', 'failures')

    def metrics(self):
        rows = []
        tau = self.truth.coef
        for method in self.config.methods:
            runs = [r for r in self.estimates[method] if r is not None]
            failures = len(self.estimates[method]) - len(runs)
            for j, term in enumerate(self.truth.design.terms):
                row = dict(study=self.config.study, n=self.config.n, method=method, parameter=term,
                           bias=math.nan, rmse=math.nan, coverage=math.nan, length=math.nan, failures=failures)
                if runs:
                    est = np.array([r.coef[j] for r in runs])
                    lo = np.array([r.ci_lower[j] for r in runs])
                    hi = np.array([r.ci_upper[j] for r in runs])
                    row['bias'] = float(est.mean() - tau[j])
                    row['rmse'] = float(math.sqrt(np.mean((est - tau[j]) ** 2)))
                    has_ci = np.isfinite(lo) & np.isfinite(hi)
                    if has_ci.any():
                        row['coverage'] = float(100.0 * np.mean((lo[has_ci] <= tau[j]) & (tau[j] <= hi[has_ci])))
                        row['length'] = float(np.mean(hi[has_ci] - lo[has_ci]))
                rows.append(row)
        return rows

    def to_frame(self):
        return pd.DataFrame(self.metrics(), columns=list(self.COLUMNS))

    def replicate_frame(self):
        """One row per (replicate, method, parameter); failed fits have empty estimates."""
        rows = []
        for method in self.config.methods:
            for r, out in enumerate(self.estimates[method]):
                for j, term in enumerate(self.truth.design.terms):
                    rows.append({
                        'replicate': r,
                        'method': method,
                        'parameter': term,
                        'estimate': math.nan if out is None else float(out.coef[j]),
                        'ci_lower': math.nan if out is None else float(out.ci_lower[j]),
                        'ci_upper': math.nan if out is None else float(out.ci_upper[j]),
                    })
        columns = ['replicate', 'method', 'parameter', 'estimate', 'ci_lower', 'ci_upper']
        return pd.DataFrame(rows, columns=columns)

    def imbalance_frame(self):
        """Per method and path: replicate-averaged ASMD and weight CV."""
        columns = ['method', 'path', 'asmd_pre', 'asmd', 'cv', 'replicates']
        if not self.imbalance:
            return pd.DataFrame(columns=columns)
        frame = pd.DataFrame(self.imbalance)
        out = (frame.groupby(['method', 'path'], sort=True)
               .agg(asmd_pre=('asmd_pre', 'mean'), asmd=('asmd', 'mean'), cv=('cv', 'mean'),
                    replicates=('replicate', 'nunique'))
               .reset_index())
        return out[columns]

    def to_dict(self):
        return {
            'config': self.config.to_dict(),
            'truth': self.truth.to_dict(),
            'metrics': self.metrics(),
            'imbalance': self.imbalance_frame().to_dict(orient='records'),
        }


def run_replications(config, truth=None):
    started = time.perf_counter()
    truth = truth or true_params(config.study, config.truth_draws)
    design = MsmDesign.preset(config.design_name, STUDY_T[config.study])
    if design.terms != truth.design.terms:
        raise SpecificationError(f'design {design.name} does not match the true MSM of study {config.study}')

    reps = range(config.reps)
    if config.n_jobs > 1:
        results = Parallel(n_jobs=config.n_jobs, prefer='threads')(
            delayed(_run_one)(config, design, r) for r in reps)
    else:
        results = [_run_one(config, design, r) for r in progress(reps, desc=f'study {config.study}')]

    estimates = {method: [] for method in config.methods}
    imbalance = []
    for r, outputs in enumerate(results):
        for method in config.methods:
            entry = outputs[method]
            estimates[method].append(None if entry is None else entry[0])
            if entry is not None:
                imbalance.extend({'method': method, 'replicate': r, **row} for row in entry[1])

    report = ReplicationReport(config=config, truth=truth, estimates=estimates, imbalance=imbalance,
                               wall_time=time.perf_counter() - started)
    logger.info('study %d, n=%d: %d replicates in %.1fs', config.study, config.n, config.reps, report.wall_time)
    return report


def render_svg(table, path=None):
    """ASMD against weight CV, one marker series per method; returns the SVG text."""
    matplotlib.rcParams['svg.hashsalt'] = 'bao'
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    for method, group in table.groupby('method', sort=True):
        ax.scatter(group['cv'], group['asmd'], label=method)
        for _, row in group.iterrows():
            ax.annotate(row['path'], (row['cv'], row['asmd']), fontsize=7)
    ax.axhline(0.2, linestyle=':', color='grey')
    ax.set_xlabel('weight CV')
    ax.set_ylabel('mean ASMD')
    ax.legend(fontsize=8)
    buffer = io.StringIO()
    fig.savefig(buffer, format='svg', metadata={'Date': None})
    svg = buffer.getvalue()
    if path is not None:
        atomic_write(path, svg)
    return svg
