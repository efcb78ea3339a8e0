"""Command-line entry point: python cli.py <command> [options]."""
import io
import json
import logging
import math
import sys
from dataclasses import replace

import click
import numpy as np
import pandas as pd
from marshmallow import ValidationError

from comparators import fit_propensity, gcomp_msm, ipw_msm, ipw_weights, unadjusted_msm
from config import DEFAULT_SEED, atomic_write, env_seed, env_threads, setup_logging
from diagnostics import bases, fit_balance
from errors import InfeasibleError, TuningError
from estimate import MsmDesign, msm_presets, run_bao, run_bao_censored
from features import BalanceSpec
from panel import dump_panel, load_panel
from schemas import BalanceSpecSchema, ColumnMappingSchema, RunConfig, RunConfigSchema
from simlab import StudyConfig, generate, render_svg, run_replications, studies, true_params
from tune import tune_delta
from weights import fit_weights

logger = logging.getLogger('bao.cli')

methods = ('bao', 'gpool', 'gstrat', 'lr', 'lr-stab', 'lr-trunc', 'unadj')
_IPW_MODES = {'lr': 'standard', 'lr-stab': 'stabilized', 'lr-trunc': 'truncated'}

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INFEASIBLE = 2
EXIT_INTERNAL = 3


def plain(value):
    """Recursively convert numpy and NaN values into strict-JSON types."""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def json_text(payload):
    return json.dumps(plain(payload), sort_keys=True, indent=2) + '\n'


def csv_text(frame, config):
    buffer = io.StringIO()
    buffer.write('# config: ' + json.dumps(plain(config), sort_keys=True) + '\n')
    frame.to_csv(buffer, index=False, float_format='%.10g', lineterminator='\n')
    return buffer.getvalue()


def emit(text, path):
    if path is None:
        click.echo(text, nl=False)
    else:
        atomic_write(path, text)
        logger.info('wrote %s', path)


def _floats(raw):
    if raw is None:
        return None
    try:
        return tuple(float(part) for part in raw.split(',') if part.strip())
    except ValueError:
        raise click.BadParameter(f'expected comma-separated numbers, got {raw!r}')


def _load_json(path, schema):
    with open(path, encoding='utf-8') as handle:
        return schema.load(json.load(handle))


def resolve_config(ctx, config_path, **flags):
    """Defaults < JSON config < environment < command-line flags."""
    config = _load_json(config_path, RunConfigSchema()) if config_path else RunConfig()
    config = config.merge(seed=env_seed(), threads=env_threads(None))
    config = config.merge(threads=ctx.obj.get('threads'), **flags)
    if config.seed is None:
        config = config.merge(seed=DEFAULT_SEED)
    return config


def _spec_for(config, data, spec_path, delta):
    spec = _load_json(spec_path, BalanceSpecSchema()) if spec_path else config.spec
    if spec is None:
        spec = BalanceSpec.identity(data.P)
    if delta is not None:
        spec = spec.with_delta(delta)
    return spec


def _load_data(config, mapping_path):
    if config.data is None:
        raise click.UsageError('no data file given (use --data or "data" in --config)')
    mapping = _load_json(mapping_path, ColumnMappingSchema()) if mapping_path else config.mapping
    return load_panel(config.data, mapping)


def _tuning(config, candidates, tuning_b, delta):
    tuning = config.tuning
    if candidates is not None:
        tuning = replace(tuning, candidates=candidates)
    if tuning_b is not None:
        tuning = replace(tuning, B=tuning_b)
    if delta is not None:
        tuning = replace(tuning, enabled=False)
    return tuning


data_option = click.option('--data', type=click.Path(exists=True, dir_okay=False), help='Panel CSV.')
config_option = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                             help='JSON run configuration.')
spec_option = click.option('--spec', 'spec_path', type=click.Path(exists=True, dir_okay=False),
                           help='JSON balance specification.')
mapping_option = click.option('--mapping', 'mapping_path', type=click.Path(exists=True, dir_okay=False),
                              help='JSON column mapping sidecar.')
seed_option = click.option('--seed', type=int, default=None, help='Seed (falls back to BAO_SEED).')


@click.group()
@click.option('--log-level', default=None, help='Level of the bao loggers (DEBUG, INFO, ...).')
@click.option('--threads', type=click.IntRange(min=1), default=None, help='Worker cap (falls back to BAO_THREADS).')
@click.pass_context
def cli(ctx, log_level, threads):
    """Balancing weights for time-varying treatments."""
    setup_logging(level=log_level)
    ctx.ensure_object(dict)
    ctx.obj['threads'] = threads


@cli.command()
@click.option('--study', type=click.Choice([str(s) for s in studies]), required=True)
@click.option('--n', 'n', type=int, required=True, help='Units per replicate.')
@click.option('--reps', type=int, default=1, show_default=True)
@seed_option
@click.option('--methods', default='bao', show_default=True, help='Comma-separated estimator names.')
@click.option('--msm', type=click.Choice(msm_presets), default=None, help='MSM design (study default).')
@click.option('--bootstrap', type=int, default=100, show_default=True)
@click.option('--candidates', default=None, help='Comma-separated tolerance candidates.')
@click.option('--tuning-b', type=int, default=None, help='Tuning resamples.')
@click.option('--truth-draws', type=int, default=None, help='Forced-path draws for the Monte Carlo truth.')
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='Metrics CSV (stdout when omitted).')
@click.option('--svg', type=click.Path(file_okay=False), default=None,
              help='Directory for the ASMD against CV scatter and its table.')
@click.option('--replicates-out', type=click.Path(dir_okay=False), default=None, help='Per-replicate estimates CSV.')
@click.option('--report-out', type=click.Path(dir_okay=False), default=None, help='Full report as JSON.')
@click.option('--dump-data', type=click.Path(dir_okay=False), default=None, help='Write replicate 0 as CSV.')
@click.pass_context
def simulate(ctx, study, n, reps, seed, methods, msm, bootstrap, candidates, tuning_b, truth_draws, out, svg,
             replicates_out, report_out, dump_data):
    """Run the replication harness for one simulation study."""
    study = int(study)
    config = resolve_config(ctx, None, seed=seed, bootstrap=bootstrap)
    tuning = _tuning(config, _floats(candidates), tuning_b, None)
    kwargs = {'truth_draws': truth_draws} if truth_draws is not None else {}
    study_config = StudyConfig(study=study, n=n, reps=reps, seed=config.seed,
                               methods=tuple(m.strip() for m in methods.split(',') if m.strip()),
                               design=msm, bootstrap=config.bootstrap, tuning=tuning,
                               n_jobs=config.threads, **kwargs)

    if dump_data:
        atomic_write(dump_data, dump_panel(generate(study, n, config.seed, 0)))

    report = run_replications(study_config)
    provenance = study_config.to_dict()
    emit(csv_text(report.to_frame(), provenance), out)
    if replicates_out:
        emit(csv_text(report.replicate_frame(), provenance), replicates_out)
    if report_out:
        emit(json_text(report.to_dict()), report_out)
    if svg:
        table = report.imbalance_frame()
        emit(csv_text(table, provenance), f'{svg}/imbalance.csv')
        render_svg(table, f'{svg}/imbalance.svg')


@cli.command()
@click.option('--study', type=click.Choice([str(s) for s in studies]), required=True)
@click.option('--draws', type=int, default=None, help='Forced-path Monte Carlo draws.')
@seed_option
@click.option('--out', type=click.Path(dir_okay=False), default=None)
def truth(study, draws, seed, out):
    """Print the true MSM coefficients of a study."""
    study = int(study)
    args = (study,) if draws is None else (study, draws)
    oracle = true_params(*args, seed=seed if seed is not None else 0)
    emit(json_text(oracle.to_dict()), out)


@cli.command()
@data_option
@config_option
@spec_option
@mapping_option
@click.option('--candidates', default=None, help='Comma-separated tolerance candidates.')
@click.option('--B', 'tuning_b', type=int, default=None, help='Bootstrap resamples per candidate.')
@seed_option
@click.option('--censoring-aware', is_flag=True)
@click.option('--out', type=click.Path(dir_okay=False), default=None)
@click.pass_context
def tune(ctx, data, config_path, spec_path, mapping_path, candidates, tuning_b, seed, censoring_aware, out):
    """Select the standardized tolerance by bootstrap."""
    config = resolve_config(ctx, config_path, data=data, seed=seed, out=out)
    tuning = _tuning(config, _floats(candidates), tuning_b, None)
    panel = _load_data(config, mapping_path)
    spec = _spec_for(config, panel, spec_path, None)
    try:
        report = tune_delta(panel, spec, tuning.candidates, tuning.B, config.seed, config.solver,
                            censoring_aware=censoring_aware, n_jobs=config.threads)
    except TuningError as e:
        if e.report is not None and config.out:
            emit(json_text({'config': config.to_dict(), 'tuning': e.report.to_dict()}), config.out)
        raise
    emit(json_text({'config': config.to_dict(), 'tuning': report.to_dict()}), config.out)


def _comparator(method, panel, design, config):
    if method in ('gpool', 'gstrat'):
        mode = 'pooled' if method == 'gpool' else 'stratified'
        return gcomp_msm(panel, design, mode, B=config.bootstrap, seed=config.seed, spec=config.spec)
    if method in _IPW_MODES:
        mode = _IPW_MODES[method]
        model = fit_propensity(panel, stabilize=mode != 'standard')
        return ipw_msm(panel, ipw_weights(panel, model, mode), design)
    return unadjusted_msm(panel, design)


@cli.command()
@data_option
@config_option
@spec_option
@mapping_option
@click.option('--method', type=click.Choice(methods), default='bao', show_default=True)
@click.option('--msm', type=click.Choice(msm_presets), default=None)
@click.option('--bootstrap', type=click.IntRange(min=1), default=None)
@click.option('--delta', type=float, default=None, help='Fixed tolerance; skips tuning.')
@click.option('--candidates', default=None, help='Comma-separated tolerance candidates.')
@click.option('--tuning-b', type=int, default=None)
@seed_option
@click.option('--censoring-aware', is_flag=True, help='Restrict projections and targets to uncensored units.')
@click.option('--weights-out', type=click.Path(dir_okay=False), default=None, help='CSV of BAO weights.')
@click.option('--out', type=click.Path(dir_okay=False), default=None)
@click.pass_context
def estimate(ctx, data, config_path, spec_path, mapping_path, method, msm, bootstrap, delta, candidates, tuning_b,
             seed, censoring_aware, weights_out, out):
    """Estimate MSM coefficients with BAO or a comparator."""
    config = resolve_config(ctx, config_path, data=data, msm=msm, bootstrap=bootstrap, seed=seed, out=out)
    panel = _load_data(config, mapping_path)
    spec = _spec_for(config, panel, spec_path, delta)
    config = config.merge(spec=spec, tuning=_tuning(config, _floats(candidates), tuning_b, delta))
    design = MsmDesign.preset(config.msm, panel.T)
    provenance = {**config.to_dict(), 'method': method, 'censoring_aware': censoring_aware}

    if method != 'bao':
        result = _comparator(method, panel, design, config)
        emit(json_text({'config': provenance, 'result': result.to_dict()}), config.out)
        return

    run = run_bao_censored if censoring_aware else run_bao
    result = run(panel, spec, design, tuning=config.tuning, B=config.bootstrap, seed=config.seed,
                 options=config.solver, ladder=config.solver.ladder, n_jobs=config.threads)
    if weights_out:
        emit(csv_text(result.fit.weights_frame(), provenance), weights_out)
    emit(json_text({'config': provenance, 'result': result.to_dict()}), config.out)


@cli.command()
@data_option
@config_option
@spec_option
@mapping_option
@click.option('--delta', type=float, default=None, help='Standardized tolerance (default from the --spec file).')
@click.option('--basis', type=click.Choice(bases + ('both',)), default='both', show_default=True)
@click.option('--censoring-aware', is_flag=True)
@click.option('--out', type=click.Path(dir_okay=False), default=None)
@click.pass_context
def diagnose(ctx, data, config_path, spec_path, mapping_path, delta, basis, censoring_aware, out):
    """Solve weights at a fixed tolerance and report ASMD balance per feature and path."""
    config = resolve_config(ctx, config_path, data=data, out=out)
    panel = _load_data(config, mapping_path)
    spec = _spec_for(config, panel, spec_path, delta)
    fit = fit_weights(panel, spec, config.solver, ladder=config.solver.ladder,
                      censoring_aware=censoring_aware, n_jobs=config.threads, require_feasible=False)

    frames = []
    for name in (bases if basis == 'both' else (basis,)):
        frame = fit_balance(fit, basis=name).to_frame()
        frame.insert(0, 'basis', name)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    for path in fit.dropped:
        logger.warning('path %s is infeasible at every relaxation step', path.label)
    provenance = {**config.merge(spec=spec).to_dict(), 'censoring_aware': censoring_aware}
    emit(csv_text(table, provenance), config.out)


def dispatch(argv):
    """Run one command; returns the process exit code."""
    try:
        code = cli.main(args=list(argv), prog_name='bao', standalone_mode=False)
    except click.exceptions.Abort:
        click.echo('Aborted!', err=True)
        return EXIT_INVALID
    except click.ClickException as e:
        e.show()
        return EXIT_INVALID
    except ValidationError as e:
        click.echo(f'Error: invalid configuration: {json.dumps(e.messages, sort_keys=True)}', err=True)
        return EXIT_INVALID
    except (InfeasibleError, TuningError) as e:
        click.echo(f'Error: {e}', err=True)
        return EXIT_INFEASIBLE
    except (OSError, ValueError) as e:
        click.echo(f'Error: {e}', err=True)
        return EXIT_INVALID
    except Exception as e:
        logger.debug('unhandled error', exc_info=True)
        click.echo(f'Internal error: {e}', err=True)
        return EXIT_INTERNAL
    return code if isinstance(code, int) else EXIT_OK


if __name__ == '__main__':
    sys.exit(dispatch(sys.argv[1:]))
