"""
Command line interface

    simulate  generate a synthetic long CSV (data.csv) plus truth.json
    fit       learn the model and write fit.json, residuals.csv, surface.csv
    evaluate  fit, then leave-one-subject-out predictions (predictions.csv)
    compare   evaluate, plus the same model without delays (comparison.json)

Every run writes run_manifest.json with the config echo and per-stage timings.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import OutputConfig, RunConfig, SimulationConfig
from .data_io import (ArtifactWriter, fit_payload, ingest_long_csv, long_frame, predictions_frame,
                      residuals_frame, surface_frame)
from .errors import RdedError, StageError
from .evaluation import compare_models, loo_predict, residual_processes, summarize
from .logging_config import setup_logging
from .pipeline import learn_dynamics, run_stage
from .solver import simulation_from_config

logger = logging.getLogger(__name__)

COMMANDS = ('simulate', 'fit', 'evaluate', 'compare')


def banner(title):
    print('=' * 60)
    print(f'  {title}')
    print('=' * 60)


def _load(loader, path, stage='config'):
    try:
        return loader(path)
    except RdedError as e:
        raise StageError(stage, e) from e


def run_pipeline(config, evaluate=True, compare=True):
    """Ingest, learn, optionally evaluate, and write every artifact atomically"""
    timings = {}
    start = time.perf_counter()
    out_dir = Path(config.output_dir)
    with ArtifactWriter(out_dir) as writer:
        with run_stage('ingest', timings):
            panel = ingest_long_csv(config.input_path, config.response_name,
                                    config.covariate_names or None,
                                    config.include_subjects, config.exclude_subjects)
        with run_stage('config', timings):
            pipeline_config = config.pipeline_config()

        result = learn_dynamics(panel, pipeline_config, timings)

        prediction = comparison = None
        if evaluate or compare:
            with run_stage('evaluate', timings):
                prediction = loo_predict(result.panel, result.lag_config, result.fit.selected,
                                         result.surface, config=pipeline_config)
        if compare:
            with run_stage('compare', timings):
                comparison = compare_models(result.panel, result.lag_config, result.fit.selected,
                                            config=pipeline_config, surface=result.surface)

        with run_stage('write', timings):
            residuals = residual_processes(result.fit, result.panel)
            writer.write_json(OutputConfig.FIT_FILE, fit_payload(result, config.response_name))
            writer.write_frame(OutputConfig.RESIDUALS_FILE, residuals_frame(residuals))
            writer.write_frame(OutputConfig.SURFACE_FILE, surface_frame(result.surface, panel.grid))
            if prediction is not None:
                zero = comparison.zero_lag if comparison is not None else None
                writer.write_frame(OutputConfig.PREDICTIONS_FILE, predictions_frame(prediction, zero))
            if comparison is not None:
                writer.write_json(OutputConfig.COMPARISON_FILE, {
                    'ratio': comparison.ratio,
                    'per_subject_ratio': dict(zip(comparison.lagged.subjects,
                                                  map(float, comparison.per_subject_ratio))),
                    'lagged': summarize(comparison.lagged),
                    'zero_lag': summarize(comparison.zero_lag),
                })

        total = time.perf_counter() - start
        writer.write_json(OutputConfig.MANIFEST_FILE, {
            'version': __version__,
            'config': config.to_dict(),
            'seed': config.seed,
            'stages': timings,
            'total_seconds': total,
            'artifacts': [path.name for path in writer.written],
        })
    return result, prediction, comparison


def simulate(config, out_dir, seed=None):
    """Generate a panel from a SimulationConfig and write data.csv and truth.json"""
    timings = {}
    with ArtifactWriter(out_dir) as writer:
        with run_stage('simulate', timings):
            simulation = simulation_from_config(config, seed)
            panel, truth = simulation.generate()
        with run_stage('write', timings):
            writer.write_frame(OutputConfig.DATA_FILE,
                               long_frame(panel, config.response_name, config.origin_date))
            writer.write_json(OutputConfig.TRUTH_FILE, {
                'version': __version__,
                'config': config.to_dict(),
                'seed': simulation.seed,
                'response': config.response_name,
                'covariates': list(truth.covariates),
                'tau0': simulation.spec.tau0,
                'lags': dict(simulation.spec.lag_config.lags),
                'start_index': truth.start_index,
            })
    return panel, truth


def build_parser():
    parser = argparse.ArgumentParser(
        prog='rded',
        description='Solve and learn random differential equations with delays')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument('--config', type=Path, required=True, help='JSON configuration file')
        cmd.add_argument('--seed', type=int, default=None, help='override the configured seed')
        cmd.add_argument('--out', type=Path, default=None, help='output directory')
        cmd.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    banner(f'RDED {args.command}')
    try:
        if args.command == 'simulate':
            config = _load(SimulationConfig.from_file, args.config)
            out_dir = args.out or Path('.')
            simulate(config, out_dir, args.seed)
            print(f'[OK] wrote {OutputConfig.DATA_FILE} and {OutputConfig.TRUTH_FILE} to {out_dir}')
        else:
            config = _load(RunConfig.from_file, args.config)
            if args.seed is not None:
                config.seed = args.seed
            if args.out is not None:
                config.output_dir = str(args.out)
            result, prediction, comparison = run_pipeline(
                config,
                evaluate=args.command in ('evaluate', 'compare'),
                compare=args.command == 'compare')
            print(f'[OK] lags {result.lag_config.lags}, selected {list(result.fit.selected)}')
            if prediction is not None:
                print(f'[OK] leave-one-out IMSE {prediction.total_imse:.6g}')
            if comparison is not None:
                print(f'[OK] lagged / zero-lag ratio {comparison.ratio:.4f}')
            print(f'[OK] artifacts in {config.output_dir}')
    except StageError as e:
        print(f'[FAIL] stage={e.stage}: {e.cause}', file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception('unexpected failure')
        print(f'[FAIL] stage=unknown: {e}', file=sys.stderr)
        return 1
    print('=' * 60)
    return 0
