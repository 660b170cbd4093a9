"""Command line interface.

Commands: `gen-data`, `train`, `generate`, `eval`, `ablate`, `render`.
Exit codes follow `ExitCode`.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .common import (
    AblationVariant,
    ExitCode,
    NonFiniteError,
    SceneInfeasibleError,
)
from .config import SEED_ENV, CliConfig
from .dataset import gen_dataset, read_dataset
from .layout import HardLayout
from .network import load_checkpoint, save_checkpoint, train
from .pipeline import ablate, evaluate_traces, generate, render_layout, write_trace
from .utils import parse_int_list

__all__ = ['main', 'build_parser']

_log = logging.getLogger(__name__)

LOG_FORMAT = ('%(asctime)s,[%(levelname)s],(%(threadName)s),'
              '%(module)s.%(funcName)s:%(lineno)s,%(message)s')
LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def _load_config(args: argparse.Namespace) -> CliConfig:
    config = CliConfig.load(args.config) if args.config else CliConfig()
    if args.set:
        config = config.apply(args.set)
    if args.jobs is not None:
        config = config.apply({'run.jobs': str(args.jobs)})
    return config


def cmd_gen_data(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    overrides = {}
    if args.scenes is not None:
        overrides['dataset.scenes'] = str(args.scenes)
    if args.seed is not None or os.getenv(SEED_ENV):
        overrides['dataset.seed'] = str(config.resolve_seed(args.seed))
    config = config.apply(overrides)
    out = Path(args.out)
    stats = gen_dataset(out, config.dataset, config.sim, jobs=config.run.jobs,
                        backbone=config.run.backbone, config_hash=config.hash())
    config.write(out.parent)
    print(f'records={stats.written} requested={stats.requested}'
          f' infeasible={stats.infeasible} ambiguous={stats.ambiguous}')
    return ExitCode.OK


def cmd_train(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    overrides = {}
    if args.steps is not None:
        overrides['train.steps'] = str(args.steps)
    if args.lr is not None:
        overrides['train.learning_rate'] = str(args.lr)
    config = config.apply(overrides)
    header, records = read_dataset(args.data)
    result = train(records, config.train, config.resolve_seed(args.seed))
    out = Path(args.out)
    save_checkpoint(out, result.params, config.train, steps=result.steps,
                    config_hash=config.hash(), curve=result.curve)
    curve_path = out.with_name(out.stem + '_curve.csv')
    with open(curve_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['window', 'mean_loss'])
        for i, value in enumerate(result.curve):
            writer.writerow([i, f'{value:.8f}'])
    config.write(out.parent)
    _log.info('Trained on %d records from dataset %s',
              len(records), header.get('config_hash'))
    return ExitCode.OK


def cmd_generate(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    params, _ = load_checkpoint(args.ckpt)
    cfg = config.run_config(prompt=args.prompt, seed=args.seed,
                            variant=args.variant,
                            full_trace=True if args.full_trace else None)
    trace = generate(cfg, params)
    out = Path(args.out)
    write_trace(trace, out, config.eval)
    config.write(out)
    if trace.failed:
        _log.error('Generation failed: %s', trace.error)
        return ExitCode.NUMERIC_FAILURE
    return ExitCode.OK


def cmd_eval(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    report = evaluate_traces(args.traces, config.eval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'eval.json', 'w', encoding='utf-8', newline='\n') as f:
        f.write(report.to_json() + '\n')
    with open(out / 'eval.csv', 'w', encoding='utf-8', newline='\n') as f:
        f.write(report.to_csv())
    config.write(out)
    print(json.dumps(report.aggregates()['all'], sort_keys=True))
    return ExitCode.OK


def cmd_ablate(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    params, _ = load_checkpoint(args.ckpt)
    base = config.run_config(prompt=args.prompt)
    variants = [AblationVariant.parse(v) for v in args.variants.split(',')
                if v.strip()]
    if not variants:
        raise ValueError('No variants given')
    seeds = parse_int_list(args.seeds)
    out = Path(args.out)
    report = ablate(replace(base, full_trace=False), variants, seeds, params,
                    jobs=config.run.jobs, out_dir=out, eval_cfg=config.eval)
    config.write(out)
    print(json.dumps(report.aggregates('variant'), sort_keys=True))
    return ExitCode.OK


def cmd_render(args: argparse.Namespace, config: CliConfig) -> ExitCode:
    with open(args.layout, 'r', encoding='utf-8') as f:
        layout = HardLayout.from_dict(json.load(f))
    render_layout(layout, args.out)
    return ExitCode.OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None,
                        help='key-value configuration file (default: none)')
    common.add_argument('--set', action='append', default=[],
                        metavar='SECTION.KEY=VALUE',
                        help='override a configuration key (repeatable)')
    common.add_argument('--jobs', type=int, default=None,
                        help='worker threads for independent runs (default: 1)')
    common.add_argument('-v', '--verbose', action='store_true',
                        help='debug logging')
    parser = argparse.ArgumentParser(
        prog='pynoiselayout',
        description='Noise-induced layout prediction and decisive guidance',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        epilog=f'{SEED_ENV} is the seed when --seed is not given.')
    sub = parser.add_subparsers(dest='command', required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser('gen-data', parents=[common], formatter_class=fmt,
                       help='generate the synthetic training corpus')
    p.add_argument('--out', required=True, help='dataset file')
    p.add_argument('--scenes', type=int, default=None,
                   help='number of scenes (config default 1500)')
    p.add_argument('--seed', type=int, default=None, help='corpus seed')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', parents=[common], formatter_class=fmt,
                       help='train the soft-layout head')
    p.add_argument('--data', required=True, help='dataset file')
    p.add_argument('--out', required=True, help='checkpoint file')
    p.add_argument('--steps', type=int, default=None,
                   help='training steps (config default 5000)')
    p.add_argument('--lr', type=float, default=None,
                   help='learning rate (config default 1e-4)')
    p.add_argument('--seed', type=int, default=None, help='training seed')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('generate', parents=[common], formatter_class=fmt,
                       help='run one guided generation and write its trace')
    p.add_argument('--ckpt', required=True, help='checkpoint file')
    p.add_argument('--prompt', default=None,
                   help='subjects as class:count,... (config default dog:1,cat:1)')
    p.add_argument('--seed', type=int, default=None, help='run seed')
    p.add_argument('--out', required=True, help='trace directory')
    p.add_argument('--variant', default=None,
                   help='one of ' + ', '.join(v.name.lower() for v in AblationVariant))
    p.add_argument('--full-trace', action='store_true',
                   help='also store latents and soft-layout arrays')
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('eval', parents=[common], formatter_class=fmt,
                       help='recompute metrics from trace directories')
    p.add_argument('--traces', required=True, help='trace directory or parent')
    p.add_argument('--out', required=True, help='report directory')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('ablate', parents=[common], formatter_class=fmt,
                       help='compare variants over seeds')
    p.add_argument('--ckpt', required=True, help='checkpoint file')
    p.add_argument('--seeds', default='0-19', help='seeds, e.g. 0,2,5-7')
    p.add_argument('--variants', default='full,no_decisive',
                   help='comma separated variants')
    p.add_argument('--prompt', default=None, help='subjects as class:count,...')
    p.add_argument('--out', required=True, help='report directory')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('render', parents=[common], formatter_class=fmt,
                       help='render a stored hard layout to PNG')
    p.add_argument('--layout', required=True, help='t####_hard.json file')
    p.add_argument('--out', required=True, help='PNG file')
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT)
    try:
        config = _load_config(args)
        return int(args.func(args, config))
    except SceneInfeasibleError as exc:
        _log.error('Scene infeasible: %s', exc)
        return int(ExitCode.SCENE_INFEASIBLE)
    except NonFiniteError as exc:
        _log.error('Numeric failure: %s', exc)
        return int(ExitCode.NUMERIC_FAILURE)
    except (ValueError, OSError, ModuleNotFoundError) as exc:
        _log.error('%s', exc)
        print(f'error: {exc}', file=sys.stderr)
        return int(ExitCode.INPUT_ERROR)


if __name__ == '__main__':
    sys.exit(main())
