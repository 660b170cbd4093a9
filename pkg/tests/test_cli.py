import json
import logging

import pytest

from pynoiselayout.cli import build_parser, main
from pynoiselayout.common import ExitCode, TrainConfig
from pynoiselayout.config import SEED_ENV
from pynoiselayout.network import HeadParams, save_checkpoint

logger = logging.getLogger()

SMALL_SIM = ['--set', 'sim.height=32', '--set', 'sim.width=32',
             '--set', 'sim.steps=4']
SMALL_HEAD = ['--set', 'train.hidden=4', '--set', 'train.soft_dim=3',
              '--set', 'train.triplets_per_image=5', '--set', 'train.batch=2',
              '--set', 'train.log_every=1']
SMALL_RUN = ['--set', 'guidance.guided_steps=2',
             '--set', 'guidance.iterations_per_step=1',
             '--set', 'cluster.window=2']


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


@pytest.fixture
def ckpt(tmp_path):
    cfg = TrainConfig(hidden=4, soft_dim=3)
    path = tmp_path / 'head.ckpt'
    save_checkpoint(path, HeadParams.init(12, cfg), cfg, steps=0)
    return path


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        main(['--help'])
    assert exc.value.code == 0
    with pytest.raises(SystemExit) as exc:
        main(['generate', '--help'])
    assert exc.value.code == 0


def test_parser_commands():
    parser = build_parser()
    args = parser.parse_args(['ablate', '--ckpt', 'x', '--out', 'y'])
    assert args.seeds == '0-19'
    assert args.variants == 'full,no_decisive'
    with pytest.raises(SystemExit):
        parser.parse_args([])


def test_malformed_prompt(tmp_path, ckpt):
    code = main(['generate', '--ckpt', str(ckpt), '--prompt', 'dog:zero',
                 '--out', str(tmp_path / 'run')])
    assert code == ExitCode.INPUT_ERROR


def test_unknown_config_key(tmp_path, ckpt):
    code = main(['generate', '--ckpt', str(ckpt), '--out', str(tmp_path / 'run'),
                 '--set', 'guidance.alpha=1'])
    assert code == ExitCode.INPUT_ERROR


def test_infeasible_scene(tmp_path, ckpt):
    code = main(['generate', '--ckpt', str(ckpt), '--prompt', 'dog:10',
                 '--out', str(tmp_path / 'run'),
                 '--set', 'sim.height=16', '--set', 'sim.width=16'])
    assert code == ExitCode.SCENE_INFEASIBLE


def test_missing_inputs(tmp_path):
    assert main(['eval', '--traces', str(tmp_path),
                 '--out', str(tmp_path / 'report')]) == ExitCode.INPUT_ERROR
    assert main(['train', '--data', str(tmp_path / 'missing.jsonl'),
                 '--out', str(tmp_path / 'head.ckpt')]) == ExitCode.INPUT_ERROR
    assert main(['generate', '--ckpt', str(tmp_path / 'missing.ckpt'),
                 '--out', str(tmp_path / 'run')]) == ExitCode.INPUT_ERROR


def test_end_to_end(tmp_path, capsys):
    data = tmp_path / 'data' / 'corpus.jsonl'
    code = main(['gen-data', '--out', str(data), '--scenes', '4', '--seed', '1',
                 '--set', 'dataset.max_subjects=2',
                 '--set', 'dataset.stored_timesteps=2'] + SMALL_SIM)
    assert code == ExitCode.OK
    assert 'records=' in capsys.readouterr().out
    assert (data.parent / 'effective.conf').is_file()

    head = tmp_path / 'model' / 'head.ckpt'
    code = main(['train', '--data', str(data), '--out', str(head),
                 '--steps', '2'] + SMALL_HEAD)
    assert code == ExitCode.OK
    assert head.is_file()
    assert (head.parent / 'head_curve.csv').is_file()

    run = tmp_path / 'traces' / 'full_s3'
    code = main(['generate', '--ckpt', str(head), '--prompt', 'dog:1,cat:1',
                 '--seed', '3', '--out', str(run)] + SMALL_SIM + SMALL_RUN)
    assert code == ExitCode.OK
    summary = json.loads((run / 'summary.json').read_text())
    assert summary['seed'] == 3
    assert len(summary['steps']) == 4
    assert 'sim.steps = 4' in (run / 'effective.conf').read_text()

    report = tmp_path / 'report'
    assert main(['eval', '--traces', str(tmp_path / 'traces'),
                 '--out', str(report)]) == ExitCode.OK
    rows = (report / 'eval.csv').read_text().splitlines()
    assert len(rows) == 2
    assert rows[1].startswith('full_s3,')

    png = tmp_path / 'final.png'
    assert main(['render', '--layout', str(run / 'layouts' / 't0001_hard.json'),
                 '--out', str(png)]) == ExitCode.OK
    assert png.is_file()


def test_gen_data_bytes_independent_of_jobs(tmp_path):
    outputs = []
    for jobs in (1, 4):
        out = tmp_path / f'jobs{jobs}' / 'corpus.jsonl'
        code = main(['gen-data', '--out', str(out), '--scenes', '3', '--seed', '1',
                     '--jobs', str(jobs), '--set', 'dataset.stored_timesteps=2']
                    + SMALL_SIM)
        assert code == ExitCode.OK
        outputs.append(out)
    a, b = outputs
    assert a.read_bytes() == b.read_bytes()
    conf = (a.parent / 'effective.conf').read_text()
    assert conf == (b.parent / 'effective.conf').read_text()
    assert 'run.jobs' not in conf
