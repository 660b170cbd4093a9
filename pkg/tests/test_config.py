import json
import logging
from pathlib import Path

import pytest

from pynoiselayout.common import AblationVariant, VarianceMode
from pynoiselayout.config import SEED_ENV, CliConfig, RunSection, parse_value

logger = logging.getLogger()

GOLDEN = Path(__file__).parent / 'data' / 'golden_defaults.json'


def test_defaults_match_golden():
    with open(GOLDEN, 'r', encoding='utf-8') as f:
        golden = json.load(f)
    flat = CliConfig().to_flat()
    for key, value in golden.items():
        assert flat[key] == pytest.approx(value), key


def test_parse_value():
    assert parse_value('yes', False) is True
    assert parse_value('OFF', True) is False
    assert parse_value('verbatim', VarianceMode.DISTANCE) == VarianceMode.VERBATIM
    assert parse_value(' 7 ', 3) == 7
    assert parse_value('1e-3', 0.5) == 0.001
    assert parse_value('dog:2', 'x') == 'dog:2'
    for text, default in (('maybe', True), ('huge', VarianceMode.DISTANCE),
                          ('1.5', 3)):
        with pytest.raises(ValueError):
            parse_value(text, default)


def test_apply_overrides():
    cfg = CliConfig().apply(['guidance.alpha_var=0', 'run.variant=no_dice',
                             'sim.steps = 10'])
    assert cfg.guidance.alpha_var == 0.0
    assert cfg.run.variant == AblationVariant.NO_DICE
    assert cfg.sim.steps == 10
    assert cfg.guidance.alpha_cross == 0.3
    with pytest.raises(ValueError):
        CliConfig().apply(['guidance.alpha=1'])
    with pytest.raises(ValueError):
        CliConfig().apply(['sim.steps'])
    with pytest.raises(ValueError):
        CliConfig().apply({'train.margin': '3'})
    with pytest.raises(ValueError):
        RunSection(jobs=0)


def test_dump_round_trip(tmp_path):
    cfg = CliConfig().apply({'train.learning_rate': '0.003',
                             'guidance.variance_mode': 'verbatim',
                             'run.full_trace': 'true'})
    text = cfg.dump()
    assert 'guidance.variance_mode = verbatim' in text
    assert 'run.full_trace = true' in text
    assert CliConfig.from_text(text) == cfg
    path = cfg.write(tmp_path)
    assert path.name == 'effective.conf'
    assert CliConfig.load(path) == cfg
    assert CliConfig.load(path).hash() == cfg.hash()
    assert cfg.hash() != CliConfig().hash()


def test_jobs_not_persisted():
    many = CliConfig().apply({'run.jobs': '8'})
    assert many.run.jobs == 8
    assert many.hash() == CliConfig().hash()
    assert many.dump() == CliConfig().dump()
    assert 'run.jobs' not in many.persisted()


def test_from_text_comments_and_errors():
    text = '# comment\n\nsim.steps = 12  # inline\n'
    assert CliConfig.from_text(text).sim.steps == 12
    with pytest.raises(ValueError):
        CliConfig.from_text('sim.steps 12\n')


def test_seed_precedence(monkeypatch):
    cfg = CliConfig().apply({'run.seed': '5'})
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert cfg.resolve_seed() == 5
    monkeypatch.setenv(SEED_ENV, '11')
    assert cfg.resolve_seed() == 11
    assert cfg.resolve_seed(2) == 2
    assert cfg.run_config().seed == 11
    monkeypatch.setenv(SEED_ENV, 'abc')
    with pytest.raises(ValueError):
        cfg.resolve_seed()


def test_run_config(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    cfg = CliConfig().apply({'sim.steps': '8', 'run.prompt': 'cat:2'})
    run = cfg.run_config(variant='no_var')
    assert run.T == 8
    assert run.prompt.k == 2
    assert run.variant == AblationVariant.NO_VAR
    assert run.loss_weights.alpha_var == 0.0
    assert not run.full_trace
    assert cfg.run_config(full_trace=True).full_trace
    with pytest.raises(ValueError):
        cfg.run_config(prompt='cat:0')


def test_optimization_switches_from_overrides():
    cfg = CliConfig().apply(['guidance.normalize_gradient=false',
                             'cluster.refine_restarts=2', 'train.init_gain=0.5'])
    assert cfg.guidance.normalize_gradient is False
    assert cfg.cluster.refine_restarts == 2
    assert cfg.train.init_gain == 0.5
    with pytest.raises(ValueError):
        CliConfig().apply(['train.init_gain=0'])
