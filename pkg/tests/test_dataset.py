import hashlib
import logging

import numpy as np
import pytest

from pynoiselayout.common import DatasetConfig, SimConfig
from pynoiselayout.dataset import (
    gen_dataset,
    iter_dataset,
    read_dataset,
    sample_prompt,
    stored_timesteps,
)
from pynoiselayout.utils import array_checksum, philox

logger = logging.getLogger()

SIM = SimConfig(height=32, width=32, steps=8)
RECIPE = DatasetConfig(scenes=6, max_classes=2, max_quantity=2, max_subjects=3,
                       stored_timesteps=3)


def test_stored_timesteps():
    assert stored_timesteps(50, 8)[0] == 50
    assert stored_timesteps(50, 8)[-1] == 0
    assert stored_timesteps(8, 3) == [8, 4, 0]
    assert stored_timesteps(2, 8) == [2, 1, 0]


def test_sample_prompt_limits():
    cfg = DatasetConfig()
    for i in range(200):
        prompt, text = sample_prompt(philox(0, 'prompt', i), cfg, 20)
        assert 1 <= prompt.k <= 10
        assert 1 <= len(prompt.subjects) <= 3
        assert text


def test_gen_dataset(tmp_path):
    path = tmp_path / 'data.jsonl'
    stats = gen_dataset(path, RECIPE, SIM)
    logger.info('Dataset stats: %s', stats)
    assert stats.written + stats.filtered == stats.requested == 6
    assert stats.written >= 1
    header, records = read_dataset(path)
    assert header['format'] == 'pynoiselayout-dataset'
    assert header['dataset']['scenes'] == 6
    assert len(records) == stats.written
    for record in records:
        assert record.timesteps == [8, 4, 0]
        assert len(record.features) == 3
        assert record.features[0].shape == (32, 32, 12)
        assert record.features[0].dtype == np.float32
        assert np.all(np.bincount(record.masks.labels.ravel(),
                                  minlength=record.masks.k + 1) > 0)
        assert record.masks.k == record.prompt.k


def test_gen_dataset_deterministic_across_jobs(tmp_path):
    a, b = tmp_path / 'a.jsonl', tmp_path / 'b.jsonl'
    gen_dataset(a, RECIPE, SIM, jobs=1)
    gen_dataset(b, RECIPE, SIM, jobs=3)
    assert a.read_bytes() == b.read_bytes()


def test_iter_dataset_rejects_other_files(tmp_path):
    path = tmp_path / 'other.jsonl'
    path.write_text('{"format": "something"}\n')
    with pytest.raises(ValueError):
        next(iter_dataset(path))


def test_array_checksum():
    arr = np.arange(6, dtype=np.int32).reshape(2, 3)
    expected = hashlib.sha256(arr.astype(np.float64).tobytes()).hexdigest()
    assert array_checksum(arr) == expected
    assert array_checksum(arr.T) != expected
