"""Synthetic training corpus: generation and JSON-lines persistence.

The file starts with a header line (format, version, config hash) followed
by one record per scene with base64 row-major feature arrays and
run-length-encoded instance masks.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .backbone import Denoiser, FeatureStack, time_embedding
from .common import DatasetConfig, SceneInfeasibleError, SimConfig, config_to_dict
from .loader import load_backbone
from .scene import POSTFIXES, PREFIXES, GroundTruthMasks, PromptSpec
from .utils import config_hash, decode_array, derive_seed, encode_array, pairs, philox

__all__ = ['DatasetRecord', 'DatasetStats', 'stored_timesteps', 'sample_prompt',
           'simulate_record', 'gen_dataset', 'read_dataset', 'iter_dataset']

_log = logging.getLogger(__name__)

FORMAT = 'pynoiselayout-dataset'
VERSION = 1


@dataclass
class DatasetRecord:
    """One converged scene with features at the stored timesteps.

    Attributes:
        index: Scene index within the corpus.
        seed: Seed of the scene's latent and noise streams.
        prompt: The requested subjects.
        text: Natural-language rendering of the prompt.
        timesteps: Stored timesteps, descending.
        features: H×W×c features per stored timestep.
        masks: Ground-truth instance masks of the converged latent.
        steps: Total denoising steps of the schedule.
    """
    index: int
    seed: int
    prompt: PromptSpec
    text: str
    timesteps: list[int]
    features: list[np.ndarray]
    masks: GroundTruthMasks
    steps: int

    def feature_stack(self, i: int) -> FeatureStack:
        """Features of the i-th stored timestep as float64."""
        return FeatureStack(np.asarray(self.features[i], dtype=np.float64),
                            time_embedding(self.timesteps[i], self.steps))

    def to_json(self, dtype: str = 'float32') -> str:
        obj = {
            'index': self.index,
            'seed': self.seed,
            'prompt': self.prompt.to_dict(),
            'text': self.text,
            'timesteps': self.timesteps,
            'steps': self.steps,
            'features': [encode_array(f, dtype) for f in self.features],
            'masks': self.masks.to_dict(),
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> 'DatasetRecord':
        obj = json.loads(line)
        return cls(
            index=obj['index'],
            seed=obj['seed'],
            prompt=PromptSpec.from_dict(obj['prompt']),
            text=obj['text'],
            timesteps=list(obj['timesteps']),
            features=[decode_array(f, 'float32') for f in obj['features']],
            masks=GroundTruthMasks.from_dict(obj['masks']),
            steps=obj['steps'],
        )


@dataclass
class DatasetStats:
    """Counts of a corpus generation run."""
    requested: int = 0
    written: int = 0
    infeasible: int = 0
    ambiguous: int = 0
    class_counts: dict[int, int] = field(default_factory=dict)

    @property
    def filtered(self) -> int:
        return self.infeasible + self.ambiguous


def stored_timesteps(T: int, count: int) -> list[int]:
    """`count` uniformly spaced timesteps from T down to 0."""
    values = np.round(np.linspace(T, 0, count)).astype(int)
    return sorted({int(v) for v in values}, reverse=True)


def sample_prompt(rng: np.random.Generator,
                  cfg: DatasetConfig,
                  class_pool: int) -> tuple[PromptSpec, str]:
    """Draw a prompt and its natural-language rendering."""
    n_classes = int(rng.integers(cfg.min_classes, cfg.max_classes + 1))
    classes = rng.choice(class_pool, size=n_classes, replace=False)
    subjects = []
    for cls in classes:
        if rng.random() < cfg.quantity_prob:
            subjects.append((int(cls), int(rng.integers(1, cfg.max_quantity + 1))))
        else:
            subjects.append((int(cls), 1))
    background = int(rng.integers(len(POSTFIXES)))
    prompt = PromptSpec.capped(subjects, background, cfg.max_subjects)
    prefix = None
    if rng.random() < cfg.prefix_prob:
        prefix = PREFIXES[int(rng.integers(len(PREFIXES)))]
    postfix = bool(rng.random() < cfg.postfix_prob)
    return prompt, prompt.to_text(prefix, postfix)


def _max_footprint_iou(weights: np.ndarray, threshold: float) -> float:
    footprints = weights >= threshold
    worst = 0.0
    for i, j in pairs(range(footprints.shape[1])):
        union = np.count_nonzero(footprints[:, i] | footprints[:, j])
        if union:
            inter = np.count_nonzero(footprints[:, i] & footprints[:, j])
            worst = max(worst, inter / union)
    return worst


def _has_weak_instance(weights: np.ndarray, threshold: float) -> bool:
    """True if some instance dominates no pixel at `threshold`."""
    best = np.argmax(weights, axis=1)
    strong = weights[np.arange(weights.shape[0]), best] >= threshold
    return np.unique(best[strong]).size < weights.shape[1]


def simulate_record(index: int,
                    denoiser: Denoiser,
                    cfg: DatasetConfig) -> tuple[Optional[DatasetRecord], str]:
    """Run one unguided scene to convergence.

    Returns:
        The record (or None if filtered) and a status of `ok`,
            `infeasible` or `ambiguous`.
    """
    seed = derive_seed(cfg.seed, 'scene', index)
    prompt, text = sample_prompt(philox(cfg.seed, 'prompt', index), cfg,
                                 denoiser.config.class_pool)
    latent = denoiser.init_latent(seed)
    try:
        scene = denoiser.derive_scene(latent, prompt, seed)
    except SceneInfeasibleError as exc:
        _log.debug('Scene %d skipped: %s', index, exc)
        return None, 'infeasible'
    keep = stored_timesteps(latent.T, cfg.stored_timesteps)
    features = []
    while True:
        if latent.t in keep:
            features.append(denoiser.extract_features(latent).features)
        if latent.t == 0:
            break
        latent = denoiser.denoise_step(latent, scene)
    weights = denoiser.decode_weights(scene, latent.z)
    if (_has_weak_instance(weights, cfg.footprint_weight) or
            _max_footprint_iou(weights, cfg.footprint_weight) > cfg.ambiguity_iou):
        _log.debug('Scene %d filtered as ambiguous', index)
        return None, 'ambiguous'
    masks = denoiser.ground_truth(scene, latent.z, cfg.footprint_weight)
    dtype = np.float32 if cfg.feature_dtype == 'float32' else np.float64
    record = DatasetRecord(index, seed, prompt, text, keep,
                           [f.astype(dtype) for f in features], masks, latent.T)
    return record, 'ok'


def gen_dataset(out_path: Union[str, Path],
                cfg: Optional[DatasetConfig] = None,
                sim: Optional[SimConfig] = None,
                **kwargs) -> DatasetStats:
    """Generate the corpus into a JSON-lines file.

    Args:
        out_path: Destination file.
        cfg: The corpus recipe.
        sim: The backbone settings.
        **jobs (int): Worker threads, default 1. Output is identical for
            any worker count.
        **backbone (str): Backbone name, default `simulator`.
        **config_hash (str): Hash of the effective configuration for the
            header; derived from `cfg` and `sim` if absent.

    Returns:
        DatasetStats of the run.
    """
    cfg = cfg or DatasetConfig()
    sim = sim or SimConfig()
    jobs = int(kwargs.get('jobs', 1))
    denoiser = load_backbone(kwargs.get('backbone', 'simulator'))(sim)
    settings = {'dataset': config_to_dict(cfg), 'sim': config_to_dict(sim)}
    header = {
        'format': FORMAT,
        'version': VERSION,
        'config_hash': kwargs.get('config_hash') or config_hash(settings),
        **settings,
    }
    stats = DatasetStats(requested=cfg.scenes)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    work = partial(simulate_record, denoiser=denoiser, cfg=cfg)
    with open(out_path, 'w', encoding='utf-8', newline='\n') as f, \
            ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        f.write(json.dumps(header, sort_keys=True) + '\n')
        for record, status in pool.map(work, range(cfg.scenes)):
            if record is None:
                setattr(stats, status, getattr(stats, status) + 1)
                continue
            f.write(record.to_json(cfg.feature_dtype) + '\n')
            stats.written += 1
            n = len(record.prompt.subjects)
            stats.class_counts[n] = stats.class_counts.get(n, 0) + 1
    _log.info('Wrote %d of %d scenes to %s (%d infeasible, %d ambiguous)',
              stats.written, stats.requested, out_path, stats.infeasible,
              stats.ambiguous)
    return stats


def iter_dataset(path: Union[str, Path]) -> Iterator[Union[dict, DatasetRecord]]:
    """Yield the header dict followed by each record."""
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
        if not first:
            raise ValueError(f'Empty dataset file {path}')
        header = json.loads(first)
        if header.get('format') != FORMAT:
            raise ValueError(f'Not a dataset file: {path}')
        if header.get('version') != VERSION:
            raise ValueError(f'Unsupported dataset version {header.get("version")}')
        yield header
        for line in f:
            if line.strip():
                yield DatasetRecord.from_json(line)


def read_dataset(path: Union[str, Path]) -> tuple[dict, list[DatasetRecord]]:
    """Load the header and all records of a dataset file."""
    items = iter_dataset(path)
    header = next(items)
    records = list(items)
    _log.info('Loaded %d records from %s', len(records), path)
    return header, records
