"""Soft-layout head: prediction, triplet sampling, training and checkpoints.
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .backbone import FeatureStack
from .common import NonFiniteError, TrainConfig, config_to_dict
from .dataset import DatasetRecord
from .layout import SoftLayout
from .scene import GroundTruthMasks
from .tensor import (
    Graph,
    Tensor,
    add,
    backward,
    broadcast_to,
    conv2d,
    cosine_similarity,
    matmul,
    mean,
    relu,
    reshape,
    stack,
    sum_,
    take,
    tensor,
)
from .utils import config_hash, decode_array, encode_array, philox

__all__ = ['HeadParams', 'Triplet', 'TrainResult', 'forward', 'predict',
           'sample_triplets', 'triplet_loss', 'train', 'save_checkpoint',
           'load_checkpoint', 'segment_separation']

_log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'pynoiselayout-checkpoint'
CHECKPOINT_VERSION = 1
TIME_DIM = 8


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Weights of the soft-layout head.

    Kernels are (kh, kw, C_in, C_out); `time_w` projects the 8-component
    time embedding to the hidden width.
    """
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    time_w: np.ndarray
    time_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[2]

    @property
    def out_dim(self) -> int:
        return self.out_w.shape[3]

    @classmethod
    def init(cls,
             in_channels: int,
             cfg: Optional[TrainConfig] = None,
             seed: int = 0) -> 'HeadParams':
        """Seeded fan-in scaled weights and zero biases.

        Weights are normal with standard deviation
        `init_gain·sqrt(2/fan_in)`, fan-in being every axis but the last.
        """
        cfg = cfg or TrainConfig()
        h, d = cfg.hidden, cfg.soft_dim
        shapes = {
            'conv1_w': (3, 3, in_channels, h), 'conv1_b': (h,),
            'conv2_w': (3, 3, h, h), 'conv2_b': (h,),
            'time_w': (TIME_DIM, h), 'time_b': (h,),
            'out_w': (1, 1, h, d), 'out_b': (d,),
        }
        arrays = {}
        for name, shape in shapes.items():
            if name.endswith('_b'):
                arrays[name] = np.zeros(shape)
                continue
            std = cfg.init_gain * np.sqrt(2.0 / int(np.prod(shape[:-1])))
            arrays[name] = philox(seed, 'init', name).normal(0.0, std, shape)
        return cls(**arrays)

    @classmethod
    def zeros_like(cls, other: 'HeadParams') -> 'HeadParams':
        return cls(**{k: np.zeros_like(v) for k, v in other.arrays().items()})

    def equals(self, other: 'HeadParams') -> bool:
        return all(np.array_equal(a, b) for a, b in
                   zip(self.arrays().values(), other.arrays().values()))


def forward(features: Tensor,
            temb: np.ndarray,
            params: dict[str, Tensor]) -> Tensor:
    """Differentiable head: H×W×c features to an H×W×d soft-layout."""
    height, width, _ = features.shape
    hidden = params['conv1_b'].shape[0]
    h = conv2d(features, params['conv1_w'], params['conv1_b'])
    proj = add(matmul(tensor(np.reshape(temb, (1, TIME_DIM))), params['time_w']),
               reshape(params['time_b'], (1, hidden)))
    h = relu(add(h, broadcast_to(reshape(proj, (hidden,)),
                                 (height, width, hidden))))
    h = relu(conv2d(h, params['conv2_w'], params['conv2_b']))
    return conv2d(h, params['out_w'], params['out_b'])


def _constants(params: HeadParams) -> dict[str, Tensor]:
    return {k: tensor(v) for k, v in params.arrays().items()}


def predict(features: FeatureStack, params: HeadParams, t: int = 0) -> SoftLayout:
    """Soft-layout of a feature stack.

    Raises:
        ValueError: If the feature depth does not match the head.
    """
    if features.features.shape[2] != params.in_channels:
        raise ValueError(f'Expected {params.in_channels} feature channels'
                         f' got {features.features.shape[2]}')
    S = forward(tensor(features.features), features.time_embedding,
                _constants(params))
    return SoftLayout(S.numpy(), t)


class Triplet(NamedTuple):
    """Pixel coordinates (row, col) of an anchor, positive and negative."""
    anchor: tuple[int, int]
    positive: tuple[int, int]
    negative: tuple[int, int]


def sample_triplets(masks: Union[GroundTruthMasks, np.ndarray],
                    rng: np.random.Generator,
                    cfg: Optional[TrainConfig] = None) -> list[Triplet]:
    """Draw anchor/positive pairs from one segment and a negative elsewhere.

    The anchor segment is a subject with probability `subject_pick_prob`
    (uniform over present subjects), otherwise the background. Negatives
    are uniform over all pixels outside the anchor segment.

    Raises:
        ValueError: If the mask holds a single label.
    """
    cfg = cfg or TrainConfig()
    labels = masks.labels if isinstance(masks, GroundTruthMasks) else np.asarray(masks)
    width = labels.shape[1]
    flat = labels.ravel()
    present = np.unique(flat)
    if present.size < 2:
        raise ValueError('Degenerate mask: fewer than two labels')
    subjects = present[present > 0]
    members = {int(v): np.flatnonzero(flat == v) for v in present}
    out = []
    for _ in range(cfg.triplets_per_image):
        use_subject = subjects.size > 0 and (
            0 not in members or rng.random() < cfg.subject_pick_prob)
        if use_subject:
            segment = int(subjects[rng.integers(subjects.size)])
        else:
            segment = 0
        inside = members[segment]
        a = int(inside[rng.integers(inside.size)])
        p = int(inside[rng.integers(inside.size)])
        outside = np.flatnonzero(flat != segment)
        n = int(outside[rng.integers(outside.size)])
        out.append(Triplet(divmod(a, width), divmod(p, width), divmod(n, width)))
    return out


def _flat_indices(triplets: Sequence[Triplet], width: int) -> tuple:
    idx = np.asarray([[r * width + c for r, c in t] for t in triplets],
                     dtype=np.int64).reshape(-1, 3)
    return idx[:, 0], idx[:, 1], idx[:, 2]


def triplet_loss(S: Tensor, triplets: Sequence[Triplet], margin: float) -> Tensor:
    """Sum of `[sim(a, n) - sim(a, p) + margin]_+` over triplets."""
    height, width, d = S.shape
    for t in triplets:
        for r, c in t:
            if not (0 <= r < height and 0 <= c < width):
                raise ValueError(f'Triplet pixel ({r}, {c}) off-grid')
    ia, ip, ineg = _flat_indices(triplets, width)
    flat = reshape(S, (height * width, d))
    anchors = take(flat, ia)
    sim_p = cosine_similarity(anchors, take(flat, ip))
    sim_n = cosine_similarity(anchors, take(flat, ineg))
    return sum_(relu((sim_n - sim_p) + margin))


@dataclass
class TrainResult:
    """Trained weights and the mean loss per logging window.

    `initial` is the batch loss of the untrained head at the first step.
    """
    params: HeadParams
    curve: list[float] = field(default_factory=list)
    steps: int = 0
    initial: float = float('nan')


def train(records: Sequence[DatasetRecord],
          cfg: Optional[TrainConfig] = None,
          seed: int = 0,
          init: Optional[HeadParams] = None) -> TrainResult:
    """Momentum gradient descent on the batch-mean triplet loss.

    Each example draws one of its stored timesteps at random.

    Raises:
        ValueError: If no record has two or more labels.
        NonFiniteError: If a loss or gradient becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    usable = [r for r in records if np.unique(r.masks.labels).size >= 2]
    if not usable:
        raise ValueError('Empty dataset: no record with two or more labels')
    if len(usable) < len(records):
        _log.warning('Skipping %d single-label records',
                     len(records) - len(usable))
    params = init or HeadParams.init(usable[0].features[0].shape[2], cfg, seed)
    names = HeadParams.names()
    values = {k: v.copy() for k, v in params.arrays().items()}
    velocity = {k: np.zeros_like(v) for k, v in values.items()}
    rng = philox(seed, 'train')
    curve: list[float] = []
    window: list[float] = []
    initial = float('nan')
    for step in range(cfg.steps):
        graph = Graph()
        with graph.record():
            leaves = {k: graph.leaf(values[k]) for k in names}
            losses = []
            for _ in range(cfg.batch):
                record = usable[int(rng.integers(len(usable)))]
                i = int(rng.integers(len(record.timesteps)))
                stack_i = record.feature_stack(i)
                S = forward(tensor(stack_i.features), stack_i.time_embedding,
                            leaves)
                triplets = sample_triplets(record.masks, rng, cfg)
                losses.append(triplet_loss(S, triplets, cfg.margin))
            loss = mean(stack(losses))
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f'Non-finite loss at step {step}')
        grads = backward(graph, loss)
        for k in names:
            g = grads[leaves[k]]
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f'Non-finite gradient for {k} at step {step}')
            velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * g
            values[k] = values[k] + velocity[k]
        if step == 0:
            initial = value
        window.append(value)
        if len(window) == cfg.log_every:
            curve.append(float(np.mean(window)))
            _log.info('Step %d mean triplet loss %.4f', step + 1, curve[-1])
            window = []
    if window:
        curve.append(float(np.mean(window)))
    return TrainResult(HeadParams(**values), curve, cfg.steps, initial)


def segment_separation(params: HeadParams,
                       records: Sequence[DatasetRecord],
                       max_t: int,
                       pixels: int = 256,
                       seed: int = 0) -> float:
    """Mean within-segment minus cross-segment cosine similarity.

    Samples `pixels` pixels per record at every stored timestep <= max_t.
    """
    rng = philox(seed, 'separation')
    within: list[float] = []
    cross: list[float] = []
    for record in records:
        labels = record.masks.labels.ravel()
        for i, t in enumerate(record.timesteps):
            if t > max_t:
                continue
            soft = predict(record.feature_stack(i), params, t)
            X = soft.normalized().reshape(-1, soft.dim)
            idx = rng.choice(labels.size, size=min(pixels, labels.size),
                             replace=False)
            sims = X[idx] @ X[idx].T
            same = labels[idx][:, None] == labels[idx][None, :]
            off_diag = ~np.eye(idx.size, dtype=bool)
            if np.any(same & off_diag):
                within.append(float(np.mean(sims[same & off_diag])))
            if np.any(~same):
                cross.append(float(np.mean(sims[~same])))
    if not within or not cross:
        raise ValueError('No segments to compare')
    return float(np.mean(within) - np.mean(cross))


def save_checkpoint(path: Union[str, Path],
                    params: HeadParams,
                    cfg: Optional[TrainConfig] = None,
                    **kwargs) -> None:
    """Write a JSON-lines checkpoint: header, then one line per tensor.

    Args:
        path: Destination file.
        params: The weights.
        cfg: Training settings echoed in the header.
        **steps (int): Number of completed training steps.
        **config_hash (str): Hash of the effective configuration.
        **curve (list[float]): The loss curve.
    """
    cfg = cfg or TrainConfig()
    header = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'config_hash': kwargs.get('config_hash') or config_hash(config_to_dict(cfg)),
        'steps': int(kwargs.get('steps', 0)),
        'train': config_to_dict(cfg),
        'shapes': {k: list(v.shape) for k, v in params.arrays().items()},
        'curve': [float(x) for x in kwargs.get('curve', [])],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(header, sort_keys=True) + '\n')
        for name, arr in params.arrays().items():
            f.write(json.dumps({'name': name, 'array': encode_array(arr)},
                               sort_keys=True) + '\n')
    _log.info('Saved checkpoint %s (%d steps)', path, header['steps'])


def load_checkpoint(path: Union[str, Path]) -> tuple[HeadParams, dict]:
    """Read weights and header of a checkpoint."""
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ValueError(f'Empty checkpoint {path}')
    header = json.loads(lines[0])
    if header.get('format') != CHECKPOINT_FORMAT:
        raise ValueError(f'Not a checkpoint file: {path}')
    arrays = {}
    for line in lines[1:]:
        obj = json.loads(line)
        arrays[obj['name']] = decode_array(obj['array'])
    missing = set(HeadParams.names()) - set(arrays)
    if missing:
        raise ValueError(f'Checkpoint missing tensors: {sorted(missing)}')
    for name, shape in header.get('shapes', {}).items():
        if list(arrays[name].shape) != list(shape):
            raise ValueError(f'Shape mismatch for {name}')
    return HeadParams(**{k: arrays[k] for k in HeadParams.names()}), header
