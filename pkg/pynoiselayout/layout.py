"""Soft and hard layout containers.
"""

import logging
from collections import deque
from typing import Iterator, Optional, Union

import numpy as np

from .utils import rle_decode, rle_encode

__all__ = ['SoftLayout', 'HardLayout', 'LayoutHistory', 'PALETTE']

_log = logging.getLogger(__name__)

# Label colors for background + up to 10 subjects
PALETTE: list[tuple[int, int, int]] = [
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
]


class SoftLayout:
    """A per-pixel descriptor grid predicted at timestep `t`.

    Attributes:
        S (np.ndarray): H×W×d descriptors.
        t (int): The timestep the descriptors were predicted at.
    """
    __slots__ = ('S', 't')

    def __init__(self, S: np.ndarray, t: int) -> None:
        S = np.asarray(S, dtype=np.float64)
        if S.ndim != 3:
            raise ValueError('Soft-layout must be H×W×d')
        if not np.all(np.isfinite(S)):
            raise ValueError('Soft-layout must be finite')
        self.S = S
        self.t = int(t)

    @property
    def shape(self) -> tuple:
        return self.S.shape

    @property
    def dim(self) -> int:
        return self.S.shape[2]

    def normalized(self, eps: float = 1e-12) -> np.ndarray:
        """Descriptors scaled to unit norm along the last axis."""
        norm = np.linalg.norm(self.S, axis=-1, keepdims=True)
        return self.S / np.maximum(norm, eps)


class HardLayout:
    """A partition of the grid into background (0) and subject labels 1..k.

    `instance_tags` maps a subject label to the prompt instance it depicts.
    """
    def __init__(self, labels: np.ndarray, k: int, **kwargs) -> None:
        """Create a hard layout.

        Args:
            labels (np.ndarray): H×W integer map with values in 0..k.
            k (int): The number of subject slots.
            **instance_tags (dict[int, int]): Subject label to instance id.
            **t (int): The timestep of the layout, if known.
        """
        self._k: int = 0
        self._labels: np.ndarray = np.zeros((1, 1), dtype=np.int64)
        self._instance_tags: dict[int, int] = {}
        self.t: Optional[int] = kwargs.get('t')
        self.k = k
        self.labels = labels
        self.instance_tags = kwargs.get('instance_tags', {})

    @property
    def k(self) -> int:
        return self._k

    @k.setter
    def k(self, value: int):
        if not isinstance(value, (int, np.integer)) or not 0 <= value <= 10:
            raise ValueError('Subject count must be integer 0..10')
        self._k = int(value)

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @labels.setter
    def labels(self, value: np.ndarray):
        arr = np.array(value, dtype=np.int64)
        if arr.ndim != 2:
            raise ValueError('Labels must be a 2D map')
        if arr.size and (arr.min() < 0 or arr.max() > self._k):
            raise ValueError(f'Labels must lie in 0..{self._k}')
        arr.setflags(write=False)
        self._labels = arr

    @property
    def instance_tags(self) -> dict[int, int]:
        return dict(self._instance_tags)

    @instance_tags.setter
    def instance_tags(self, value: dict[int, int]):
        tags = {int(k): int(v) for k, v in value.items()}
        if any(not 1 <= label <= self._k for label in tags):
            raise ValueError('Tags must reference subject labels')
        if len(set(tags.values())) != len(tags):
            raise ValueError('Instance tags must be injective')
        self._instance_tags = tags

    @property
    def shape(self) -> tuple:
        return self._labels.shape

    @property
    def present(self) -> list[int]:
        """Subject labels with at least one pixel, ascending."""
        return [int(v) for v in np.unique(self._labels) if v > 0]

    def mask(self, label: int) -> np.ndarray:
        return self._labels == label

    def sizes(self) -> np.ndarray:
        """Pixel count per label 0..k."""
        return np.bincount(self._labels.ravel(), minlength=self._k + 1)

    def one_hot(self) -> np.ndarray:
        """n×(k+1) indicator matrix in row-major pixel order."""
        flat = self._labels.ravel()
        out = np.zeros((flat.size, self._k + 1))
        out[np.arange(flat.size), flat] = 1.0
        return out

    def label_of(self, instance_id: int) -> Optional[int]:
        """The label tagged with an instance, if any."""
        for label, inst in self._instance_tags.items():
            if inst == instance_id:
                return label
        return None

    def missing_instances(self) -> list[int]:
        """Instances 0..k-1 without a nonempty tagged label."""
        present = set(self.present)
        tagged = {inst for label, inst in self._instance_tags.items()
                  if label in present}
        return [i for i in range(self._k) if i not in tagged]

    def to_dict(self) -> dict:
        obj = {
            'k': self._k,
            'instance_tags': {str(k): v for k, v in self._instance_tags.items()},
            'labels': rle_encode(self._labels),
        }
        if self.t is not None:
            obj['t'] = self.t
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> 'HardLayout':
        return cls(rle_decode(obj['labels']), int(obj['k']),
                   instance_tags={int(k): int(v)
                                  for k, v in obj.get('instance_tags', {}).items()},
                   t=obj.get('t'))

    def __eq__(self, other) -> bool:
        if not isinstance(other, HardLayout):
            return NotImplemented
        return (self._k == other._k and
                self._instance_tags == other._instance_tags and
                np.array_equal(self._labels, other._labels))

    def __repr__(self) -> str:
        return (f'HardLayout(t={self.t}, k={self._k}, present={self.present},'
                f' tags={self._instance_tags})')


class LayoutHistory:
    """The most recent soft-layouts (newest first) and the last hard layout.

    Timesteps must be pushed in strictly decreasing contiguous order.
    """
    def __init__(self, window: int) -> None:
        if window < 0:
            raise ValueError('Window must be non-negative')
        self._entries: deque[tuple[int, np.ndarray]] = deque(maxlen=window + 1)
        self.previous: Optional[HardLayout] = None

    @property
    def capacity(self) -> int:
        return self._entries.maxlen

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[tuple[int, np.ndarray]]:
        return iter(self._entries)

    @property
    def latest_t(self) -> Optional[int]:
        return self._entries[0][0] if self._entries else None

    def push(self, t: int, soft: Union[SoftLayout, np.ndarray]) -> None:
        S = soft.S if isinstance(soft, SoftLayout) else np.asarray(soft)
        if self._entries:
            if t != self._entries[0][0] - 1:
                raise ValueError(f'Expected timestep {self._entries[0][0] - 1}'
                                 f' got {t}')
            if S.shape != self._entries[0][1].shape:
                raise ValueError('Soft-layout shape changed within history')
        self._entries.appendleft((int(t), S))

    def copy(self) -> 'LayoutHistory':
        other = LayoutHistory(self.capacity - 1)
        other._entries.extend(self._entries)
        other.previous = self.previous
        return other
