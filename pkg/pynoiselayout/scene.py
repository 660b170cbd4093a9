"""Prompts, simulated scenes and ground-truth masks.

Prompts use the compact form `"dog:2,cat:1"` (class names or integer ids).
"""

import inspect
import json
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .common import SubjectClass
from .utils import rle_decode, rle_encode

__all__ = ['PromptSpec', 'InstanceSpec', 'SceneSpec', 'GroundTruthMasks',
           'PREFIXES', 'POSTFIXES', 'MAX_SUBJECTS']

_log = logging.getLogger(__name__)

MAX_SUBJECTS = 10

PREFIXES = ['a photo of', 'an image of', 'a picture of', 'a painting of']
POSTFIXES = ['on the grass', 'on the road', 'on the ground', 'in a yard']

_NUMBER_WORDS = ['zero', 'one', 'two', 'three', 'four', 'five', 'six',
                 'seven', 'eight', 'nine', 'ten']


class PromptSpec:
    """The subjects requested by a prompt.

    Attributes:
        subjects (list[tuple[SubjectClass, int]]): Class and quantity pairs.
        background_class (int): Index of the background setting, which also
            selects the postfix wording.
    """
    __slots__ = ('subjects', 'background_class')

    def __init__(self,
                 subjects: list[tuple[Union[SubjectClass, int], int]],
                 background_class: int = 0) -> None:
        pairs = [(SubjectClass(int(c)), int(n)) for c, n in subjects]
        if not pairs:
            raise ValueError('Prompt needs at least one subject')
        if any(n < 1 for _, n in pairs):
            raise ValueError('Subject counts must be 1 or more')
        classes = [c for c, _ in pairs]
        if len(set(classes)) != len(classes):
            raise ValueError('Subject classes must be distinct')
        if not 1 <= sum(n for _, n in pairs) <= MAX_SUBJECTS:
            raise ValueError(f'Total subjects must be 1..{MAX_SUBJECTS}')
        if not 0 <= background_class < len(POSTFIXES):
            raise ValueError(f'Background class must be 0..{len(POSTFIXES) - 1}')
        self.subjects = pairs
        self.background_class = int(background_class)

    @property
    def k(self) -> int:
        return sum(n for _, n in self.subjects)

    def instance_classes(self) -> list[SubjectClass]:
        """Class of each instance id 0..k-1, in prompt order."""
        return [c for c, n in self.subjects for _ in range(n)]

    def quantities(self) -> dict[SubjectClass, int]:
        return {c: n for c, n in self.subjects}

    @classmethod
    def parse(cls, text: str, background_class: int = 0) -> 'PromptSpec':
        """Parse `"dog:2,cat:1"`; a missing count means 1."""
        if not isinstance(text, str) or not text.strip():
            raise ValueError('Empty prompt')
        subjects = []
        for part in text.split(','):
            name, _, count = part.strip().partition(':')
            if not name:
                raise ValueError(f'Malformed prompt entry: {part!r}')
            try:
                n = int(count) if count else 1
            except ValueError as exc:
                raise ValueError(f'Invalid count in {part!r}') from exc
            subjects.append((SubjectClass.parse(name), n))
        return cls(subjects, background_class)

    @classmethod
    def capped(cls,
               subjects: list[tuple[Union[SubjectClass, int], int]],
               background_class: int = 0,
               limit: int = MAX_SUBJECTS) -> 'PromptSpec':
        """Build a prompt, decrementing the largest quantity until k <= limit.

        Ties are resolved toward the lowest class id. Quantities never drop
        below 1; once every class has a single instance, trailing classes are
        removed instead.
        """
        if limit < 1:
            raise ValueError('Subject limit must be 1 or more')
        order = [SubjectClass(int(c)) for c, _ in subjects]
        counts = {c: int(n) for c, (_, n) in zip(order, subjects)}
        while sum(counts.values()) > limit:
            largest = max(counts.values())
            if largest == 1:
                del counts[order.pop()]
                continue
            victim = min(c for c, n in counts.items() if n == largest)
            counts[victim] -= 1
        return cls([(c, counts[c]) for c in order], background_class)

    def to_compact(self) -> str:
        return ','.join(f'{c.noun}:{n}' for c, n in self.subjects)

    def to_text(self,
                prefix: Optional[str] = None,
                postfix: bool = False) -> str:
        """Natural-language rendering, e.g. 'a photo of two dogs and a cat'."""
        phrases = []
        for c, n in self.subjects:
            if n == 1:
                article = 'an' if c.noun[0] in 'aeiou' else 'a'
                phrases.append(f'{article} {c.noun}')
            else:
                phrases.append(f'{_NUMBER_WORDS[n]} {c.plural()}')
        if len(phrases) > 1:
            body = ', '.join(phrases[:-1]) + ' and ' + phrases[-1]
        else:
            body = phrases[0]
        parts = [prefix, body] if prefix else [body]
        if postfix:
            parts.append(POSTFIXES[self.background_class])
        return ' '.join(parts)

    def to_dict(self) -> dict:
        return {'subjects': [[int(c), n] for c, n in self.subjects],
                'background_class': self.background_class}

    @classmethod
    def from_dict(cls, obj: dict) -> 'PromptSpec':
        return cls([tuple(s) for s in obj['subjects']],
                   obj.get('background_class', 0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PromptSpec):
            return NotImplemented
        return (self.subjects == other.subjects and
                self.background_class == other.background_class)

    def __repr__(self) -> str:
        return f'PromptSpec({self.to_compact()!r}, bg={self.background_class})'


@dataclass(frozen=True)
class InstanceSpec:
    """One subject blob of a simulated scene.

    Attributes:
        instance_id: Index of the instance within the prompt.
        class_id: The subject class.
        center: (row, col) of the blob center in pixels.
        radius: Blob radius in pixels.
        signature: Unit vector in latent channel space.
    """
    instance_id: int
    class_id: SubjectClass
    center: tuple[int, int]
    radius: float
    signature: np.ndarray

    def to_dict(self) -> dict:
        return {
            'instance_id': self.instance_id,
            'class_id': int(self.class_id),
            'center': list(self.center),
            'radius': self.radius,
            'signature': [float(x) for x in self.signature],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> 'InstanceSpec':
        return cls(int(obj['instance_id']), SubjectClass(int(obj['class_id'])),
                   tuple(obj['center']), float(obj['radius']),
                   np.asarray(obj['signature'], dtype=np.float64))


class SceneSpec:
    """The simulated intent realized by a denoising run.

    Attributes:
        instances (list[InstanceSpec]): One blob per prompt instance.
        background_signature (np.ndarray): Unit background vector.
        seed (int): Seed of the run's noise streams.
        shape (tuple[int, int]): Grid height and width.
    """
    __slots__ = ('instances', 'background_signature', 'seed', 'shape')

    def __init__(self,
                 instances: list[InstanceSpec],
                 background_signature: np.ndarray,
                 seed: int,
                 shape: tuple[int, int]) -> None:
        height, width = shape
        for inst in instances:
            row, col = inst.center
            if not (0 <= row < height and 0 <= col < width):
                raise ValueError(f'Instance {inst.instance_id} center off-grid')
            if not 4 <= inst.radius <= 24:
                raise ValueError('Instance radius must lie in [4, 24]')
        sigs = [tuple(np.round(i.signature, 12)) for i in instances]
        if len(set(sigs)) != len(sigs):
            raise ValueError('Instance signatures must be distinct')
        self.instances = list(instances)
        self.background_signature = np.asarray(background_signature,
                                               dtype=np.float64)
        self.seed = int(seed)
        self.shape = (int(height), int(width))

    @property
    def k(self) -> int:
        return len(self.instances)

    def signatures(self) -> np.ndarray:
        """k×c matrix of instance signatures."""
        if not self.instances:
            return np.zeros((0, self.background_signature.size))
        return np.stack([i.signature for i in self.instances])

    def to_dict(self) -> dict:
        return {
            'instances': [i.to_dict() for i in self.instances],
            'background_signature': [float(x) for x in self.background_signature],
            'seed': self.seed,
            'shape': list(self.shape),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> 'SceneSpec':
        return cls([InstanceSpec.from_dict(i) for i in obj['instances']],
                   np.asarray(obj['background_signature']),
                   obj['seed'], tuple(obj['shape']))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneSpec):
            return NotImplemented
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())

    def __str__(self) -> str:
        obj = {s: getattr(self, s) for s in self.__slots__
               if s not in ('instances', 'background_signature')}
        for prop, _ in inspect.getmembers(self.__class__,
                                          lambda o: isinstance(o, property)):
            obj[prop] = getattr(self, prop)
        obj['centers'] = [list(i.center) for i in self.instances]
        return json.dumps(obj, skipkeys=True)


class GroundTruthMasks:
    """Per-pixel instance labels of a converged run.

    Attributes:
        labels (np.ndarray): H×W map, 0 background and i+1 for instance i.
        classes (list[SubjectClass]): Class of each instance.
    """
    __slots__ = ('labels', 'classes')

    def __init__(self, labels: np.ndarray, classes: list) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        k = len(classes)
        if labels.ndim != 2:
            raise ValueError('Mask labels must be a 2D map')
        if labels.min() < 0 or labels.max() > k:
            raise ValueError(f'Mask labels must lie in 0..{k}')
        counts = np.bincount(labels.ravel(), minlength=k + 1)
        empty = [i for i in range(k) if counts[i + 1] == 0]
        if empty:
            raise ValueError(f'Instances without pixels: {empty}')
        self.labels = labels
        self.classes = [SubjectClass(int(c)) for c in classes]

    @property
    def k(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {'labels': rle_encode(self.labels),
                'classes': [int(c) for c in self.classes]}

    @classmethod
    def from_dict(cls, obj: dict) -> 'GroundTruthMasks':
        return cls(rle_decode(obj['labels']), obj['classes'])
