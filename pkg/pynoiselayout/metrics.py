"""Layout agreement, diversity, subject counting and temporal stability.
"""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .cluster import hungarian, iou_matrix, pad_square
from .layout import HardLayout
from .scene import GroundTruthMasks, PromptSpec
from .utils import pairs

__all__ = ['layout_iou', 'identity_iou', 'diversity', 'count_f1',
           'temporal_consistency', 'RunMetrics', 'EvalReport']

_log = logging.getLogger(__name__)

LabelSource = Union[HardLayout, GroundTruthMasks, np.ndarray]


def _labels(layout: LabelSource) -> np.ndarray:
    if isinstance(layout, (HardLayout, GroundTruthMasks)):
        return layout.labels
    return np.asarray(layout)


def layout_iou(a: LabelSource, b: LabelSource) -> float:
    """Mean IoU of Hungarian-matched subject clusters.

    Background is excluded; unmatched clusters score 0 and the mean runs
    over max(k_a, k_b) slots. Two layouts without subjects score 1.
    """
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError('Layouts must share a grid')
    sa = [int(v) for v in np.unique(la) if v > 0]
    sb = [int(v) for v in np.unique(lb) if v > 0]
    slots = max(len(sa), len(sb))
    if slots == 0:
        return 1.0
    _, total = hungarian(pad_square(iou_matrix(la, lb, sa, sb)), maximize=True)
    return total / slots


def identity_iou(a: HardLayout, b: HardLayout) -> float:
    """Mean IoU per instance using the layouts' own tags (no re-alignment)."""
    if a.shape != b.shape:
        raise ValueError('Layouts must share a grid')
    ia = {inst: label for label, inst in a.instance_tags.items()
          if label in a.present}
    ib = {inst: label for label, inst in b.instance_tags.items()
          if label in b.present}
    instances = sorted(set(ia) | set(ib))
    if not instances:
        return 1.0
    scores = []
    for inst in instances:
        if inst in ia and inst in ib:
            scores.append(iou_matrix(a.labels, b.labels, [ia[inst]], [ib[inst]])[0, 0])
        else:
            scores.append(0.0)
    return float(np.mean(scores))


def diversity(layouts: Sequence[LabelSource]) -> float:
    """Mean of `1 - layout_iou` over all unordered pairs.

    Raises:
        ValueError: With fewer than two layouts.
    """
    if len(layouts) < 2:
        raise ValueError('Diversity needs two or more layouts')
    return float(np.mean([1.0 - layout_iou(a, b) for a, b in pairs(layouts)]))


def count_f1(layout: HardLayout,
             prompt: PromptSpec,
             min_area: int = 16) -> float:
    """Micro-averaged F1 of generated subject counts per class.

    A subject counts when its tagged cluster holds at least `min_area`
    pixels; the prompt quantities are the reference.
    """
    classes = prompt.instance_classes()
    sizes = layout.sizes()
    predicted: dict[int, int] = {}
    for label, inst in layout.instance_tags.items():
        if sizes[label] >= min_area and inst < len(classes):
            cls = int(classes[inst])
            predicted[cls] = predicted.get(cls, 0) + 1
    tp = fp = fn = 0
    for cls, quantity in prompt.quantities().items():
        got = predicted.pop(int(cls), 0)
        tp += min(got, quantity)
        fp += max(0, got - quantity)
        fn += max(0, quantity - got)
    fp += sum(predicted.values())
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def temporal_consistency(layouts: Sequence[HardLayout]) -> float:
    """Mean identity IoU of consecutive layouts in the second half of a run.

    Layouts are ordered by decreasing timestep.

    Raises:
        ValueError: With fewer than two layouts.
    """
    n = len(layouts)
    if n < 2:
        raise ValueError('Temporal consistency needs two or more layouts')
    start = (n - 1) // 2
    return float(np.mean([identity_iou(layouts[i], layouts[i + 1])
                          for i in range(start, n - 1)]))


@dataclass
class RunMetrics:
    """Metrics of one generation run."""
    name: str
    prompt: str
    seed: int
    variant: str
    final_iou: float
    count_f1: float
    temporal_consistency: float
    failed: bool = False
    neglected: int = 0


def _aggregate(values: list[float]) -> dict[str, float]:
    if not values:
        return {'mean': float('nan'), 'std': float('nan'), 'n': 0}
    return {'mean': float(np.mean(values)), 'std': float(np.std(values)),
            'n': len(values)}


@dataclass
class EvalReport:
    """Per-run metrics, per-prompt diversity and their aggregates."""
    runs: list[RunMetrics] = field(default_factory=list)
    diversity: dict[str, float] = field(default_factory=dict)

    FIELDS = ['name', 'prompt', 'seed', 'variant', 'final_iou', 'count_f1',
              'temporal_consistency', 'failed', 'neglected']

    def aggregates(self, group: Optional[str] = None) -> dict:
        """Mean/std of each metric, overall or per `variant` / `prompt`."""
        groups: dict[str, list[RunMetrics]] = {}
        for run in self.runs:
            key = getattr(run, group) if group else 'all'
            groups.setdefault(str(key), []).append(run)
        out = {}
        for key, runs in groups.items():
            ok = [r for r in runs if not r.failed]
            out[key] = {
                'runs': len(runs),
                'failed': len(runs) - len(ok),
                'final_iou': _aggregate([r.final_iou for r in ok]),
                'count_f1': _aggregate([r.count_f1 for r in ok]),
                'temporal_consistency': _aggregate(
                    [r.temporal_consistency for r in ok]),
            }
        if group is None:
            out.setdefault('all', {'runs': 0, 'failed': 0})
            out['all']['diversity'] = _aggregate(list(self.diversity.values()))
        return out

    def to_dict(self) -> dict:
        return {
            'runs': [asdict(r) for r in self.runs],
            'diversity': self.diversity,
            'aggregates': self.aggregates(),
            'by_variant': self.aggregates('variant'),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=self.FIELDS,
                                lineterminator='\n')
        writer.writeheader()
        for run in self.runs:
            row = asdict(run)
            for k in ('final_iou', 'count_f1', 'temporal_consistency'):
                row[k] = f'{row[k]:.6f}'
            writer.writerow(row)
        return buffer.getvalue()
