"""The generation loop, its traces on disk and the ablation harness.

Each denoising step is followed by soft-layout prediction and hardening;
within the guided window the new latent is then optimized so that its
soft-layout follows the hard layout just obtained.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .backbone import Denoiser, Latent
from .cluster import harden
from .common import (
    AblationVariant,
    ClusterConfig,
    EvalConfig,
    GuidanceConfig,
    SimConfig,
    config_to_dict,
)
from .guidance import guidance_step
from .layout import PALETTE, HardLayout, LayoutHistory, SoftLayout
from .loader import load_backbone
from .metrics import (
    EvalReport,
    RunMetrics,
    count_f1,
    diversity,
    layout_iou,
    temporal_consistency,
)
from .network import HeadParams, predict
from .scene import GroundTruthMasks, PromptSpec, SceneSpec
from .utils import array_checksum

__all__ = ['RunConfig', 'StepRecord', 'GenerationTrace', 'StoredTrace',
           'generate', 'render_layout', 'write_trace', 'read_trace',
           'evaluate_traces', 'ablate']

_log = logging.getLogger(__name__)

METRICS_FIELDS = ['t', 'iteration', 'total', 'cross', 'var', 'dice']


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one generation run."""
    prompt: PromptSpec
    seed: int = 0
    variant: AblationVariant = AblationVariant.FULL
    sim: SimConfig = field(default_factory=SimConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    backbone: str = 'simulator'
    full_trace: bool = False

    @property
    def T(self) -> int:
        return self.sim.steps

    @property
    def loss_weights(self) -> GuidanceConfig:
        return self.guidance.for_variant(self.variant)

    def is_guided(self, t: int) -> bool:
        """Whether the latent produced by denoising step t gets guidance."""
        return self.variant.is_guided() and self.T - t < self.guidance.guided_steps

    def to_dict(self) -> dict:
        return {
            'prompt': self.prompt.to_dict(),
            'seed': self.seed,
            'variant': self.variant.name.lower(),
            'sim': config_to_dict(self.sim),
            'guidance': config_to_dict(self.guidance),
            'cluster': config_to_dict(self.cluster),
            'backbone': self.backbone,
            'full_trace': self.full_trace,
        }


@dataclass
class StepRecord:
    """State after denoising step t (and its guidance, if any)."""
    t: int
    checksum: str
    soft: SoftLayout
    hard: HardLayout
    attention_entropy: float
    guided: bool = False
    aborted: bool = False
    losses: list[dict[str, float]] = field(default_factory=list)
    neglected: list[int] = field(default_factory=list)
    latent: Optional[np.ndarray] = None


@dataclass
class GenerationTrace:
    """The per-step records of one seeded run."""
    config: RunConfig
    scene: SceneSpec
    steps: list[StepRecord] = field(default_factory=list)
    ground_truth: Optional[GroundTruthMasks] = None
    final_checksum: str = ''
    failed: bool = False
    error: str = ''

    def layouts(self) -> list[HardLayout]:
        return [s.hard for s in self.steps]

    def checksums(self) -> list[str]:
        return [s.checksum for s in self.steps]

    @property
    def final_layout(self) -> Optional[HardLayout]:
        return self.steps[-1].hard if self.steps else None

    def neglect_events(self) -> list[dict]:
        return [{'t': s.t, 'instances': s.neglected}
                for s in self.steps if s.neglected]

    def run_metrics(self, name: str,
                    cfg: Optional[EvalConfig] = None) -> RunMetrics:
        return _run_metrics(name, self.config.prompt, self.config.seed,
                            self.config.variant, self.layouts(),
                            self.ground_truth, self.failed,
                            len(self.neglect_events()), cfg)


@dataclass
class StoredTrace:
    """A trace directory read back for evaluation."""
    path: Path
    prompt: PromptSpec
    seed: int
    variant: AblationVariant
    layouts: list[HardLayout]
    ground_truth: Optional[GroundTruthMasks]
    failed: bool = False
    neglected: int = 0

    def run_metrics(self, cfg: Optional[EvalConfig] = None) -> RunMetrics:
        return _run_metrics(self.path.name, self.prompt, self.seed,
                            self.variant, self.layouts, self.ground_truth,
                            self.failed, self.neglected, cfg)


def _run_metrics(name: str,
                 prompt: PromptSpec,
                 seed: int,
                 variant: AblationVariant,
                 layouts: list[HardLayout],
                 gt: Optional[GroundTruthMasks],
                 failed: bool,
                 neglected: int,
                 cfg: Optional[EvalConfig]) -> RunMetrics:
    cfg = cfg or EvalConfig()
    nan = float('nan')
    metrics = RunMetrics(name, prompt.to_compact(), seed, variant.name.lower(),
                         nan, nan, nan, failed, neglected)
    if failed or not layouts:
        metrics.failed = True
        return metrics
    final = layouts[-1]
    if gt is not None:
        metrics.final_iou = layout_iou(final, gt)
    metrics.count_f1 = count_f1(final, prompt, cfg.min_subject_area)
    if len(layouts) >= 2:
        metrics.temporal_consistency = temporal_consistency(layouts)
    return metrics


def _soft(backbone: Denoiser, latent: Latent,
          params: HeadParams, t: int) -> SoftLayout:
    return predict(backbone.extract_features(latent), params, t)


def _same_timestep_target(latent: Latent,
                          history: LayoutHistory,
                          M: HardLayout,
                          scene: SceneSpec,
                          params: HeadParams,
                          backbone: Denoiser,
                          cfg: RunConfig) -> HardLayout:
    """Harden one extra denoising step ahead to align against M^{t-1}."""
    if latent.t == 0:
        return M
    mask = M if cfg.variant.is_bounded() else None
    peek = backbone.denoise_step(latent, scene, mask)
    ahead = history.copy()
    ahead.previous = M
    t = history.latest_t - 1
    ahead.push(t, _soft(backbone, peek, params, t))
    attn = backbone.cross_attention(peek, scene, mask)
    return harden(ahead, attn, cfg.prompt, t, cfg.T, cfg.cluster, cfg.seed)


def generate(cfg: RunConfig, params: HeadParams) -> GenerationTrace:
    """Run the denoise, predict, harden and guide loop for t = T..1.

    Raises:
        SceneInfeasibleError: If the prompt cannot be placed in the noise.

    Returns:
        The trace. Numeric failures inside the loop mark it failed and keep
            the steps recorded so far.
    """
    backbone = load_backbone(cfg.backbone)(cfg.sim)
    latent = backbone.init_latent(cfg.seed)
    scene = backbone.derive_scene(latent, cfg.prompt, cfg.seed)
    trace = GenerationTrace(cfg, scene)
    history = LayoutHistory(cfg.cluster.window)
    weights = cfg.loss_weights
    bounded = cfg.variant.is_bounded()
    M: Optional[HardLayout] = None
    _log.info('Generating %s seed=%d variant=%s T=%d', cfg.prompt.to_compact(),
              cfg.seed, cfg.variant.name.lower(), cfg.T)
    try:
        for t in range(cfg.T, 0, -1):
            mask = M if bounded else None
            latent = backbone.denoise_step(latent, scene, mask)
            soft = _soft(backbone, latent, params, t)
            history.push(t, soft)
            attn = backbone.cross_attention(latent, scene, mask)
            M = harden(history, attn, cfg.prompt, t, cfg.T, cfg.cluster, cfg.seed)
            history.previous = M
            record = StepRecord(t, '', soft, M, attn.entropy(),
                                neglected=M.missing_instances())
            if record.neglected:
                _log.warning('t=%d neglected instances %s', t, record.neglected)
            if cfg.is_guided(t) and weights.iterations_per_step > 0:
                target = M
                if cfg.variant == AblationVariant.SAME_TIMESTEP:
                    target = _same_timestep_target(latent, history, M, scene,
                                                   params, backbone, cfg)
                result = guidance_step(latent, target, scene, params,
                                       backbone, weights)
                latent = result.latent
                record.guided = True
                record.aborted = result.aborted
                record.losses = result.losses
            record.checksum = array_checksum(latent.z)
            if cfg.full_trace:
                record.latent = latent.z.copy()
            trace.steps.append(record)
            _log.debug('t=%d present=%s entropy=%.4f', t, M.present,
                       record.attention_entropy)
    except (ArithmeticError, ValueError) as exc:
        _log.error('Run seed=%d failed at t=%s: %s', cfg.seed,
                   trace.steps[-1].t - 1 if trace.steps else cfg.T, exc)
        trace.failed = True
        trace.error = str(exc)
        return trace
    trace.ground_truth = backbone.ground_truth(scene, latent.z)
    trace.final_checksum = array_checksum(latent.z)
    return trace


def _pca_rgb(S: np.ndarray) -> np.ndarray:
    height, width, depth = S.shape
    X = S.reshape(height * width, depth)
    X = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    components = np.zeros((3, depth))
    components[:min(3, Vt.shape[0])] = Vt[:3]
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1
    proj = X @ components.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (proj - lo) / np.where(span > 0, span, 1.0), 0.0)
    return np.round(scaled * 255).astype(np.uint8).reshape(height, width, 3)


def render_layout(layout: Union[HardLayout, SoftLayout, np.ndarray],
                  path: Union[str, Path]) -> Path:
    """Write a layout as PNG.

    Hard layouts use the indexed palette; soft-layouts are projected on
    their first three principal components and scaled to RGB.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(layout, HardLayout):
        height, width = layout.shape
        image = Image.frombytes('P', (width, height),
                                layout.labels.astype(np.uint8).tobytes())
        image.putpalette([v for rgb in PALETTE for v in rgb])
    else:
        S = layout.S if isinstance(layout, SoftLayout) else np.asarray(layout)
        if S.ndim != 3:
            raise ValueError('Soft-layout must be H×W×d')
        image = Image.fromarray(_pca_rgb(S))
    image.save(path, format='PNG')
    return path


def _write_json(path: Path, obj: dict) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + '\n')


def write_trace(trace: GenerationTrace,
                out_dir: Union[str, Path],
                eval_cfg: Optional[EvalConfig] = None) -> Path:
    """Write a trace directory.

    Contents: `config.json`, `metrics.csv` (guidance losses per iteration),
    `layouts/t####_{soft,hard}.png`, `layouts/t####_hard.json` and
    `summary.json`. A full trace adds `.npy` latents and soft-layouts.
    """
    out_dir = Path(out_dir)
    layouts_dir = out_dir / 'layouts'
    layouts_dir.mkdir(parents=True, exist_ok=True)
    cfg = trace.config
    _write_json(out_dir / 'config.json', cfg.to_dict())
    with open(out_dir / 'metrics.csv', 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(METRICS_FIELDS)
        for step in trace.steps:
            for i, losses in enumerate(step.losses):
                writer.writerow([step.t, i] + [f'{losses[k]:.8f}'
                                               for k in METRICS_FIELDS[2:]])
    for step in trace.steps:
        stem = f't{step.t:04d}'
        render_layout(step.soft, layouts_dir / f'{stem}_soft.png')
        render_layout(step.hard, layouts_dir / f'{stem}_hard.png')
        _write_json(layouts_dir / f'{stem}_hard.json', step.hard.to_dict())
        if cfg.full_trace:
            np.save(layouts_dir / f'{stem}_soft.npy', step.soft.S)
            if step.latent is not None:
                np.save(layouts_dir / f'{stem}_latent.npy', step.latent)
    summary = {
        'prompt': cfg.prompt.to_dict(),
        'prompt_text': cfg.prompt.to_text(),
        'seed': cfg.seed,
        'variant': cfg.variant.name.lower(),
        'scene': trace.scene.to_dict(),
        'ground_truth': (trace.ground_truth.to_dict()
                         if trace.ground_truth else None),
        'neglect_events': trace.neglect_events(),
        'failed': trace.failed,
        'error': trace.error,
        'final_checksum': trace.final_checksum,
        'steps': [{'t': s.t, 'checksum': s.checksum,
                   'attention_entropy': round(s.attention_entropy, 10),
                   'guided': s.guided, 'aborted': s.aborted}
                  for s in trace.steps],
        'metrics': trace.run_metrics(out_dir.name, eval_cfg).__dict__,
    }
    _write_json(out_dir / 'summary.json', summary)
    _log.info('Trace written to %s (%d steps)', out_dir, len(trace.steps))
    return out_dir


def read_trace(path: Union[str, Path]) -> StoredTrace:
    """Read the summary and hard layouts of a trace directory.

    Raises:
        ValueError: If `summary.json` is missing.
    """
    path = Path(path)
    summary_path = path / 'summary.json'
    if not summary_path.is_file():
        raise ValueError(f'No trace summary in {path}')
    with open(summary_path, 'r', encoding='utf-8') as f:
        summary = json.load(f)
    layouts = []
    for file in sorted((path / 'layouts').glob('t*_hard.json'), reverse=True):
        with open(file, 'r', encoding='utf-8') as f:
            layouts.append(HardLayout.from_dict(json.load(f)))
    gt = summary.get('ground_truth')
    return StoredTrace(
        path=path,
        prompt=PromptSpec.from_dict(summary['prompt']),
        seed=int(summary['seed']),
        variant=AblationVariant.parse(summary['variant']),
        layouts=layouts,
        ground_truth=GroundTruthMasks.from_dict(gt) if gt else None,
        failed=bool(summary.get('failed', False)),
        neglected=len(summary.get('neglect_events', [])),
    )


def _diversity_by_prompt(runs: Sequence[tuple[str, AblationVariant, Optional[HardLayout]]]
                         ) -> dict[str, float]:
    groups: dict[str, list[HardLayout]] = {}
    for prompt, variant, final in runs:
        if final is not None:
            groups.setdefault(f'{prompt}@{variant.name.lower()}', []).append(final)
    return {key: diversity(finals) for key, finals in sorted(groups.items())
            if len(finals) >= 2}


def evaluate_traces(traces_dir: Union[str, Path],
                    cfg: Optional[EvalConfig] = None) -> EvalReport:
    """Recompute metrics from every trace directory under `traces_dir`.

    Raises:
        ValueError: If no trace is found.
    """
    traces_dir = Path(traces_dir)
    if (traces_dir / 'summary.json').is_file():
        paths = [traces_dir]
    else:
        paths = sorted(p.parent for p in traces_dir.glob('*/summary.json'))
    if not paths:
        raise ValueError(f'No traces found in {traces_dir}')
    stored = [read_trace(p) for p in paths]
    report = EvalReport(runs=[s.run_metrics(cfg) for s in stored])
    report.diversity = _diversity_by_prompt(
        [(s.prompt.to_compact(), s.variant,
          None if s.failed or not s.layouts else s.layouts[-1])
         for s in stored])
    _log.info('Evaluated %d traces', len(stored))
    return report


def _run_one(job: tuple[AblationVariant, int],
             base: RunConfig,
             params: HeadParams,
             out_dir: Optional[Path],
             eval_cfg: Optional[EvalConfig]) -> tuple[RunMetrics, Optional[HardLayout]]:
    variant, seed = job
    cfg = replace(base, variant=variant, seed=seed)
    name = f'{variant.name.lower()}_s{seed}'
    try:
        trace = generate(cfg, params)
    except (ArithmeticError, ValueError) as exc:
        _log.error('Run %s failed: %s', name, exc)
        return _run_metrics(name, cfg.prompt, seed, variant, [], None,
                            True, 0, eval_cfg), None
    if out_dir is not None:
        write_trace(trace, out_dir / name, eval_cfg)
    final = None if trace.failed else trace.final_layout
    return trace.run_metrics(name, eval_cfg), final


def ablate(base: RunConfig,
           variants: Sequence[AblationVariant],
           seeds: Sequence[int],
           params: HeadParams,
           **kwargs) -> EvalReport:
    """Run every (variant, seed) pair and collect their metrics.

    Args:
        base: The shared run configuration.
        variants: Variants to compare.
        seeds: Seeds per variant.
        params: Trained head weights.
        **jobs (int): Worker threads, default 1. Rows are ordered by
            (variant, seed) for any worker count.
        **out_dir (str|Path): Writes each trace plus `ablation.csv` and
            `ablation.json` here when given.
        **eval_cfg (EvalConfig): Evaluation settings.

    Returns:
        EvalReport with one row per run; failed runs are kept as rows.
    """
    jobs = int(kwargs.get('jobs', 1))
    out_dir = Path(kwargs['out_dir']) if kwargs.get('out_dir') else None
    eval_cfg = kwargs.get('eval_cfg')
    work = [(v, int(s)) for v in sorted(set(variants)) for s in seeds]
    run = partial(_run_one, base=base, params=params, out_dir=out_dir,
                  eval_cfg=eval_cfg)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(run, work))
    report = EvalReport(runs=[metrics for metrics, _ in results])
    report.diversity = _diversity_by_prompt(
        [(base.prompt.to_compact(), v, final)
         for (v, _), (_, final) in zip(work, results)])
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / 'ablation.csv', 'w', encoding='utf-8', newline='\n') as f:
            f.write(report.to_csv())
        with open(out_dir / 'ablation.json', 'w', encoding='utf-8', newline='\n') as f:
            f.write(report.to_json() + '\n')
    _log.info('Ablation finished: %d runs, %d failed', len(report.runs),
              sum(r.failed for r in report.runs))
    return report
