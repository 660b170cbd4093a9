"""Decisiveness losses and the latent optimization that applies them.

All losses take a soft-layout tensor aligned with a fixed hard layout and
return differentiable scalars, so the guidance step can push gradients
through the head and the backbone features into the latent.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backbone import CrossAttnMaps, Denoiser, Latent
from .common import GuidanceConfig, NonFiniteError, VarianceMode
from .layout import HardLayout
from .network import HeadParams, forward
from .scene import SceneSpec
from .tensor import (
    COSINE_EPS,
    Graph,
    Tensor,
    add_scalar,
    as_tensor,
    backward,
    cosine_similarity,
    div,
    l2_normalize,
    masked_mean,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    square,
    sum_,
    take,
    tensor,
    transpose,
)

__all__ = ['ClusterMeans', 'DecisiveLoss', 'GuidanceResult', 'cluster_means',
           'variance_loss', 'prob_layout', 'dice_loss', 'cross_loss',
           'decisive_loss', 'guidance_step', 'DICE_EPS']

_log = logging.getLogger(__name__)

DICE_EPS = 1e-6


def _flat(S) -> Tensor:
    S = as_tensor(S)
    if S.ndim == 3:
        return reshape(S, (S.shape[0] * S.shape[1], S.shape[2]))
    if S.ndim != 2:
        raise ValueError('Soft-layout must be H×W×d or n×d')
    return S


@dataclass
class ClusterMeans:
    """Mean soft-layout vector of every nonempty cluster.

    Attributes:
        mu: p×d means, one row per present label.
        present: The labels (0..k) with at least one pixel.
        empty: The labels without pixels, excluded downstream.
        k: Number of subject slots.
    """
    mu: Tensor
    present: list[int]
    empty: list[int]
    k: int


def cluster_means(S, M: HardLayout) -> ClusterMeans:
    """Per-cluster means of a soft-layout under a hard layout."""
    flat = _flat(S)
    if flat.shape[0] != M.labels.size:
        raise ValueError('Soft-layout and layout grids differ')
    sizes = M.sizes()
    present = [j for j in range(M.k + 1) if sizes[j] > 0]
    empty = [j for j in range(M.k + 1) if sizes[j] == 0]
    G = M.one_hot()[:, present] / sizes[present]
    return ClusterMeans(matmul(tensor(G.T), flat), present, empty, M.k)


def _pixel_columns(M: HardLayout, means: ClusterMeans) -> np.ndarray:
    lookup = np.full(M.k + 1, -1, dtype=np.int64)
    lookup[means.present] = np.arange(len(means.present))
    return lookup[M.labels.ravel()]


def variance_loss(S, M: HardLayout,
                  mode: VarianceMode = VarianceMode.DISTANCE) -> Tensor:
    """Per-cluster mean dissimilarity to μ, summed and divided by k+1.

    Empty clusters contribute nothing. Distance mode uses `(1 - sim)²`,
    verbatim mode `sim²`.
    """
    flat = _flat(S)
    means = cluster_means(flat, M)
    sims = cosine_similarity(flat, take(means.mu, _pixel_columns(M, means)))
    if mode == VarianceMode.DISTANCE:
        per_pixel = square(1.0 - sims)
    else:
        per_pixel = square(sims)
    sizes = M.sizes()
    G = M.one_hot()[:, means.present] / sizes[means.present]
    per_cluster = matmul(reshape(per_pixel, (1, per_pixel.shape[0])), tensor(G))
    return sum_(per_cluster) * (1.0 / (M.k + 1))


def prob_layout(S, means: ClusterMeans, tau: float) -> Tensor:
    """n×(k+1) soft assignment: softmax over clusters of `sim(S[x], μ_j)/τ`.

    Empty clusters get probability 0.

    Raises:
        ValueError: If every cluster is empty.
    """
    if not means.present:
        raise ValueError('All clusters are empty')
    flat = _flat(S)
    sims = matmul(l2_normalize(flat, COSINE_EPS),
                  transpose(l2_normalize(means.mu, COSINE_EPS)))
    P = softmax(sims, tau)
    scatter = np.zeros((len(means.present), means.k + 1))
    scatter[np.arange(len(means.present)), means.present] = 1.0
    return matmul(P, tensor(scatter))


def dice_loss(P, M: HardLayout, eps: float = DICE_EPS) -> Tensor:
    """One minus the mean soft Dice coefficient over the k+1 clusters."""
    P = as_tensor(P)
    G = M.one_hot()
    if P.shape != G.shape:
        raise ValueError(f'Assignment shape {P.shape} != layout {G.shape}')
    overlap = sum_(mul(P, tensor(G)), axis=0)
    numerator = add_scalar(2.0 * overlap, eps)
    denominator = add_scalar(sum_(square(P), axis=0) + tensor(G.sum(axis=0)), eps)
    return 1.0 - mean(div(numerator, denominator))


def tagged_instances(M: HardLayout) -> dict[int, int]:
    """Instance id to nonempty tagged label."""
    present = set(M.present)
    return {inst: label for label, inst in M.instance_tags.items()
            if label in present}


def cross_loss(attn, M: HardLayout) -> Tensor:
    """Mean over tagged instances of one minus the in-mask attention mass.

    Args:
        attn: k×n (or k×H×W) attention maps.
        M: Hard layout whose tags map labels to instances.
    """
    if isinstance(attn, CrossAttnMaps):
        attn = attn.A
    attn = as_tensor(attn)
    k = attn.shape[0]
    flat = reshape(attn, (k, M.labels.size)) if attn.ndim == 3 else attn
    owned = tagged_instances(M)
    excluded = [j for j in range(k) if j not in owned]
    if excluded:
        _log.debug('Cross loss excludes untagged instances %s', excluded)
    if not owned:
        _log.warning('No tagged instance for cross loss')
        return tensor(0.0)
    inside = np.zeros((k, M.labels.size))
    labels = M.labels.ravel()
    for j, label in owned.items():
        inside[j] = labels == label
    mass = sum_(mul(flat, tensor(inside)), axis=1)
    include = np.asarray([j in owned for j in range(k)])
    return 1.0 - masked_mean(mass, include, axis=0)


@dataclass
class DecisiveLoss:
    """Weighted total and the three components (all differentiable)."""
    total: Tensor
    cross: Tensor
    var: Tensor
    dice: Tensor

    def values(self) -> dict[str, float]:
        return {'total': self.total.item(), 'cross': self.cross.item(),
                'var': self.var.item(), 'dice': self.dice.item()}


def decisive_loss(S, M_prev: HardLayout, attn,
                  cfg: Optional[GuidanceConfig] = None) -> DecisiveLoss:
    """`α_cross·L_cross + α_var·L_var + α_dice·L_dice` of S against M_prev."""
    cfg = cfg or GuidanceConfig()
    flat = _flat(S)
    means = cluster_means(flat, M_prev)
    l_cross = cross_loss(attn, M_prev)
    l_var = variance_loss(flat, M_prev, cfg.variance_mode)
    l_dice = dice_loss(prob_layout(flat, means, cfg.tau), M_prev)
    total = (cfg.alpha_cross * l_cross + cfg.alpha_var * l_var
             + cfg.alpha_dice * l_dice)
    return DecisiveLoss(total, l_cross, l_var, l_dice)


@dataclass
class GuidanceResult:
    """Optimized latent and the loss values seen at each iteration."""
    latent: Latent
    losses: list[dict[str, float]] = field(default_factory=list)
    aborted: bool = False


def _step_direction(grad: np.ndarray, normalize: bool) -> np.ndarray:
    """The gradient, optionally scaled to unit root-mean-square."""
    if not normalize:
        return grad
    rms = float(np.sqrt(np.mean(np.square(grad))))
    if rms == 0.0:
        return grad
    return grad / rms


def guidance_step(latent: Latent,
                  M_prev: HardLayout,
                  scene: SceneSpec,
                  params: HeadParams,
                  backbone: Denoiser,
                  cfg: Optional[GuidanceConfig] = None) -> GuidanceResult:
    """Gradient descent on the latent so its soft-layout follows M_prev.

    Each iteration moves the latent by `step_size` in root-mean-square
    unless `normalize_gradient` is off.

    A non-finite loss or gradient stops the loop and keeps the last finite
    latent, with `aborted` set.
    """
    cfg = cfg or GuidanceConfig()
    z = latent.z
    temb = backbone.time_embedding(latent.t)
    constants = {k: tensor(v) for k, v in params.arrays().items()}
    result = GuidanceResult(latent)
    for iteration in range(cfg.iterations_per_step):
        graph = Graph()
        try:
            with graph.record():
                leaf = graph.leaf(z)
                S = forward(backbone.feature_tensor(leaf), temb, constants)
                attn = backbone.attention_tensor(leaf, scene, M_prev)
                loss = decisive_loss(S, M_prev, attn, cfg)
            grad = (backward(graph, loss.total)[leaf] if loss.total.tracked
                    else np.zeros(z.shape))
        except NonFiniteError as exc:
            _log.warning('Guidance aborted at t=%d iteration %d: %s',
                         latent.t, iteration, exc)
            result.aborted = True
            break
        if not np.all(np.isfinite(grad)):
            _log.warning('Guidance aborted at t=%d iteration %d:'
                         ' non-finite gradient', latent.t, iteration)
            result.aborted = True
            break
        result.losses.append(loss.values())
        _log.debug('t=%d iteration %d loss %.6f', latent.t, iteration,
                   result.losses[-1]['total'])
        z = z - cfg.step_size * _step_direction(grad, cfg.normalize_gradient)
    result.latent = Latent(z, latent.t, latent.T)
    return result
