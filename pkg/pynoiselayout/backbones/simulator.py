"""Synthetic denoiser whose latents settle onto Gaussian subject blobs.

The scene (blob centers, radii, signatures) is derived once from `z_T` and
held fixed. Each denoising step pulls the latent toward the scene's clean
field; a hard layout confines each subject region to its own instance, the
way bounded attention blocks queries of one subject from keys of another.
"""

import logging
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from pynoiselayout.backbone import Denoiser, Latent
from pynoiselayout.common import SceneInfeasibleError, SimConfig
from pynoiselayout.layout import HardLayout
from pynoiselayout.scene import (
    POSTFIXES,
    GroundTruthMasks,
    InstanceSpec,
    PromptSpec,
    SceneSpec,
)
from pynoiselayout.tensor import Tensor, conv2d, matmul, mul, reshape, softmax, tensor, transpose
from pynoiselayout.utils import philox

__all__ = ['SimulatedDenoiser', 'apply_attention_mask']

_log = logging.getLogger(__name__)


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    return arr / np.linalg.norm(arr, axis=-1, keepdims=True)


def _blocked(query_labels: np.ndarray, key_labels: np.ndarray) -> np.ndarray:
    """True where a subject query meets a different subject key."""
    q = np.asarray(query_labels)[:, None]
    k = np.asarray(key_labels)[None, :]
    return (q >= 1) & (k >= 1) & (q != k)


def apply_attention_mask(scores: Union[Tensor, np.ndarray],
                         M: HardLayout) -> np.ndarray:
    """Set cross-subject query/key scores to -inf.

    Args:
        scores: n×n scores with n = H·W in row-major pixel order.
        M: The hard layout; background queries and keys stay unrestricted.

    Returns:
        A masked copy of `scores`.
    """
    arr = scores.numpy() if isinstance(scores, Tensor) else np.array(scores,
                                                                       dtype=np.float64)
    labels = M.labels.ravel()
    if arr.shape != (labels.size, labels.size):
        raise ValueError(f'Scores must be {labels.size}×{labels.size}')
    return np.where(_blocked(labels, labels), -np.inf, arr)


def _box_mean(arr: np.ndarray, size: int) -> np.ndarray:
    """Mean over the in-grid part of a size×size window, per channel."""
    footprint = (size, size, 1)
    total = ndimage.uniform_filter(arr, size=footprint, mode='constant')
    count = ndimage.uniform_filter(np.ones(arr.shape[:2] + (1,)),
                                   size=footprint, mode='constant')
    return total / count


class SimulatedDenoiser(Denoiser):
    """Gaussian-blob denoiser with fixed class and background signatures."""

    _name = 'simulator'

    def __init__(self, config: Optional[SimConfig] = None) -> None:
        super().__init__(config)
        c = self._config
        self._class_signatures = _unit_rows(
            philox(c.world_seed, 'class_signatures')
            .standard_normal((c.class_pool, c.channels)))
        self._background_signatures = _unit_rows(
            philox(c.world_seed, 'background_signatures')
            .standard_normal((len(POSTFIXES), c.channels)))
        rows, cols = np.mgrid[0:c.height, 0:c.width]
        self._pixels = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(float)
        s = c.feature_smoothing
        kernel = np.zeros((s, s, c.channels, c.channels))
        for ch in range(c.channels):
            kernel[:, :, ch, ch] = 1.0
        self._feature_kernel = tensor(kernel)
        count = ndimage.uniform_filter(np.ones((c.height, c.width)), size=s,
                                       mode='constant') * s * s
        self._feature_scale = tensor(np.repeat(
            (1.0 / np.round(count))[:, :, None], c.channels, axis=2))

    @property
    def class_signatures(self) -> np.ndarray:
        return self._class_signatures

    @property
    def background_signatures(self) -> np.ndarray:
        return self._background_signatures

    # Scene derivation

    def derive_scene(self,
                     latent: Latent,
                     prompt: PromptSpec,
                     seed: int) -> SceneSpec:
        """Place one blob per prompt instance on the smoothed initial noise.

        Centers are the strongest responses of each class signature on the
        box-smoothed `z_T`, greedily suppressed within a radius that is
        relaxed when the instances do not fit.

        Raises:
            SceneInfeasibleError: If the instances do not fit at the
                smallest suppression radius.
        """
        c = self._config
        if latent.t != latent.T:
            raise ValueError('Scenes derive from the initial latent only')
        if any(int(cls) >= c.class_pool for cls, _ in prompt.subjects):
            raise ValueError(f'Class ids limited to the pool of {c.class_pool}')
        smoothed = _box_mean(latent.z, c.scene_smoothing)
        centers = self._place_centers(smoothed, prompt)
        k = len(centers)
        radii = philox(seed, 'radius').uniform(c.radius_min, c.radius_max, k)
        pos = np.asarray(centers, dtype=float)
        for i in range(k):
            if k > 1:
                dist = np.sqrt(np.sum((pos - pos[i]) ** 2, axis=1))
                nearest = np.min(np.delete(dist, i))
                radii[i] = max(c.radius_min, min(radii[i], 0.45 * nearest))
        sig_rng = philox(seed, 'signature')
        instances = []
        for i, cls in enumerate(prompt.instance_classes()):
            own = _unit_rows(sig_rng.standard_normal(c.channels))
            sig = _unit_rows(c.instance_mix * self._class_signatures[cls] + own)
            instances.append(InstanceSpec(i, cls, centers[i], float(radii[i]), sig))
        bg = self._background_signatures[prompt.background_class]
        return SceneSpec(instances, bg, seed, (c.height, c.width))

    def _place_centers(self,
                       smoothed: np.ndarray,
                       prompt: PromptSpec) -> list[tuple[int, int]]:
        c = self._config
        radius = c.nms_radius
        while radius >= c.nms_min_radius:
            centers = self._suppress(smoothed, prompt, radius)
            if centers is not None:
                if radius < c.nms_radius:
                    _log.debug('Placed %d centers at relaxed radius %d',
                               len(centers), radius)
                return centers
            radius -= c.nms_relax_step
        raise SceneInfeasibleError(f'Scene infeasible: {prompt.k} instances'
                                   f' do not fit at radius {c.nms_min_radius}')

    def _suppress(self,
                  smoothed: np.ndarray,
                  prompt: PromptSpec,
                  radius: float) -> Optional[list[tuple[int, int]]]:
        c = self._config
        m = c.center_margin
        chosen: list[tuple[int, int]] = []
        for cls, count in prompt.subjects:
            proj = smoothed @ self._class_signatures[cls]
            interior = proj[m:c.height - m, m:c.width - m]
            order = np.argsort(-interior, axis=None, kind='stable')
            picked = 0
            for idx in order:
                row, col = divmod(int(idx), interior.shape[1])
                row, col = row + m, col + m
                if all((row - a) ** 2 + (col - b) ** 2 >= radius ** 2
                       for a, b in chosen):
                    chosen.append((row, col))
                    picked += 1
                    if picked == count:
                        break
            if picked < count:
                return None
        return chosen

    # Dynamics

    def gaussian_weights(self, scene: SceneSpec) -> np.ndarray:
        """n×k blob weights exp(-d²/2r²) per pixel and instance."""
        if scene.k == 0:
            return np.zeros((self._pixels.shape[0], 0))
        centers = np.asarray([i.center for i in scene.instances], dtype=float)
        radii = np.asarray([i.radius for i in scene.instances])
        d2 = np.sum((self._pixels[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        return np.exp(-d2 / (2.0 * radii ** 2))

    def instance_labels(self, scene: SceneSpec, M: HardLayout) -> np.ndarray:
        """Per-pixel instance key (instance + 1) of a hard layout.

        Background is 0; an untagged subject label blocks every instance.
        """
        flat = M.labels.ravel()
        out = np.zeros(flat.size, dtype=np.int64)
        tags = M.instance_tags
        for label in M.present:
            inst = tags.get(label)
            out[flat == label] = inst + 1 if inst is not None else scene.k + 1 + label
        return out

    def clean_field(self,
                    scene: SceneSpec,
                    M: Optional[HardLayout] = None) -> np.ndarray:
        """The attractor of the dynamics, optionally confined by a layout."""
        c = self._config
        weights = self.gaussian_weights(scene)
        if M is not None:
            keys = np.arange(1, scene.k + 1)
            weights = np.where(_blocked(self.instance_labels(scene, M), keys),
                               0.0, weights)
        field = scene.background_signature + weights @ scene.signatures()
        return field.reshape(c.height, c.width, c.channels)

    def denoise_step(self,
                     latent: Latent,
                     scene: SceneSpec,
                     M_prev: Optional[HardLayout] = None) -> Latent:
        """One step `z_{t-1} = z_t + (clean - z_t)/t + sigma(t)·noise`."""
        if latent.t < 1:
            raise ValueError('Cannot denoise past t=0')
        t, T = latent.t, latent.T
        eta = 1.0 / t
        sigma = self._config.sigma_max * (t - 1) / T
        clean = self.clean_field(scene, M_prev)
        noise = philox(scene.seed, 'noise', t).standard_normal(latent.z.shape)
        z = (1.0 - eta) * latent.z + eta * clean + sigma * noise
        return Latent(z, t - 1, T)

    # Features and attention

    def feature_tensor(self, z: Tensor) -> Tensor:
        """Box-smoothed latent channels (mean over the in-grid window)."""
        return mul(conv2d(z, self._feature_kernel), self._feature_scale)

    def attention_mask(self, k: int, M: HardLayout) -> np.ndarray:
        """k×n allowed pixels: the instance's own region and background."""
        flat = M.labels.ravel()
        allowed = np.repeat((flat == 0)[None, :], k, axis=0)
        for j in range(k):
            label = M.label_of(j)
            if label is not None:
                allowed[j] |= flat == label
        return allowed

    def attention_tensor(self,
                         z: Tensor,
                         scene: SceneSpec,
                         M_prev: Optional[HardLayout] = None) -> Tensor:
        c = self._config
        n = c.pixels
        feats = reshape(self.feature_tensor(z), (n, c.channels))
        logits = matmul(tensor(scene.signatures()), transpose(feats))
        mask = None
        if M_prev is not None:
            mask = self.attention_mask(scene.k, M_prev)
            empty = ~mask.any(axis=1)
            if empty.any():
                _log.warning('Attention fully masked for instance(s) %s,'
                             ' using uniform maps', np.flatnonzero(empty).tolist())
                keep = np.ones((scene.k, n))
                keep[empty] = 0.0
                logits = mul(logits, tensor(keep))
                mask[empty] = True
        return softmax(logits, c.attn_temperature, mask)

    # Ground truth

    def decode_weights(self, scene: SceneSpec, z0: np.ndarray) -> np.ndarray:
        """Least-squares blob weights (n×k) explaining `z0 - background`."""
        c = self._config
        residual = z0.reshape(c.pixels, c.channels) - scene.background_signature
        weights, *_ = np.linalg.lstsq(scene.signatures().T, residual.T, rcond=None)
        return weights.T

    def ground_truth(self,
                     scene: SceneSpec,
                     z0: np.ndarray,
                     threshold: float = 0.5) -> GroundTruthMasks:
        """Label each pixel by its dominant decoded blob, if strong enough.

        An instance that dominates no pixel keeps its center pixel.
        """
        c = self._config
        weights = self.decode_weights(scene, z0)
        best = np.argmax(weights, axis=1)
        top = weights[np.arange(weights.shape[0]), best]
        labels = np.where(top >= threshold, best + 1, 0).reshape(c.height, c.width)
        # centers are distinct, so a claimed center is never taken back
        for _ in range(scene.k):
            counts = np.bincount(labels.ravel(), minlength=scene.k + 1)
            empty = [i for i in scene.instances if counts[i.instance_id + 1] == 0]
            if not empty:
                break
            for inst in empty:
                _log.debug('Instance %d has no footprint', inst.instance_id)
                labels[inst.center] = inst.instance_id + 1
        return GroundTruthMasks(labels,
                                [i.class_id for i in scene.instances])
