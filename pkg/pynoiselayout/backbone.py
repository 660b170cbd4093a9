"""Denoising backbone base class and the state it exchanges with the pipeline.

Does not enforce any @abstractmethod, allowing the base class to provide
the backbone-independent parts (initial noise, time embedding, wrapping
differentiable maps into plain containers).
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .common import SimConfig
from .layout import HardLayout
from .scene import GroundTruthMasks, PromptSpec, SceneSpec
from .tensor import Tensor, tensor
from .utils import philox

__all__ = ['Latent', 'FeatureStack', 'CrossAttnMaps', 'Denoiser',
           'time_embedding']

_log = logging.getLogger(__name__)

EMBED_FREQUENCIES = 4


@dataclass(frozen=True)
class Latent:
    """Denoiser state `z_t` at timestep `t` of a `T`-step schedule."""
    z: np.ndarray
    t: int
    T: int

    def __post_init__(self):
        if self.z.ndim != 3:
            raise ValueError('Latent must be H×W×c')
        if not 0 <= self.t <= self.T:
            raise ValueError(f'Timestep {self.t} outside 0..{self.T}')


@dataclass(frozen=True)
class FeatureStack:
    """Attention-like features and the time embedding they were taken at."""
    features: np.ndarray
    time_embedding: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ValueError('Features must be H×W×c')
        if not np.all(np.isfinite(self.features)):
            raise ValueError('Features must be finite')
        if np.any(np.abs(self.time_embedding) > 1):
            raise ValueError('Time embedding components must lie in [-1, 1]')


@dataclass(frozen=True)
class CrossAttnMaps:
    """Per-instance attention distributions, shape k×H×W, each summing to 1."""
    A: np.ndarray

    @property
    def k(self) -> int:
        return self.A.shape[0]

    def entropy(self) -> float:
        """Mean entropy (nats) of the k maps."""
        if self.k == 0:
            return 0.0
        flat = self.A.reshape(self.k, -1)
        logs = np.log(np.where(flat > 0, flat, 1.0))
        return float(np.mean(-np.sum(flat * logs, axis=1)))


def time_embedding(t: int, T: int) -> np.ndarray:
    """Sinusoids of t/T at frequencies 2^0..2^3, interleaved (sin, cos)."""
    phase = t / T
    out = np.empty(2 * EMBED_FREQUENCIES)
    for f in range(EMBED_FREQUENCIES):
        out[2 * f] = np.sin(2 ** f * phase)
        out[2 * f + 1] = np.cos(2 ** f * phase)
    return out


class Denoiser:
    """Base class of a denoising backbone.

    Subclasses set `_name` so `loader.load_backbone` can find them.
    """

    _name: str = ''

    def __init__(self, config: Optional[SimConfig] = None) -> None:
        self._config = config or SimConfig()

    @property
    def name(self) -> str:
        return self._name

    @property
    def config(self) -> SimConfig:
        return self._config

    def init_latent(self, seed: int) -> Latent:
        """Sample `z_T` from the seed's counter-based noise stream."""
        c = self._config
        rng = philox(seed, 'latent')
        z = rng.standard_normal((c.height, c.width, c.channels))
        return Latent(z, c.steps, c.steps)

    def time_embedding(self, t: int) -> np.ndarray:
        return time_embedding(t, self._config.steps)

    def extract_features(self, latent: Latent) -> FeatureStack:
        """Features of a latent with the time embedding of its timestep."""
        features = self.feature_tensor(tensor(latent.z)).numpy()
        return FeatureStack(features, self.time_embedding(latent.t))

    def cross_attention(self,
                        latent: Latent,
                        scene: SceneSpec,
                        M_prev: Optional[HardLayout] = None) -> CrossAttnMaps:
        """Per-instance attention maps of a latent."""
        c = self._config
        A = self.attention_tensor(tensor(latent.z), scene, M_prev).numpy()
        return CrossAttnMaps(A.reshape(scene.k, c.height, c.width))

    def derive_scene(self,
                     latent: Latent,
                     prompt: PromptSpec,
                     seed: int) -> SceneSpec:
        """Derive the noise-induced scene from `z_T`."""
        raise NotImplementedError('Implement in backbone-specific subclass')

    def denoise_step(self,
                     latent: Latent,
                     scene: SceneSpec,
                     M_prev: Optional[HardLayout] = None) -> Latent:
        """Advance `z_t` to `z_{t-1}`, confined by the previous hard layout."""
        raise NotImplementedError('Implement in backbone-specific subclass')

    def feature_tensor(self, z: Tensor) -> Tensor:
        """Differentiable feature map of a latent tensor."""
        raise NotImplementedError('Implement in backbone-specific subclass')

    def attention_tensor(self,
                         z: Tensor,
                         scene: SceneSpec,
                         M_prev: Optional[HardLayout] = None) -> Tensor:
        """Differentiable k×n attention of a latent tensor."""
        raise NotImplementedError('Implement in backbone-specific subclass')

    def decode_weights(self, scene: SceneSpec, z0: np.ndarray) -> np.ndarray:
        """Per-pixel (n×k) presence weight of each instance in a latent."""
        raise NotImplementedError('Implement in backbone-specific subclass')

    def ground_truth(self,
                     scene: SceneSpec,
                     z0: np.ndarray,
                     threshold: float = 0.5) -> GroundTruthMasks:
        """Instance masks of a converged latent."""
        raise NotImplementedError('Implement in backbone-specific subclass')
