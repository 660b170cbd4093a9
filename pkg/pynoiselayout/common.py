"""Common constants, enumerations and configuration classes."""

from dataclasses import asdict, dataclass, replace
from enum import Enum, IntEnum


class SceneInfeasibleError(ValueError):
    """The requested subjects cannot be placed in the noise-induced scene."""


class NonFiniteError(ArithmeticError):
    """A numeric operation produced NaN or infinite values."""


class ExitCode(IntEnum):
    """Process exit codes of the command line interface."""
    OK = 0
    INPUT_ERROR = 2
    NUMERIC_FAILURE = 3
    SCENE_INFEASIBLE = 4


class SubjectClass(IntEnum):
    """The pool of subject classes used to compose prompts."""
    PERSON = 0
    BICYCLE = 1
    CAR = 2
    MOTORCYCLE = 3
    AIRPLANE = 4
    BUS = 5
    TRAIN = 6
    TRUCK = 7
    BOAT = 8
    BIRD = 9
    CAT = 10
    DOG = 11
    HORSE = 12
    SHEEP = 13
    COW = 14
    ELEPHANT = 15
    BEAR = 16
    ZEBRA = 17
    GIRAFFE = 18
    APPLE = 19

    @property
    def noun(self) -> str:
        return self.name.lower()

    def plural(self) -> str:
        if self.noun in ('person',):
            return 'people'
        if self.noun in ('sheep',):
            return self.noun
        if self.noun.endswith('s') or self.noun.endswith('h'):
            return f'{self.noun}es'
        return f'{self.noun}s'

    @classmethod
    def parse(cls, token: str) -> 'SubjectClass':
        """Get a class from its name or integer id."""
        token = token.strip()
        if token.isdigit():
            return cls(int(token))
        try:
            return cls[token.upper()]
        except KeyError as exc:
            raise ValueError(f'Unknown subject class: {token}') from exc


class AblationVariant(IntEnum):
    """Generation variants compared by the ablation harness."""
    FULL = 0
    NO_DECISIVE = 1
    NO_CROSS = 2
    NO_VAR = 3
    NO_DICE = 4
    SAME_TIMESTEP = 5
    VANILLA = 6

    def is_guided(self) -> bool:
        return self.name not in ['NO_DECISIVE', 'VANILLA']

    def is_bounded(self) -> bool:
        """Whether denoising applies the hard-layout attention masks."""
        return self.name != 'VANILLA'

    @classmethod
    def parse(cls, token: str) -> 'AblationVariant':
        try:
            return cls[token.strip().upper()]
        except KeyError as exc:
            raise ValueError(f'Unknown variant: {token}') from exc


class VarianceMode(IntEnum):
    """Form of the cluster variance term."""
    DISTANCE = 0   # (1 - sim)^2
    VERBATIM = 1   # sim^2 as printed


class KMeansMetric(IntEnum):
    """Distance used by the hard-clustering K-means."""
    COSINE = 0
    EUCLIDEAN = 1


@dataclass(frozen=True)
class SimConfig:
    """Settings of the synthetic denoiser.

    Attributes:
        height: Latent grid rows.
        width: Latent grid columns.
        channels: Latent channels (`c_lat`).
        steps: Total denoising steps `T`.
        sigma_max: Noise scale of the first denoising step.
        attn_temperature: Temperature of the simulated cross-attention.
        scene_smoothing: Box size used to derive the scene from `z_T`.
        feature_smoothing: Box size of the simulated attention features.
        nms_radius: Initial non-max suppression radius in pixels.
        nms_min_radius: Smallest suppression radius before giving up.
        nms_relax_step: Suppression radius decrement per relaxation.
        radius_min: Lower bound of the drawn blob radius.
        radius_max: Upper bound of the drawn blob radius.
        center_margin: Minimum distance of a blob center to the border.
        instance_mix: Weight of the class signature in instance signatures.
        class_pool: Number of class signatures.
        world_seed: Seed of the class and background signatures.
    """
    height: int = 64
    width: int = 64
    channels: int = 12
    steps: int = 50
    sigma_max: float = 0.4
    attn_temperature: float = 0.2
    scene_smoothing: int = 9
    feature_smoothing: int = 3
    nms_radius: int = 10
    nms_min_radius: int = 4
    nms_relax_step: int = 2
    radius_min: float = 6.0
    radius_max: float = 16.0
    center_margin: int = 6
    instance_mix: float = 0.5
    class_pool: int = 20
    world_seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8 or self.channels < 1:
            raise ValueError('Invalid grid dimensions')
        if self.steps < 1:
            raise ValueError('Steps must be 1 or more')
        if self.sigma_max < 0 or self.attn_temperature <= 0:
            raise ValueError('Invalid noise or attention temperature')
        if not 4 <= self.radius_min <= self.radius_max <= 24:
            raise ValueError('Blob radius range must lie in [4, 24]')
        if self.class_pool > len(SubjectClass):
            raise ValueError(f'Class pool limited to {len(SubjectClass)}')

    @property
    def pixels(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class DatasetConfig:
    """Recipe of the synthetic training corpus."""
    scenes: int = 1500
    min_classes: int = 1
    max_classes: int = 3
    max_quantity: int = 10
    quantity_prob: float = 0.9
    max_subjects: int = 10
    stored_timesteps: int = 8
    ambiguity_iou: float = 0.3
    footprint_weight: float = 0.5
    prefix_prob: float = 0.8
    postfix_prob: float = 0.6
    feature_dtype: str = 'float32'
    seed: int = 0

    def __post_init__(self):
        if self.scenes < 0:
            raise ValueError('Scene count must be non-negative')
        if not 1 <= self.min_classes <= self.max_classes:
            raise ValueError('Invalid class count range')
        if not 1 <= self.max_subjects <= 10:
            raise ValueError('Subjects per prompt limited to 1..10')
        if self.stored_timesteps < 1:
            raise ValueError('At least one stored timestep required')
        if self.feature_dtype not in ('float32', 'float64'):
            raise ValueError('Feature dtype must be float32 or float64')


@dataclass(frozen=True)
class TrainConfig:
    """Soft-layout head training settings."""
    steps: int = 5000
    learning_rate: float = 1e-4
    triplets_per_image: int = 50
    subject_pick_prob: float = 0.75
    margin: float = 0.5
    batch: int = 4
    momentum: float = 0.9
    soft_dim: int = 10
    hidden: int = 16
    init_gain: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate < 0:
            raise ValueError('Steps and learning rate must be non-negative')
        if self.triplets_per_image < 1 or self.batch < 1:
            raise ValueError('Triplets and batch must be positive')
        if self.init_gain <= 0:
            raise ValueError('Init gain must be positive')
        if not 0 < self.margin < 2:
            raise ValueError('Margin must be in (0, 2)')
        if not 0 <= self.subject_pick_prob <= 1:
            raise ValueError('Subject pick probability must be in [0, 1]')
        if not 0 <= self.momentum < 1:
            raise ValueError('Momentum must be in [0, 1)')


@dataclass(frozen=True)
class ClusterConfig:
    """Soft to hard layout conversion settings."""
    window: int = 30
    variance_threshold: float = 0.025
    kmeans_max_iters: int = 100
    kmeans_restarts: int = 4
    refine_restarts: int = 1
    metric: KMeansMetric = KMeansMetric.COSINE

    def __post_init__(self):
        if self.window < 0:
            raise ValueError('Window must be non-negative')
        if self.variance_threshold <= 0:
            raise ValueError('Variance threshold must be positive')
        if min(self.kmeans_max_iters, self.kmeans_restarts, self.refine_restarts) < 1:
            raise ValueError('K-means iterations and restarts must be positive')


@dataclass(frozen=True)
class GuidanceConfig:
    """Decisive guidance settings."""
    alpha_cross: float = 0.3
    alpha_var: float = 0.21
    alpha_dice: float = 0.49
    tau: float = 15.0
    step_size: float = 0.05
    iterations_per_step: int = 5
    guided_steps: int = 15
    variance_mode: VarianceMode = VarianceMode.DISTANCE
    normalize_gradient: bool = True

    def __post_init__(self):
        if min(self.alpha_cross, self.alpha_var, self.alpha_dice) < 0:
            raise ValueError('Loss weights must be non-negative')
        if self.tau <= 0 or self.step_size <= 0:
            raise ValueError('Temperature and step size must be positive')
        if self.iterations_per_step < 0 or self.guided_steps < 0:
            raise ValueError('Iterations and guided steps must be non-negative')

    def for_variant(self, variant: AblationVariant) -> 'GuidanceConfig':
        """Get the loss weights of an ablation variant."""
        if variant == AblationVariant.NO_CROSS:
            return replace(self, alpha_cross=0.0)
        if variant == AblationVariant.NO_VAR:
            return replace(self, alpha_var=0.0)
        if variant == AblationVariant.NO_DICE:
            return replace(self, alpha_dice=0.0)
        return self


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings."""
    min_subject_area: int = 16

    def __post_init__(self):
        if self.min_subject_area < 0:
            raise ValueError('Minimum area must be non-negative')


def config_to_dict(config) -> dict:
    """Get a JSON-friendly dictionary of a configuration dataclass."""
    obj = asdict(config)
    for k, v in obj.items():
        if isinstance(v, Enum):
            obj[k] = v.name.lower()
    return obj
