"""Noise-induced layout prediction and decisive guidance for a simulated denoiser."""

from .backbone import CrossAttnMaps, Denoiser, FeatureStack, Latent
from .backbones.simulator import SimulatedDenoiser
from .cluster import harden, hungarian, refine_cluster, spherical_kmeans
from .common import (
    AblationVariant,
    ClusterConfig,
    DatasetConfig,
    EvalConfig,
    ExitCode,
    GuidanceConfig,
    KMeansMetric,
    NonFiniteError,
    SceneInfeasibleError,
    SimConfig,
    SubjectClass,
    TrainConfig,
    VarianceMode,
)
from .config import CliConfig
from .dataset import DatasetRecord, gen_dataset, read_dataset
from .guidance import decisive_loss, guidance_step
from .layout import HardLayout, LayoutHistory, SoftLayout
from .loader import load_backbone
from .metrics import EvalReport, count_f1, diversity, layout_iou, temporal_consistency
from .network import HeadParams, load_checkpoint, predict, save_checkpoint, train
from .pipeline import GenerationTrace, RunConfig, ablate, generate, render_layout
from .scene import GroundTruthMasks, PromptSpec, SceneSpec
from .tensor import Graph, Tensor, backward, grad_check

__all__ = [
    'AblationVariant',
    'CliConfig',
    'ClusterConfig',
    'CrossAttnMaps',
    'DatasetConfig',
    'DatasetRecord',
    'Denoiser',
    'EvalConfig',
    'EvalReport',
    'ExitCode',
    'FeatureStack',
    'GenerationTrace',
    'Graph',
    'GroundTruthMasks',
    'GuidanceConfig',
    'HardLayout',
    'HeadParams',
    'KMeansMetric',
    'Latent',
    'LayoutHistory',
    'NonFiniteError',
    'PromptSpec',
    'RunConfig',
    'SceneInfeasibleError',
    'SceneSpec',
    'SimConfig',
    'SimulatedDenoiser',
    'SoftLayout',
    'SubjectClass',
    'Tensor',
    'TrainConfig',
    'VarianceMode',
    'ablate',
    'backward',
    'count_f1',
    'decisive_loss',
    'diversity',
    'gen_dataset',
    'generate',
    'grad_check',
    'guidance_step',
    'harden',
    'hungarian',
    'layout_iou',
    'load_backbone',
    'load_checkpoint',
    'predict',
    'read_dataset',
    'refine_cluster',
    'render_layout',
    'save_checkpoint',
    'spherical_kmeans',
    'temporal_consistency',
    'train',
]
