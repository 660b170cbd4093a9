import logging

import numpy as np
import pytest

from pynoiselayout.backbones.simulator import SimulatedDenoiser
from pynoiselayout.common import GuidanceConfig, SimConfig, TrainConfig, VarianceMode
from pynoiselayout.guidance import (
    cluster_means,
    cross_loss,
    decisive_loss,
    dice_loss,
    guidance_step,
    prob_layout,
    variance_loss,
)
from pynoiselayout.layout import HardLayout
from pynoiselayout.network import HeadParams
from pynoiselayout.scene import PromptSpec
from pynoiselayout.tensor import grad_check, tensor

logger = logging.getLogger()


def _layout(size: int = 8) -> HardLayout:
    labels = np.zeros((size, size), dtype=int)
    labels[1:4, 1:4] = 1
    labels[5:8, 4:7] = 2
    return HardLayout(labels, 2, instance_tags={1: 0, 2: 1})


def _attention(rng, n: int = 64, k: int = 2) -> np.ndarray:
    A = rng.random((k, n)) + 0.1
    return A / A.sum(axis=1, keepdims=True)


def test_variance_zero_for_constant_clusters():
    M = _layout()
    S = np.eye(4)[M.labels]
    for mode in VarianceMode:
        expected = 0.0 if mode == VarianceMode.DISTANCE else 1.0
        assert variance_loss(tensor(S), M, mode).item() == pytest.approx(expected)


def test_variance_normalized_by_slot_count():
    M = HardLayout(np.array([[0, 0], [1, 1]]), 2)
    S = np.zeros((2, 2, 3))
    S[0, :, 0] = 1.0
    S[1, 0, 1] = 1.0
    S[1, 1, 2] = 1.0
    spread = (1.0 - np.sqrt(0.5)) ** 2
    value = variance_loss(tensor(S), M).item()
    assert value == pytest.approx(spread / 3)


def test_cluster_means_skip_empty():
    labels = np.zeros((4, 4), dtype=int)
    labels[0, 0] = 2
    M = HardLayout(labels, 3)
    means = cluster_means(tensor(np.ones((4, 4, 2))), M)
    assert means.present == [0, 2]
    assert means.empty == [1, 3]
    assert means.mu.shape == (2, 2)


def test_prob_layout_rows():
    rng = np.random.default_rng(0)
    M = HardLayout(np.where(_layout().labels == 2, 0, _layout().labels), 2)
    S = tensor(rng.normal(size=(8, 8, 4)))
    P = prob_layout(S, cluster_means(S, M), 15.0).data
    assert P.shape == (64, 3)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P[:, 2] == 0)


def test_dice_perfect_assignment():
    M = _layout()
    assert dice_loss(tensor(M.one_hot()), M).item() == pytest.approx(0.0, abs=1e-12)
    uniform = np.full((64, 3), 1 / 3)
    assert dice_loss(tensor(uniform), M).item() > 0.3


def test_cross_loss_inside_and_untagged():
    M = _layout()
    A = np.zeros((2, 64))
    A[0, M.labels.ravel() == 1] = 1.0
    A[1, M.labels.ravel() == 2] = 1.0
    A /= A.sum(axis=1, keepdims=True)
    assert cross_loss(A, M).item() == pytest.approx(0.0)
    untagged = HardLayout(M.labels, 2)
    assert cross_loss(A, untagged).item() == 0.0


def test_decisive_loss_weights():
    rng = np.random.default_rng(1)
    M = _layout()
    S = tensor(rng.normal(size=(8, 8, 4)))
    A = _attention(rng)
    cfg = GuidanceConfig()
    loss = decisive_loss(S, M, A, cfg)
    values = loss.values()
    expected = (cfg.alpha_cross * values['cross'] + cfg.alpha_var * values['var']
                + cfg.alpha_dice * values['dice'])
    assert values['total'] == pytest.approx(expected)
    zero = decisive_loss(S, M, A, GuidanceConfig(alpha_cross=0, alpha_var=0,
                                                 alpha_dice=0))
    assert zero.total.item() == 0.0


@pytest.mark.parametrize('seed', range(10))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    M = _layout()
    A = _attention(rng)
    S0 = rng.normal(size=(8, 8, 4))
    checks = {
        'var_distance': lambda S: variance_loss(S, M, VarianceMode.DISTANCE),
        'var_verbatim': lambda S: variance_loss(S, M, VarianceMode.VERBATIM),
        'dice': lambda S: dice_loss(prob_layout(S, cluster_means(S, M), 15.0), M),
    }
    for name, f in checks.items():
        result = grad_check(f, S0)
        logger.info('%s max rel error %.3e', name, result.max_rel_error)
        assert result.max_rel_error <= 1e-4
    assert grad_check(lambda a: cross_loss(a, M), A).max_rel_error <= 1e-4
    full = grad_check(lambda S: decisive_loss(S, M, A).total, S0)
    assert full.max_rel_error <= 1e-3


@pytest.fixture
def guided_setup():
    sim = SimulatedDenoiser(SimConfig(height=32, width=32, steps=6))
    latent = sim.init_latent(3)
    scene = sim.derive_scene(latent, PromptSpec.parse('dog:1,cat:1'), 3)
    labels = np.zeros((32, 32), dtype=int)
    for inst in scene.instances:
        r, c = inst.center
        labels[max(0, r - 2):r + 3, max(0, c - 2):c + 3] = inst.instance_id + 1
    M = HardLayout(labels, 2, instance_tags={1: 0, 2: 1})
    params = HeadParams.init(sim.config.channels, TrainConfig(hidden=4, soft_dim=3))
    latent = sim.denoise_step(latent, scene)
    return sim, latent, scene, M, params


def test_guidance_zero_weights_keep_latent(guided_setup):
    sim, latent, scene, M, params = guided_setup
    cfg = GuidanceConfig(alpha_cross=0, alpha_var=0, alpha_dice=0)
    result = guidance_step(latent, M, scene, params, sim, cfg)
    np.testing.assert_array_equal(result.latent.z, latent.z)
    assert len(result.losses) == cfg.iterations_per_step


def test_guidance_moves_latent(guided_setup):
    sim, latent, scene, M, params = guided_setup
    result = guidance_step(latent, M, scene, params, sim, GuidanceConfig())
    assert not result.aborted
    assert len(result.losses) == 5
    assert all(np.isfinite(v['total']) for v in result.losses)
    assert result.latent.t == latent.t
    assert not np.array_equal(result.latent.z, latent.z)
    logger.info('Guidance losses: %s', [round(v['total'], 5) for v in result.losses])


def test_guidance_step_has_fixed_rms(guided_setup):
    sim, latent, scene, M, params = guided_setup
    cfg = GuidanceConfig(iterations_per_step=1)
    result = guidance_step(latent, M, scene, params, sim, cfg)
    moved = np.sqrt(np.mean(np.square(result.latent.z - latent.z)))
    assert moved == pytest.approx(cfg.step_size, rel=1e-9)


def test_guidance_raw_gradient_step(guided_setup):
    sim, latent, scene, M, params = guided_setup
    raw = GuidanceConfig(iterations_per_step=1, normalize_gradient=False)
    normed = GuidanceConfig(iterations_per_step=1)
    a = guidance_step(latent, M, scene, params, sim, raw).latent.z - latent.z
    b = guidance_step(latent, M, scene, params, sim, normed).latent.z - latent.z
    # same direction, different length
    cos = np.sum(a * b) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cos == pytest.approx(1.0, abs=1e-9)
    logger.info('Raw step rms %.3e', np.sqrt(np.mean(a ** 2)))
