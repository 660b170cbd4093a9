import logging

import numpy as np
import pytest

from pynoiselayout.backbone import Latent, time_embedding
from pynoiselayout.backbones.simulator import SimulatedDenoiser, apply_attention_mask
from pynoiselayout.common import SceneInfeasibleError, SimConfig
from pynoiselayout.layout import HardLayout
from pynoiselayout.scene import InstanceSpec, PromptSpec, SceneSpec

logger = logging.getLogger()


@pytest.fixture
def small():
    return SimulatedDenoiser(SimConfig(height=32, width=32, steps=10))


@pytest.fixture
def scene(small):
    prompt = PromptSpec.parse('dog:1,cat:1')
    latent = small.init_latent(3)
    return small.derive_scene(latent, prompt, 3)


def test_init_latent_deterministic():
    denoiser = SimulatedDenoiser()
    a, b = denoiser.init_latent(0), denoiser.init_latent(0)
    np.testing.assert_array_equal(a.z, b.z)
    c = denoiser.init_latent(1)
    assert np.mean(a.z != c.z) > 0.99
    assert abs(a.z.mean()) < 0.02
    assert a.t == a.T == 50
    assert a.z.shape == (64, 64, 12)


def test_time_embedding_range():
    for t in (0, 7, 50):
        emb = time_embedding(t, 50)
        assert emb.shape == (8,)
        assert np.all(np.abs(emb) <= 1)


def test_derive_scene_deterministic(small, scene):
    again = small.derive_scene(small.init_latent(3), PromptSpec.parse('dog:1,cat:1'), 3)
    assert again == scene
    assert scene.k == 2
    for inst in scene.instances:
        assert small.config.radius_min <= inst.radius <= small.config.radius_max
        np.testing.assert_allclose(np.linalg.norm(inst.signature), 1.0)
    logger.info('Scene: %s', scene)


def test_derive_scene_separation(small):
    scene = small.derive_scene(small.init_latent(5), PromptSpec.parse('dog:2'), 5)
    (a, b) = [np.asarray(i.center) for i in scene.instances]
    assert np.linalg.norm(a - b) >= 10


def test_derive_scene_requires_initial_latent(small):
    latent = small.init_latent(0)
    later = Latent(latent.z, latent.T - 1, latent.T)
    with pytest.raises(ValueError):
        small.derive_scene(later, PromptSpec.parse('dog:1'), 0)


def test_derive_scene_infeasible():
    denoiser = SimulatedDenoiser(SimConfig(height=16, width=16, steps=5))
    with pytest.raises(SceneInfeasibleError):
        denoiser.derive_scene(denoiser.init_latent(0),
                              PromptSpec.parse('dog:10'), 0)


def test_clean_field_values(small):
    c = small.config
    bg = np.zeros(c.channels)
    bg[0] = 1.0
    sig = np.zeros(c.channels)
    sig[1] = 1.0
    scene = SceneSpec([InstanceSpec(0, 11, (10, 10), 4.0, sig)], bg, 0,
                      (c.height, c.width))
    field = small.clean_field(scene)
    np.testing.assert_allclose(field[10, 10], bg + sig)
    np.testing.assert_allclose(field[31, 31], bg, atol=1e-3)


def test_denoise_converges_to_clean(small, scene):
    latent = small.init_latent(3)
    while latent.t > 0:
        latent = small.denoise_step(latent, scene)
    np.testing.assert_allclose(latent.z, small.clean_field(scene), atol=1e-9)
    with pytest.raises(ValueError):
        small.denoise_step(latent, scene)


def test_cross_attention_normalized(small, scene):
    attn = small.cross_attention(small.init_latent(3), scene)
    assert attn.A.shape == (2, 32, 32)
    np.testing.assert_allclose(attn.A.reshape(2, -1).sum(axis=1), 1.0, atol=1e-6)
    assert np.all(attn.A >= 0)


def test_attention_masked_regions(small, scene):
    labels = np.zeros((32, 32), dtype=int)
    labels[:8, :8] = 1
    labels[-8:, -8:] = 2
    M = HardLayout(labels, 2, instance_tags={1: 0, 2: 1})
    attn = small.cross_attention(small.init_latent(3), scene, M)
    assert np.all(attn.A[0][labels == 2] == 0)
    assert np.all(attn.A[1][labels == 1] == 0)


def test_apply_attention_mask():
    labels = np.array([[0, 1], [2, 1]])
    M = HardLayout(labels, 2)
    scores = apply_attention_mask(np.zeros((4, 4)), M)
    # pixel 1 (label 1) and pixel 2 (label 2) block each other
    assert scores[1, 2] == -np.inf and scores[2, 1] == -np.inf
    assert scores[1, 3] == 0 and scores[0, 2] == 0


def test_ground_truth_of_converged(small, scene):
    latent = small.init_latent(3)
    while latent.t > 0:
        latent = small.denoise_step(latent, scene)
    gt = small.ground_truth(scene, latent.z)
    assert gt.k == 2
    assert sorted(set(gt.labels.ravel().tolist())) == [0, 1, 2]
    for inst in scene.instances:
        assert gt.labels[inst.center] == inst.instance_id + 1


def test_radius_clamped_for_close_centers(small):
    scene = small.derive_scene(small.init_latent(5), PromptSpec.parse('dog:4'), 5)
    assert scene.k == 4
    for inst in scene.instances:
        assert small.config.radius_min <= inst.radius <= small.config.radius_max


def test_ground_truth_keeps_centers(small, scene):
    c = small.config
    z0 = np.tile(scene.background_signature, (c.height, c.width, 1))
    gt = small.ground_truth(scene, z0)
    assert np.count_nonzero(gt.labels) == scene.k
    for inst in scene.instances:
        assert gt.labels[inst.center] == inst.instance_id + 1
