import logging

import numpy as np
import pytest

from pynoiselayout.common import NonFiniteError
from pynoiselayout.tensor import (
    Graph,
    add,
    backward,
    conv2d,
    cosine_similarity,
    grad_check,
    hinge,
    l2_normalize,
    masked_mean,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    square,
    sum_,
    take,
    tensor,
)

logger = logging.getLogger()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_softmax_uniform():
    p = softmax(tensor([0.0, 0.0, 0.0]), 1.0)
    np.testing.assert_allclose(p.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_softmax_rows_and_shift(rng):
    logits = rng.normal(size=(5, 7))
    p = softmax(tensor(logits), 0.5).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    shifted = softmax(tensor(logits + 3.7), 0.5).data
    np.testing.assert_allclose(p, shifted, atol=1e-9)


def test_softmax_mask():
    mask = np.array([[True, False, True]])
    p = softmax(tensor([[1.0, 5.0, 1.0]]), 1.0, mask).data
    assert p[0, 1] == 0.0
    np.testing.assert_allclose(p[0, [0, 2]], [0.5, 0.5])
    with pytest.raises(ValueError):
        softmax(tensor([[1.0, 2.0]]), 1.0, np.array([[False, False]]))


def test_cosine_identity(rng):
    v = rng.normal(size=(4, 6))
    np.testing.assert_allclose(cosine_similarity(v, v).data, 1.0, atol=1e-12)


def test_l2_normalize_unit(rng):
    y = l2_normalize(tensor(rng.normal(size=(10, 3)))).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-9)


def test_conv2d_delta():
    image = np.zeros((7, 7, 1))
    image[3, 3, 0] = 1.0
    kernel = np.arange(9, dtype=float).reshape(3, 3, 1, 1)
    out = conv2d(tensor(image), tensor(kernel)).data[:, :, 0]
    # cross-correlation reproduces the flipped kernel around the impulse
    np.testing.assert_allclose(out[2:5, 2:5], kernel[::-1, ::-1, 0, 0])
    assert np.count_nonzero(out) == 8


def test_shape_mismatch():
    with pytest.raises(ValueError):
        add(tensor(np.ones(3)), tensor(np.ones(4)))
    with pytest.raises(ValueError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_masked_mean_empty():
    with pytest.raises(ValueError):
        masked_mean(tensor(np.ones(3)), np.zeros(3, dtype=bool))


def test_non_finite_detected():
    with pytest.raises(NonFiniteError):
        tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        mul(tensor([1e300]), tensor([1e300]))


def test_backward_sum(rng):
    x = rng.normal(size=(3, 4))
    graph = Graph()
    with graph.record():
        leaf = graph.leaf(x)
        root = sum_(leaf)
    np.testing.assert_array_equal(backward(graph, root)[leaf], np.ones((3, 4)))


def test_backward_square(rng):
    x = rng.normal(size=5)
    graph = Graph()
    with graph.record():
        leaf = graph.leaf(x)
        root = sum_(square(leaf))
    np.testing.assert_allclose(backward(graph, root)[leaf], 2 * x)


def test_backward_unreached_and_non_scalar(rng):
    graph = Graph()
    with graph.record():
        a = graph.leaf(rng.normal(size=3))
        b = graph.leaf(rng.normal(size=3))
        root = sum_(a)
    grads = backward(graph, root)
    np.testing.assert_array_equal(grads[b], np.zeros(3))
    with pytest.raises(ValueError):
        backward(graph, a)


def test_masked_mean_backward():
    mask = np.array([True, False, True, True])
    graph = Graph()
    with graph.record():
        leaf = graph.leaf(np.arange(4, dtype=float))
        root = masked_mean(leaf, mask)
    grad = backward(graph, root)[leaf]
    np.testing.assert_array_equal(grad, np.where(mask, 1 / 3, 0.0))


def test_topological_order(rng):
    graph = Graph()
    with graph.record():
        x = graph.leaf(rng.normal(size=(2, 2)))
        sum_(mul(x, x))
    for i in graph.order:
        assert all(p is None or p < i for p in graph.nodes[i].parents)


def test_grad_check_sum_of_squares(rng):
    result = grad_check(lambda x: sum_(square(x)), rng.normal(size=(4, 3)))
    assert result.max_rel_error <= 1e-7
    assert not result.non_smooth


def test_grad_check_softmax_cross(rng):
    weights = rng.normal(size=(3, 5))

    def f(x):
        return sum_(mul(softmax(x, 0.7), tensor(weights)))

    result = grad_check(f, rng.normal(size=(3, 5)))
    logger.info('softmax cross max rel error %.3e', result.max_rel_error)
    assert result.max_rel_error <= 1e-4


def test_grad_check_hinge_kink():
    result = grad_check(lambda x: sum_(hinge(x)), np.array([0.0, 1.0, -1.0]))
    assert result.non_smooth


@pytest.mark.parametrize('seed', range(20))
def test_grad_check_suite(seed):
    rng = np.random.default_rng(seed)
    kernel = rng.normal(size=(3, 3, 2, 3))
    other = rng.normal(size=(36, 3))
    idx = rng.integers(0, 36, size=10)
    mask = rng.random(36) < 0.5
    mask[0] = True

    def f(x):
        h = relu(conv2d(x, tensor(kernel)))
        flat = reshape(h, (36, 3))
        n = l2_normalize(add(flat, tensor(other)))
        sims = cosine_similarity(take(n, idx), take(tensor(other), idx))
        p = softmax(matmul(n, tensor(other.T[:, :4])), 2.0)
        return mean(sims) + masked_mean(sum_(p * p, axis=1), mask, axis=0)

    result = grad_check(f, rng.normal(size=(6, 6, 2)))
    assert result.max_rel_error <= 1e-4


def test_grad_check_tiny_coordinates():
    weights = tensor(np.array([1.0, 1e-9, 3e-10]))
    result = grad_check(lambda x: sum_(mul(square(x), weights)),
                        np.array([1.0, 0.3, -0.7]))
    assert result.max_rel_error <= 1e-6
