import numpy as np
import pytest

from dance import attacks as T
from dance import pipeline
from dance.core import ConfigError
from dance.model import predict
from dance.saliency import SaliencyParams, topk_binarize

from conftest import random_cnn

# top-k overlap of vanilla maps before/after the golden topk attack on the
# first correctly classified test image
GOLDEN_TOPK_OVERLAP = 0.49019607843137253


def test_mass_center_examples():
    np.testing.assert_allclose(T.mass_center(np.ones((4, 6))), [1.5, 2.5])
    m = np.zeros((5, 5))
    m[3, 1] = 2.0
    np.testing.assert_allclose(T.mass_center(m), [3, 1])
    m = np.zeros((3, 3))
    m[0, 0] = m[0, 2] = -1.0
    np.testing.assert_allclose(T.mass_center(m), [0, 1])
    with pytest.raises(ValueError):
        T.mass_center(np.zeros((3, 3)))


@pytest.fixture(scope="module")
def small():
    net = random_cnn(8, 31, filters=4, n_classes=2)
    x = np.random.default_rng(31).uniform(size=(1, 8, 8))
    return net, x


@pytest.mark.parametrize("kind", T.KINDS)
def test_zero_budget_and_zero_iterations(small, kind):
    net, x = small
    r = T.run_attack(net, x, T.AttackSpec(kind, epsilon=0.0))
    assert np.array_equal(r.x_hat, x) and not r.delta.any()
    r = T.run_attack(net, x, T.AttackSpec(kind, iterations=0))
    assert np.array_equal(r.x_hat, x)


@pytest.mark.parametrize("kind", T.KINDS)
def test_budget_label_and_best_iterate(small, kind):
    net, x = small
    spec = T.AttackSpec(kind, epsilon=0.05, step=0.01, iterations=15)
    r = T.run_attack(net, x, spec)
    assert np.abs(r.x_hat - x).max() <= spec.epsilon
    assert r.linf <= spec.epsilon
    assert r.x_hat.min() >= 0 and r.x_hat.max() <= 1
    assert r.label_preserved == (predict(net, r.x_hat)[1] == predict(net, x)[1])
    assert r.objective == max(r.trace)
    np.testing.assert_array_equal(r.delta, np.abs(r.map_x_hat - r.map_x))
    again = T.run_attack(net, x, spec)
    assert np.array_equal(again.x_hat, r.x_hat) and again.trace == r.trace


def test_smoothgrad_attack_is_seeded(small):
    net, x = small
    spec = T.AttackSpec("target", iterations=5, method=SaliencyParams("smoothgrad", n_samples=4, seed=2))
    a, b = T.run_attack(net, x, spec), T.run_attack(net, x, spec)
    assert np.array_equal(a.x_hat, b.x_hat)


def test_refuses_misclassified_input(small):
    net, x = small
    c = predict(net, x)[1]
    with pytest.raises(T.AttackError):
        T.run_attack(net, x, T.AttackSpec(), label=1 - c)


def test_spec_validation(small):
    net, x = small
    with pytest.raises(ConfigError):
        T.AttackSpec("blur")
    with pytest.raises(ConfigError):
        T.AttackSpec(epsilon=-0.1)
    with pytest.raises(ConfigError):
        T.run_attack(net, x, T.AttackSpec("target", region=(0, 9, 0, 4)))
    with pytest.raises(ConfigError):
        T.run_attack(net, x, T.AttackSpec("topk", k=0))


def test_golden_topk_attack(golden):
    net, te, cfg = golden["net"], golden["test"], golden["cfg"]
    i = pipeline.select_images(net, te, 1)[0]
    x = pipeline.as_input(net, te.images[i])
    r = T.run_attack(net, x, cfg.attack_spec("topk"), label=int(te.labels[i]))
    assert r.label_preserved and r.linf <= 0.05
    a, b = topk_binarize(r.map_x, 0.2), topk_binarize(r.map_x_hat, 0.2)
    overlap = float((a * b).sum() / a.sum())
    assert overlap < 1.0
    assert overlap == GOLDEN_TOPK_OVERLAP
