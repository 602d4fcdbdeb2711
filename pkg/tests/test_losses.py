import math

import numpy as np
import pytest
from conftest import TERMS, flat_grad, flat_value, retain_term, toy_instance
from hypothesis import given, settings
from hypothesis import strategies as st

from safer_lab.diffcore import Graph, finite_difference_check, softmax
from safer_lab.losses import (
    EmaState,
    build_forget_target,
    ema_update,
    forget_loss,
    forget_targets,
    gaussian_kl,
    retain_loss,
    unlearning_margin,
)
from safer_lab.model import bind, extract, head, init_model, stability_forward


def kl_value(mu, logvar):
    g = Graph()
    return float(g.value(gaussian_kl(g, g.constant(np.atleast_2d(mu)), g.constant(np.atleast_2d(logvar)))))


def test_kl_matched_is_zero():
    assert kl_value([0.0], [0.0]) == 0.0


def test_kl_unit_shift():
    assert kl_value([1.0], [0.0]) == pytest.approx(0.5, abs=1e-15)


def test_kl_hand_calculation():
    expected = 0.5 * (0.09 + 0.64 - 1 - math.log(0.64))
    assert kl_value([0.3], [math.log(0.64)]) == pytest.approx(expected, abs=1e-14)
    assert expected == pytest.approx(0.0881, abs=1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert kl_value(rng.normal(size=(3, 4)) * 3, rng.normal(size=(3, 4)) * 3) >= 0


def test_ema_first_update_initializes():
    s = EmaState(2)
    assert not s.initialized
    s = ema_update(s, [[1.0, 2.0]])
    np.testing.assert_array_equal(s.mu_ema, [1.0, 2.0])


def test_ema_decay_step():
    s = EmaState(2, decay=0.9, mu_ema=np.zeros(2))
    np.testing.assert_allclose(ema_update(s, [[1.0, 1.0]]).mu_ema, [0.1, 0.1], atol=1e-15)


def test_ema_geometric_convergence():
    s = EmaState(1, decay=0.9, mu_ema=np.array([0.0]))
    for n in range(1, 30):
        s = ema_update(s, [[5.0]])
        assert abs(s.mu_ema[0] - 5.0) == pytest.approx(5.0 * 0.9**n, rel=1e-9)


def test_per_class_ema_tracks_classes_separately():
    s = EmaState(1, decay=0.5, per_class=True, n_classes=3)
    s = ema_update(s, [[1.0], [3.0]], labels=[0, 2])
    np.testing.assert_array_equal(s.mu_ema[:, 0], [1.0, 0.0, 3.0])
    np.testing.assert_array_equal(s.seen, [True, False, True])


class _Fixed:
    def __init__(self, values):
        self.values = list(values)

    def uniform(self, lo, hi, size):
        return np.array([self.values.pop(0) for _ in range(size)])


def test_forget_target_normalization():
    q = build_forget_target(4, {0, 2}, _Fixed([0.2, 0.6])).q
    np.testing.assert_allclose(q, [0.25, 0, 0.75, 0], atol=1e-15)


def test_forget_target_redraws_all_zero():
    q = build_forget_target(3, {0, 1}, _Fixed([0.0, 0.0, 0.5, 0.5])).q
    np.testing.assert_allclose(q, [0.5, 0.5, 0.0])


def test_forget_target_singleton_is_one_hot():
    np.testing.assert_array_equal(build_forget_target(5, {3}, np.random.default_rng(0)).q, [0, 0, 0, 1, 0])


def test_forget_target_monte_carlo_mean():
    rng = np.random.default_rng(123)
    total = np.zeros(6)
    n = 100_000
    for _ in range(n):
        total += build_forget_target(6, {0, 1, 2}, rng).q
    np.testing.assert_allclose(total / n, [1 / 3, 1 / 3, 1 / 3, 0, 0, 0], atol=0.01)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forget_targets_exclude_own_label(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 5, size=8)
    q = forget_targets(5, y, {0, 1, 2, 3, 4} - {int(y[0])}, rng)
    assert np.all(q[np.arange(8), y] == 0)
    assert np.all(q >= 0)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


def _forget_value(z, q):
    g = Graph()
    return float(g.value(forget_loss(g, g.constant(z), q)))


def test_forget_loss_zero_when_p_equals_q():
    z = np.array([[0.5, -1.0, 2.0]])
    assert abs(_forget_value(z, softmax(z))) < 1e-15


def test_forget_loss_one_hot_is_cross_entropy():
    z = np.random.default_rng(0).normal(size=(3, 4))
    q = np.eye(4)[[1, 3, 0]]
    g = Graph()
    ce = float(g.value(g.cross_entropy(g.constant(z), np.array([1, 3, 0]))))
    assert _forget_value(z, q) == pytest.approx(ce, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-30, 30))
def test_forget_loss_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 5))
    q = forget_targets(5, np.zeros(4, dtype=int), {1, 2, 3}, rng)
    assert abs(_forget_value(z, q) - _forget_value(z + c, q)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forget_gradient_identity_and_direction(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(3, 8))
    y = int(rng.integers(0, K))
    z = rng.normal(size=(1, K)) * 2
    q = forget_targets(K, [y], set(range(K)) - {y}, rng)
    g = Graph()
    zid = g.leaf(z, requires_grad=True)
    grad = g.backward(forget_loss(g, zid, q))[zid][0]
    p = softmax(z)[0]
    np.testing.assert_allclose(grad, p - q[0], atol=1e-10)
    assert grad[y] == pytest.approx(p[y], abs=1e-15)
    assert grad[y] > 0


def test_retain_loss_terms_add_up():
    model, x, y, eps, ema = toy_instance(0)
    g = Graph()
    p = bind(g, model)
    br = retain_loss(g, model.spec, p, extract(g, model.spec, p, g.constant(x)), y, eps, ema, lam=0.1)
    assert br.total == pytest.approx(br.ce + br.recon + br.kl + br.sep, abs=1e-10)
    assert br.sep > 0


def test_retain_loss_lambda_zero():
    model, x, y, eps, ema = toy_instance(1)
    g = Graph()
    p = bind(g, model)
    br = retain_loss(g, model.spec, p, extract(g, model.spec, p, g.constant(x)), y, eps, ema, lam=0.0)
    assert br.sep == 0.0
    assert br.total == br.ce + br.recon + br.kl


def test_retain_loss_all_off_is_ce_on_x_prime():
    model, x, y, eps, ema = toy_instance(2)
    g = Graph()
    p = bind(g, model)
    f = extract(g, model.spec, p, g.constant(x))
    br = retain_loss(g, model.spec, p, f, y, eps, ema, 0.0, use_recon=False, use_kl=False, use_sep=False)
    xp = stability_forward(model, g.value(f), y, eps)["x_prime"]
    h = Graph()
    q = bind(h, model, trainable=False)
    ce = float(h.value(h.cross_entropy(head(h, q, h.constant(xp)), y)))
    assert abs(br.total - ce) < 1e-12


def test_retain_loss_copy_decoder_and_prior_latents():
    m = init_model((2, 2), n_classes=2, latent_dim=2, seed=0, encoder_hidden=(), decoder_hidden=())
    m.params["encoder.mu.W"][:] = 0
    m.params["encoder.logvar.W"][:] = 0
    m.params["decoder.out.W"][:] = 0
    x = np.array([[0.2, 0.4], [-0.3, 0.1]])
    # mu = 0, sigma = 1, and a constant decoder whose output is the feature row
    g = Graph()
    p = bind(g, m, trainable=False)
    feats = g.value(extract(g, m.spec, p, g.constant(x[:1])))
    m.params["decoder.out.b"][:] = feats[0]
    g = Graph()
    p = bind(g, m)
    f = extract(g, m.spec, p, g.constant(x[:1]))
    br = retain_loss(g, m.spec, p, f, [0], np.zeros((1, 2)), EmaState(2), 0.1)
    assert br.recon == pytest.approx(0.0, abs=1e-15)
    assert br.kl == 0.0
    assert br.total == br.ce


def test_retain_loss_rejects_empty_batch():
    model, *_ = toy_instance(3)
    g = Graph()
    p = bind(g, model)
    with pytest.raises(ValueError):
        retain_loss(g, model.spec, p, g.constant(np.zeros((0, 5))), np.zeros(0, dtype=int), np.zeros((0, 2)), EmaState(2))


@pytest.mark.parametrize("term", TERMS)
def test_retain_term_gradients(term):
    for seed in range(5):
        model, x, y, eps, ema = toy_instance(seed)
        g, p, node = retain_term(model, x, y, eps, ema, term)
        analytic = flat_grad(model, g, p, node)
        fn = flat_value(model, lambda m: retain_term(m, x, y, eps, ema, term))
        assert finite_difference_check(fn, model.flat(), analytic) < 1e-5


def test_unlearning_margin_examples():
    assert unlearning_margin([2.0, 5.0, 1.0], 0) == -3.0
    assert unlearning_margin([5.0, 2.0, 1.0], 0) == 3.0
    assert unlearning_margin([4.0, 4.0, 1.0], 0) == 0.0
    np.testing.assert_array_equal(unlearning_margin([[2.0, 5.0, 1.0], [5.0, 2.0, 1.0]], [0, 0]), [-3.0, 3.0])
