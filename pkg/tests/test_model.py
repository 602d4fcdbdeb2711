import numpy as np
import pytest

from safer_lab.diffcore import Graph
from safer_lab.metrics import predict
from safer_lab.model import Model, ModelSpec, bind, forward_classify, forward_stabilized, init_model, stability, stability_forward


@pytest.fixture
def model():
    return init_model((5, 6, 4), n_classes=3, latent_dim=2, seed=7)


def test_same_seed_same_params():
    a = init_model((5, 6, 4), 3, 2, seed=1)
    b = init_model((5, 6, 4), 3, 2, seed=1)
    assert a.flat().tobytes() == b.flat().tobytes()
    assert not np.array_equal(a.flat(), init_model((5, 6, 4), 3, 2, seed=2).flat())


def test_biases_zero_at_init(model):
    for name, v in model.params.items():
        if name.endswith(".b"):
            assert not v.any()


def test_widths(model):
    feats, logits = forward_classify(model, np.zeros((2, 5)))
    assert feats.shape == (2, 4) and logits.shape == (2, 3)
    out = stability_forward(model, feats, [0, 2], np.zeros((2, 2)))
    assert out["x_hat"].shape == feats.shape


def test_zero_head_ties_to_lowest_index(model):
    model.params["head.W"][:] = 0
    model.params["head.b"][:] = 0
    x = np.random.default_rng(0).normal(size=(4, 5))
    assert not forward_classify(model, x)[1].any()
    np.testing.assert_array_equal(predict(model, x), 0)


def test_batch_consistency(model):
    x = np.random.default_rng(1).normal(size=(6, 5))
    batched = forward_classify(model, x)[1]
    for i in range(6):
        np.testing.assert_allclose(forward_classify(model, x[i : i + 1])[1][0], batched[i], atol=1e-15)


def test_zero_noise_gives_mean(model):
    f = np.random.default_rng(2).normal(size=(3, 4))
    out = stability_forward(model, f, [0, 1, 2], np.zeros((3, 2)))
    np.testing.assert_array_equal(out["z"], out["mu"])


def test_copying_decoder_gives_identity_average():
    # linear encoder with mu = feature, logvar = 0; linear decoder = identity
    m = init_model((3, 2), n_classes=2, latent_dim=2, seed=0, encoder_hidden=(), decoder_hidden=())
    q = m.params
    q["encoder.mu.W"][:] = 0
    q["encoder.mu.W"][:2, :2] = np.eye(2)
    q["encoder.logvar.W"][:] = 0
    q["decoder.out.W"][:] = np.eye(2)
    q["decoder.out.b"][:] = 0
    f = np.array([[0.3, -0.7], [1.2, 0.4]])
    out = stability_forward(m, f, [0, 1], np.zeros((2, 2)))
    np.testing.assert_allclose(out["x_hat"], f, atol=1e-15)
    np.testing.assert_allclose(out["x_prime"], f, atol=1e-15)


def test_logvar_stays_bounded(model):
    model.params["encoder.logvar.b"][:] = 1e6
    out = stability_forward(model, np.zeros((1, 4)), [0], np.zeros((1, 2)))
    assert np.all(np.isfinite(out["sigma"]))
    assert np.all(out["logvar"] <= 10.0)


def test_json_roundtrip(model):
    back = Model.from_json(model.to_json())
    assert back.flat().tobytes() == model.flat().tobytes()
    assert back.spec == model.spec


def test_stability_rejects_bad_labels(model):
    g = Graph()
    p = bind(g, model)
    with pytest.raises(ValueError):
        stability(g, model.spec, p, g.constant(np.zeros((1, 4))), [5], np.zeros((1, 2)))


def test_stabilized_path_shape(model):
    assert forward_stabilized(model, np.zeros((3, 5))).shape == (3, 3)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec((4,), 3, 2)
    with pytest.raises(ValueError):
        ModelSpec((4, 3), 3, 2, activation="gelu")
