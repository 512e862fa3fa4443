import numpy as np
import pytest

from lievae import gradcore as gc
from lievae import model as mdl
from lievae.errors import DimensionError

DIMS = mdl.ModelDims(side=3, latent_dim=2, group_size=2, categories=2, hidden=8)


def tiny_model(seed=0, **weight_kw):
    weights = mdl.LossWeights(**weight_kw)
    return mdl.ModelState.init(DIMS, weights, gen_scale=0.3,
                               rng=np.random.default_rng(seed))


def tiny_batch(seed=1, b=4):
    rng = np.random.default_rng(seed)
    x = rng.random((b, DIMS.pixels))
    eps = rng.standard_normal((b, DIMS.latent_dim))
    noise = rng.uniform(0.05, 0.95, size=(b, DIMS.categories))
    return x, eps, noise


def test_fresh_posterior_is_standard_normal():
    model = tiny_model()
    x, _, _ = tiny_batch()
    _, mu, logvar, _ = model.encode_det(x)
    np.testing.assert_array_equal(mu, np.zeros_like(mu))
    np.testing.assert_array_equal(logvar, np.zeros_like(logvar))


def test_reparameterize_identity_scale_at_init():
    # mu = 0 and logvar = 0 make t = eps bitwise.
    model = tiny_model()
    x, eps, noise = tiny_batch()
    losses = mdl.build_elbo(model, model.param_nodes(), x, eps, noise)
    np.testing.assert_array_equal(losses.t.value, eps)


def test_zero_sample_makes_group_action_identity():
    model = tiny_model()
    x, _, noise = tiny_batch()
    eps = np.zeros((x.shape[0], DIMS.latent_dim))
    losses = mdl.build_elbo(model, model.param_nodes(), x, eps, noise)
    e_s = losses.code.soft.value @ model.params.values["emb.table"]
    np.testing.assert_array_equal(losses.s_prime.value, e_s)


def test_logvar_clamp():
    model = tiny_model()
    d = DIMS.latent_dim
    model.params.values["grp.b"][d:] = 1e3
    x, _, _ = tiny_batch()
    _, mu, logvar, _ = model.encode_det(x)
    np.testing.assert_array_equal(logvar, np.full_like(logvar, 10.0))
    np.testing.assert_array_equal(mu, np.zeros_like(mu))
    model.params.values["grp.b"][d:] = -1e3
    _, _, logvar, _ = model.encode_det(x)
    np.testing.assert_array_equal(logvar, np.full_like(logvar, -10.0))


def test_bce_half_prediction_is_pixels_log2():
    # With every predicted pixel at 0.5 the loss is P*log(2), whatever x is.
    rng = np.random.default_rng(0)
    x = rng.random((5, 9))
    half = gc.constant(np.full((5, 9), 0.5))
    loss = mdl.bce_node(half, gc.constant(x), batch=5)
    assert float(loss.value) == pytest.approx(9.0 * np.log(2.0), rel=1e-9)


def test_kl_zero_at_standard_normal_and_hand_value():
    zero = gc.constant(np.zeros((3, 2)))
    assert float(mdl.kl_node(zero, zero, 3).value) == 0.0
    # One latent with mu = 1, logvar = 0: KL = 0.5 * (1 + 1 - 1 - 0) = 0.5.
    mu = gc.constant(np.array([[1.0]]))
    lv = gc.constant(np.array([[0.0]]))
    assert float(mdl.kl_node(mu, lv, 1).value) == pytest.approx(0.5)


def test_mi_loss_hand_value():
    # softmax([0, log 3]) = [1/4, 3/4]; a one-hot soft code on the first
    # category scores -log(1/4) = log 4.
    soft = gc.constant(np.array([[1.0, 0.0]]))
    pred = gc.constant(np.array([[0.0, np.log(3.0)]]))
    loss = mdl.mi_loss_node(soft, pred, batch=1)
    assert float(loss.value) == pytest.approx(np.log(4.0), rel=1e-9)


def test_usage_loss_values():
    # Mean soft code [1/4, 3/4]: log 2 + sum p log p = 0.130812...
    soft = gc.constant(np.array([[0.5, 0.5], [0.0, 1.0]]))
    expect = np.log(2.0) + 0.25 * np.log(0.25) + 0.75 * np.log(0.75)
    assert float(mdl.usage_loss_node(soft).value) == pytest.approx(expect,
                                                                   abs=1e-9)
    assert expect == pytest.approx(0.13081203, abs=1e-7)
    uniform = gc.constant(np.full((4, 2), 0.5))
    assert abs(float(mdl.usage_loss_node(uniform).value)) < 1e-9


def test_gumbel_softmax_shapes_and_validation():
    rng = np.random.default_rng(2)
    logits = gc.constant(rng.standard_normal((6, 3)))
    noise = rng.uniform(0.01, 0.99, size=(6, 3))
    code = mdl.gumbel_softmax(logits, 0.67, noise)
    np.testing.assert_allclose(code.soft.value.sum(axis=1), 1.0, rtol=1e-12)
    assert code.soft.value.min() > 0.0
    np.testing.assert_array_equal(code.hard.sum(axis=1), np.ones(6))
    np.testing.assert_array_equal(np.argmax(code.hard, axis=1),
                                  np.argmax(code.soft.value, axis=1))
    with pytest.raises(ValueError):
        mdl.gumbel_softmax(logits, 0.67, np.zeros((6, 3)))
    with pytest.raises(DimensionError):
        mdl.gumbel_softmax(logits, 0.67, noise[:, :2])


def test_low_tau_sharpens_soft_code():
    rng = np.random.default_rng(3)
    logits = gc.constant(rng.standard_normal((8, 3)))
    noise = rng.uniform(0.01, 0.99, size=(8, 3))
    sharp = mdl.gumbel_softmax(logits, 0.05, noise).soft.value
    smooth = mdl.gumbel_softmax(logits, 5.0, noise).soft.value
    assert sharp.max(axis=1).min() > smooth.max(axis=1).max()


def test_total_is_weighted_sum_of_components():
    model = tiny_model(alpha=0.7, beta=1.3, lambda_mi=0.6, lambda_usage=0.01)
    x, eps, noise = tiny_batch()
    losses = mdl.build_elbo(model, model.param_nodes(), x, eps, noise)
    c = losses.component_values()
    expect = c["recon"] + 0.7 * c["consistency"] + 1.3 * c["kl"] \
        + 0.6 * c["mi"] + 0.01 * c["usage"]
    assert c["total"] == pytest.approx(expect, rel=1e-12)


def test_elbo_gradients_match_finite_differences():
    model = tiny_model()
    x, eps, noise = tiny_batch(b=3)
    losses = mdl.build_elbo(model, model.param_nodes(), x, eps, noise)
    report = gc.check_gradients(losses.total, tolerance=1e-4)
    assert report.passed, report.failures[:3]


def test_mi_stop_decoder_grad_detaches_decoder():
    model = tiny_model()
    x, eps, noise = tiny_batch(b=3)

    def mi_grad_on_decoder(flag):
        pn = model.param_nodes()
        losses = mdl.build_elbo(model, pn, x, eps, noise,
                                mi_stop_decoder_grad=flag)
        grads = gc.backward(losses.mi, wrt=[pn["dec.w3"]])
        return grads[pn["dec.w3"]]

    assert np.abs(mi_grad_on_decoder(False)).max() > 0.0
    np.testing.assert_array_equal(mi_grad_on_decoder(True),
                                  np.zeros((DIMS.hidden, DIMS.pixels)))


def test_batch_rows_match_single_rows():
    model = tiny_model(seed=4)
    x, _, _ = tiny_batch(b=5)
    zhat_b, mu_b, logvar_b, logits_b = model.encode_det(x)
    for r in range(5):
        zhat, mu, logvar, logits = model.encode_det(x[r:r + 1])
        np.testing.assert_allclose(zhat[0], zhat_b[r], atol=1e-12)
        np.testing.assert_allclose(logits[0], logits_b[r], atol=1e-12)
    rec_b = model.reconstruct_det(x)
    np.testing.assert_allclose(model.reconstruct_det(x[2:3])[0], rec_b[2],
                               atol=1e-12)


def test_reconstruct_det_output_domain():
    model = tiny_model()
    x, _, _ = tiny_batch()
    rec = model.reconstruct_det(x)
    assert rec.shape == x.shape
    assert rec.min() > 0.0 and rec.max() < 1.0


def test_one_hot():
    out = mdl.one_hot(np.array([2, 0]), 3)
    np.testing.assert_array_equal(out, [[0, 0, 1], [1, 0, 0]])


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = tiny_model(seed=5)
    x, eps, noise = tiny_batch()
    # Take one optimizer step so moments and step count are non-trivial.
    pn = model.param_nodes()
    losses = mdl.build_elbo(model, pn, x, eps, noise)
    grads = gc.backward(losses.total, wrt=list(pn.values()))
    gc.adam_update(model.params, {k: grads[n] for k, n in pn.items()}, 1e-3)

    path = tmp_path / "ck.npz"
    extras = {"marker": np.arange(3.0)}
    mdl.save_checkpoint(str(path), model, extras=extras, config_json='{"a":1}')
    back, extras2, cfg = mdl.load_checkpoint(str(path))

    assert cfg == '{"a":1}'
    assert back.dims == model.dims and back.weights == model.weights
    assert back.params.step == 1
    np.testing.assert_array_equal(extras2["marker"], extras["marker"])
    for key, val in model.params.values.items():
        np.testing.assert_array_equal(back.params.values[key], val)
        np.testing.assert_array_equal(back.params.m[key], model.params.m[key])
        np.testing.assert_array_equal(back.params.v[key], model.params.v[key])
    # The reloaded model reproduces the forward pass bitwise.
    np.testing.assert_array_equal(back.reconstruct_det(x),
                                  model.reconstruct_det(x))


def test_dims_and_weights_validation():
    with pytest.raises(ValueError):
        mdl.ModelDims(3, 1, 2, 2, 8).validate()
    with pytest.raises(ValueError):
        mdl.ModelDims(0, 2, 2, 2, 8).validate()
    with pytest.raises(ValueError):
        mdl.LossWeights(alpha=-0.1).validate()
    with pytest.raises(ValueError):
        mdl.LossWeights(tau=0.0).validate()
