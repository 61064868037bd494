import json

import numpy as np
import pytest

from battpinn import autodiff as ad
from battpinn.nn import (AdamState, Mlp, MlpConfig, NonFiniteGradientError, adam_step,
                         minibatches, xavier_normal_arrays, xavier_normal_init)


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(2, 0, 8)
    with pytest.raises(ValueError):
        MlpConfig(2, 1, 8, dropout=1.0)
    cfg = MlpConfig(9, 2, 128)
    assert cfg.layer_sizes == [9, 128, 128, 1]
    assert cfg.n_parameters == 10 * 128 + 129 * 128 + 129


def test_xavier_statistics_and_determinism():
    arrays = xavier_normal_arrays(MlpConfig(128, 2, 128), seed=4)
    w = arrays[2]
    assert w.shape == (128, 128)
    assert 0.8 * 2 / 256 <= w.var() <= 1.2 * 2 / 256
    assert all(np.all(b == 0.0) for b in arrays[1::2])
    again = xavier_normal_arrays(MlpConfig(128, 2, 128), seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(arrays, again))


def test_parameter_count_matches_formula():
    cfg = MlpConfig(3, 3, 17, output_dim=2)
    net = xavier_normal_init(cfg, seed=0)
    assert sum(p.value.size for p in net.parameters) == cfg.n_parameters


def test_zero_weights_give_output_bias():
    g = ad.Graph()
    cfg = MlpConfig(2, 2, 4)
    arrays = [np.zeros_like(a) for a in xavier_normal_arrays(cfg, 0)]
    arrays[-1] = np.array([0.75])
    net = Mlp(cfg, g, arrays=arrays)
    out = net.forward(g.variable(np.random.default_rng(0).standard_normal((6, 2))))
    np.testing.assert_array_equal(out.value, np.full((6, 1), 0.75))


def test_dimension_mismatch_is_structural_error():
    g = ad.Graph()
    net = Mlp(MlpConfig(3, 1, 4), g)
    with pytest.raises(ad.StructuralError):
        net.forward(g.variable(np.zeros((2, 4))))


def test_eval_mode_deterministic_and_matches_predict():
    g = ad.Graph()
    net = Mlp(MlpConfig(3, 2, 8, dropout=0.5), g, seed=1)
    x = np.random.default_rng(2).standard_normal((5, 3))
    a = net.forward(g.variable(x)).value
    b = net.forward(g.variable(x)).value
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(net.predict(x), a, rtol=0, atol=1e-14)


def test_inverted_dropout_mean_matches_eval_output():
    g = ad.Graph()
    net = Mlp(MlpConfig(2, 1, 16, dropout=0.3), g, seed=3)
    x = np.array([[0.4, -1.2]])
    rng = np.random.default_rng(0)
    reps = 10_000
    out = net.forward(g.variable(np.repeat(x, reps, axis=0)), training=True, rng=rng).value[:, 0]
    expected = net.predict(x)[0, 0]
    se = out.std(ddof=1) / np.sqrt(reps)
    assert abs(out.mean() - expected) < 3 * se


def test_weight_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    g = ad.Graph()
    net = Mlp(MlpConfig(2, 2, 5), g, seed=7)
    x = rng.standard_normal((3, 2))

    def loss_value():
        return float(net.predict(x).sum())

    out = net.forward(g.variable(x)).sum()
    grads = g.gradients(out, net.parameters)
    h = 1e-4
    for p, grad in zip(net.parameters, grads):
        flat = p.value.reshape(-1)
        for k in range(0, flat.size, max(1, flat.size // 4)):
            old = flat[k]
            flat[k] = old + h
            up = loss_value()
            flat[k] = old - h
            down = loss_value()
            flat[k] = old
            assert grad.reshape(-1)[k] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9)


def test_adam_converges_on_scalar_quadratic():
    g = ad.Graph()
    w = g.parameter(0.0, "w")
    state = AdamState(lr=0.1)
    for _ in range(2000):
        g.reset()
        loss = (w - 3.0) * (w - 3.0)
        adam_step(state, [w], g.gradients(loss, [w]))
    assert abs(float(w.value) - 3.0) < 1e-3
    assert state.step == 2000


def test_adam_first_step_and_zero_gradient():
    g = ad.Graph()
    a, b = g.parameter(np.array([1.0, -2.0])), g.parameter(5.0)
    state = AdamState(lr=0.01)
    adam_step(state, [a, b], [np.array([3.0, -0.5]), np.array(0.0)])
    np.testing.assert_allclose(a.value, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-6)
    assert float(b.value) == 5.0


def test_adam_rejects_non_finite_gradient_naming_parameter():
    g = ad.Graph()
    w = g.parameter(np.ones(2), "surrogate.W1")
    state = AdamState()
    with pytest.raises(NonFiniteGradientError, match="surrogate.W1"):
        adam_step(state, [w], [np.array([1.0, np.nan])])
    np.testing.assert_array_equal(w.value, np.ones(2))
    assert state.step == 0


def test_minibatches_partition_rows():
    batches = minibatches(10, 4, np.random.default_rng(0))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_serialization_round_trip():
    g = ad.Graph()
    net = Mlp(MlpConfig(3, 2, 6, dropout=0.2), g, seed=9, name="surrogate")
    doc = json.loads(json.dumps(net.to_dict()))
    clone = Mlp.from_dict(doc, ad.Graph())
    x = np.random.default_rng(1).standard_normal((4, 3))
    np.testing.assert_array_equal(clone.predict(x), net.predict(x))
