import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from battpinn import autodiff as ad
from battpinn import pinn, synth
from battpinn.dynamics import (ConfigurationError, DeepHpm, DeepHpmConfig, VerhulstParams,
                               assemble_terms, dynamics_from_dict, input_library, map_verhulst,
                               parse_terms, verhulst_rate)
from battpinn.nn import xavier_normal_arrays

raws = st.one_of(st.floats(-50, 50), st.sampled_from([-1e6, 1e6, 0.0]))


def _params(r=0.02, k=0.6, c=0.04, u0=0.1):
    g = ad.Graph()
    return g, VerhulstParams(g, u0=u0, r=r, k=k, c=c)


def test_rate_roots_and_vertex():
    g, p = _params()
    v = p.values()
    r, k, c = v["r"], v["K"], v["C"]
    assert (r, k, c) == pytest.approx((0.02, 0.6, 0.04), rel=1e-9)
    u = g.constant(np.array([c, k, 0.5 * (k + c)]))
    rate = verhulst_rate(u, p).value
    assert rate[0] == pytest.approx(0.0, abs=1e-15)
    assert rate[1] == pytest.approx(0.0, abs=1e-15)
    assert rate[2] == pytest.approx(r * (k - c) / 4, rel=1e-12)


def test_rate_sign():
    g, p = _params()
    v = p.values()
    inside = np.linspace(v["C"] + 1e-3, v["K"] - 1e-3, 50)
    above = np.linspace(v["K"] + 1e-3, 0.99, 20)
    assert np.all(p.rate(g.constant(inside)).value > 0)
    assert np.all(p.rate(g.constant(above)).value < 0)


@settings(max_examples=200, deadline=None)
@given(raws, raws, raws, st.floats(0.001, 0.19))
def test_reparameterization_totality(rr, rk, rc, u0):
    r, k, c = map_verhulst(np.float64(rr), np.float64(rk), np.float64(rc), u0)
    assert r > 0
    assert 0.2 < k < 1.0
    assert 0.0 < c <= u0


def test_rate_gradient_matches_finite_differences():
    g, p = _params()
    u = g.constant(np.array([0.07, 0.2, 0.45]))
    rate = p.rate(u).sum()
    grads = g.gradients(rate, p.parameters)
    h = 1e-6
    for node, grad in zip(p.parameters, grads):
        base = float(node.value)
        vals = []
        for s in (h, -h):
            g.set_value(node, base + s)
            vals.append(float(p.rate(g.constant(u.value)).sum().value))
        g.set_value(node, base)
        assert float(grad) == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-4)


def test_bad_initial_values_rejected():
    with pytest.raises(ConfigurationError):
        VerhulstParams(ad.Graph(), u0=0.25)
    with pytest.raises(ConfigurationError):
        VerhulstParams(ad.Graph(), k=1.2)


def test_verhulst_serialization_round_trip():
    g, p = _params(r=0.013, k=0.42, c=0.031)
    clone = dynamics_from_dict(p.to_dict(), ad.Graph())
    assert clone.values() == pytest.approx(p.values(), rel=1e-15)


def test_term_parsing_and_library():
    assert parse_terms("u_x, t") == ("t", "ux")
    assert parse_terms(["uxx", "x"]) == ("x", "uxx")
    with pytest.raises(ConfigurationError):
        parse_terms("")
    with pytest.raises(ConfigurationError):
        parse_terms("t,q")
    lib = input_library()
    assert len(lib) == 15
    assert lib[0] == ("x",) and lib[1] == ("t",) and lib[-1] == ("x", "t", "u", "ux")


def test_term_assembly_width():
    cfg = DeepHpmConfig.build(("x", "t", "u", "ux"), n_features=8, hidden_layers=1, neurons=4)
    assert cfg.input_dim == 18
    g = ad.Graph()
    n = 3
    terms = {"x": g.constant(np.zeros((n, 8))), "t": g.constant(np.zeros((n, 1))),
             "u": g.constant(np.zeros(n)), "ux": g.constant(np.zeros((n, 8)))}
    assert assemble_terms(cfg, terms).shape == (n, 18)
    del terms["ux"]
    with pytest.raises(ConfigurationError, match="ux"):
        assemble_terms(cfg, terms)


def test_non_canonical_config_rejected():
    cfg = DeepHpmConfig.build(("t",), 8, 1, 4)
    with pytest.raises(ConfigurationError):
        DeepHpmConfig(("u", "t"), 8, cfg.network)


def test_zero_network_gives_constant_rate():
    cfg = DeepHpmConfig.build(("t",), 8, 2, 6)
    arrays = [np.zeros_like(a) for a in xavier_normal_arrays(cfg.network, 0)]
    arrays[-1] = np.array([0.3])
    g = ad.Graph()
    hpm = DeepHpm(cfg, g, arrays=arrays)
    rate = hpm.rate({"t": g.constant(np.linspace(-2, 2, 7).reshape(-1, 1))})
    np.testing.assert_array_equal(rate.value, np.full(7, 0.3))


def test_deephpm_learns_exponential_rate():
    # u_t = 0.05 u; the hidden-physics network sees only u
    table, truth = synth.generate_dataset(synth.GeneratorSpec("exp", {"r": 0.05}, u0=0.1),
                                          cells=1, noise_std=0.0, seed=0, n_cycles=40,
                                          truncate_at_eol=False, n_features=1)
    cfg = pinn.TrainConfig(epochs=1500, batch_size=64, lr=3e-3, dynamics="deephpm",
                           balancing="sum", hpm_terms=("u",), hidden_layers=2, neurons=16,
                           dropout=0.0, features=(), seed=0)
    model = pinn.train(table, cfg)
    f = model.factors
    u = np.linspace(table.pcl.min(), table.pcl.max(), 25)
    g = model.surrogate.graph
    g.reset()
    rate_std = model.dynamics.rate({"u": g.constant(f.apply_u(u).reshape(-1, 1))}).value
    np.testing.assert_allclose(rate_std * f.rate_scale, 0.05 * u, rtol=0.1)
