import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kilnscope import autodiff as ad
from kilnscope.errors import ConfigError, MissingClass, NonFiniteLoss, ShapeMismatch
from kilnscope.model import (EdgeGeometry, TrainConfig, attention_logits, baseline_isotropic_mean,
                             class_weights, edge_geometry, distance_scale, evaluate, forward,
                             gradient_check, init_params, kernel_eval, layer_forward, load_checkpoint,
                             metrics_csv, predict, predict_logits, save_checkpoint, stratified_split,
                             train)
from kilnscope.synth import GraphSpec, gen_anisotropic_graph, gen_feature_separable_graph


def _geom(center, neighbor, theta, n, distance=None):
    theta = np.asarray(theta, dtype=float)
    return EdgeGeometry(np.asarray(center, dtype=np.intp), np.asarray(neighbor, dtype=np.intp),
                        np.zeros(theta.size) if distance is None else np.asarray(distance, dtype=float),
                        np.sin(theta), np.cos(theta), theta, n)


def T(x):
    return ad.Tensor(np.asarray(x, dtype=float))


# --- kernel and attention --------------------------------------------------------

def test_kernel_examples():
    th = np.linspace(-np.pi, np.pi, 13)
    assert np.array_equal(kernel_eval(th, [1.0], [0.0]), np.ones(13))
    assert kernel_eval(0.0, [0.0, 1.0], [0.0, 0.0]) == 1.0
    assert kernel_eval(math.pi, [0.0, 1.0], [0.0, 0.0]) == -1.0


@given(st.floats(-4, 4), st.floats(-4, 4), st.lists(st.floats(-2, 2), min_size=4, max_size=4),
       st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_kernel_phase_shift_identity(theta, shift, kappa, mu):
    ls = np.arange(4)
    a = kernel_eval(theta + shift, kappa, np.asarray(mu) + ls * shift)
    assert a == pytest.approx(kernel_eval(theta, kappa, mu), abs=1e-12)


def test_attention_hand_instance():
    geom = _geom([0], [1], [0.0], 2, distance=[0.5])
    e = attention_logits(T([[1.0], [1.0]]), geom, T([[1.0]]), T([1, 1, 1, 1, 1]), 0.2)
    assert e.values.tolist() == [3.5]


def test_attention_negative_and_zero():
    geom = _geom([0], [1], [0.0], 2)
    e = attention_logits(T([[-1.0], [-1.0]]), geom, T([[1.0]]), T([1, 1, 0, 0, 0]), 0.2)
    assert e.values.tolist() == pytest.approx([-0.4])
    rng = np.random.default_rng(0)
    geom = _geom([0, 0, 1], [1, 2, 0], rng.uniform(-3, 3, 3), 3, rng.random(3))
    e = attention_logits(T(rng.normal(size=(3, 2))), geom, T(rng.normal(size=(4, 2))), T(np.zeros(11)))
    assert not e.values.any()


def test_attention_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        attention_logits(T([[1.0]]), _geom([0], [0], [0.0], 1), T([[1.0]]), T([1, 1, 1]))


# --- layer and forward ---------------------------------------------------------------

def _layer_params(f_in, f_out, d, L, rng):
    return {"W0": T(rng.normal(size=(f_out, f_in))), "Wn": T(rng.normal(size=(f_out, f_in))),
            "Wh": T(rng.normal(size=(d, f_in))), "a": T(rng.normal(size=2 * d + 3)),
            "kappa": T(rng.normal(size=L)), "mu": T(rng.normal(size=L))}


def test_layer_without_edges_uses_self_term():
    rng = np.random.default_rng(1)
    p = _layer_params(3, 2, 2, 4, rng)
    h = rng.normal(size=(1, 3))
    out = layer_forward(T(h), _geom([], [], [], 1), p).values
    pre = h @ p["W0"].values.T
    np.testing.assert_allclose(out, np.where(pre > 0, pre, 0.2 * pre), atol=1e-15)


def test_layer_reduces_to_neighbour_mean():
    rng = np.random.default_rng(2)
    n, f = 6, 3
    center = [0, 0, 0, 1, 1, 2, 3, 4, 5, 5]
    neighbor = [1, 2, 3, 0, 4, 5, 2, 1, 0, 3]
    geom = _geom(center, neighbor, rng.uniform(-3, 3, 10), n, rng.random(10))
    p = {"W0": T(np.zeros((f, f))), "Wn": T(np.eye(f)), "Wh": T(rng.normal(size=(2, f))),
         "a": T(np.zeros(7)), "kappa": T([1.0, 0, 0, 0]), "mu": T(np.zeros(4))}
    h = rng.normal(size=(n, f))
    out = layer_forward(T(h), geom, p, activation=False).values
    for i in range(n):
        nb = [j for c, j in zip(center, neighbor) if c == i]
        np.testing.assert_allclose(out[i], h[nb].mean(axis=0), atol=1e-12)


def test_layer_path_graph_hand_trace():
    # path 0 - 1 - 2 with scalar features; node 1 hears from 0 (theta pi) and 2 (theta 0)
    geom = _geom([0, 1, 1, 2], [1, 0, 2, 1], [0.0, math.pi, 0.0, math.pi], 3, [1.0, 1.0, 1.0, 1.0])
    p = {"W0": T([[0.5]]), "Wn": T([[2.0]]), "Wh": T([[1.0]]), "a": T([0.1, 0.3, 0.0, 0.0, 1.0]),
         "kappa": T([1.0, 0.5]), "mu": T([0.0, 0.0])}
    h = [1.0, 2.0, -1.0]
    out = layer_forward(T([[v] for v in h]), geom, p).values[:, 0]

    def lrelu(x):
        return x if x > 0 else 0.2 * x

    def K(theta):
        return 1.0 + 0.5 * math.cos(theta)

    def e(i, j, theta):
        return lrelu(0.1 * h[i] + 0.3 * h[j] + math.cos(theta))

    e10, e12 = e(1, 0, math.pi), e(1, 2, 0.0)
    a10 = math.exp(e10) / (math.exp(e10) + math.exp(e12))
    a12 = 1 - a10
    expect = [
        lrelu(0.5 * h[0] + 1.0 * K(0.0) * 2.0 * h[1]),
        lrelu(0.5 * h[1] + a10 * K(math.pi) * 2.0 * h[0] + a12 * K(0.0) * 2.0 * h[2]),
        lrelu(0.5 * h[2] + 1.0 * K(math.pi) * 2.0 * h[1]),
    ]
    np.testing.assert_allclose(out, expect, atol=1e-14)


def _cfg(**kw):
    return TrainConfig(**{"layers": 2, "hidden_dim": 5, "harmonics": 3, **kw})


def test_forward_constant_classifier():
    rng = np.random.default_rng(3)
    cfg = _cfg(layers=1)
    params = init_params(2, 3, cfg)
    params["Wc"] = T(np.zeros((3, 5)))
    params["bc"] = T([0.5, -1.0, 2.0])
    out = forward(T(rng.normal(size=(4, 2))), _geom([0, 1, 2, 3], [1, 2, 3, 0], [0, 1, 2, 3], 4), params, cfg)
    assert (out.values == [0.5, -1.0, 2.0]).all()


def test_forward_two_node_hand_trace():
    cfg = TrainConfig(layers=1, hidden_dim=1, harmonics=1)
    params = {"layer0.W0": T([[1.0]]), "layer0.Wn": T([[1.0]]), "layer0.Wh": T([[0.0]]),
              "layer0.a": T(np.zeros(5)), "layer0.kappa": T([1.0]), "layer0.mu": T([0.0]),
              "Wc": T([[1.0], [-1.0]]), "bc": T([0.0, 1.0])}
    out = forward(T([[2.0], [3.0]]), _geom([0, 1], [1, 0], [0.0, math.pi], 2), params, cfg).values
    # h' = h_i + h_j (identity on the last layer), logits = (h', 1 - h')
    assert out.tolist() == [[5.0, -4.0], [5.0, -4.0]]


def _random_graph(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(5, 40))
    g, _ = gen_anisotropic_graph(GraphSpec(seed=seed, node_count=max(n, 20), k=int(rng.integers(2, 9))))
    return g


@pytest.mark.parametrize("model", ["climategraph", "isotropic_mean", "uniform_attention"])
def test_permutation_equivariance(model):
    g = _random_graph(4)
    cfg = _cfg(model=model)
    x = np.random.default_rng(5).normal(size=(g.num_nodes, 3))
    geom = edge_geometry(g, distance_scale(g))
    params = init_params(3, 2, cfg)
    base = forward(T(x), geom, params, cfg).values
    rng = np.random.default_rng(6)
    for _ in range(5):
        perm = rng.permutation(g.num_nodes)
        inv = np.argsort(perm)
        pgeom = _geom(inv[geom.center], inv[geom.neighbor], geom.theta, g.num_nodes, geom.distance)
        out = forward(T(x[perm]), pgeom, params, cfg).values
        assert np.max(np.abs(out - base[perm])) <= 1e-12


def test_uniform_attention_with_isotropic_kernel_equals_mean_model():
    g = _random_graph(7)
    geom = edge_geometry(g, distance_scale(g))
    x = T(np.random.default_rng(8).normal(size=(g.num_nodes, 4)))
    cfg_u = _cfg(model="uniform_attention")
    params = init_params(4, 2, cfg_u)
    for layer in range(2):
        params[f"layer{layer}.kappa"] = T([1.0, 0.0, 0.0])
        params[f"layer{layer}.mu"] = T(np.zeros(3))
    a = forward(x, geom, params, cfg_u).values
    b = forward(x, geom, params, replace(cfg_u, model="isotropic_mean")).values
    assert np.max(np.abs(a - b)) <= 1e-9


# --- loss helpers -------------------------------------------------------------------------

def test_class_weights():
    assert class_weights([0, 1, 0, 1], "inverse_frequency", 2).tolist() == [1.0, 1.0]
    w = class_weights([0] * 90 + [1] * 10, "inverse_frequency", 2)
    assert w.tolist() == pytest.approx([100 / 180, 5.0])
    assert class_weights([0] * 90 + [1] * 10, "uniform", 2).tolist() == [1.0, 1.0]
    with pytest.raises(MissingClass):
        class_weights([0, 0, 0], "inverse_frequency", 2)


def test_stratified_split_partitions_labeled_nodes():
    labels = np.array([0] * 50 + [1] * 30 + [-1] * 5)
    parts = stratified_split(labels, (0.6, 0.2, 0.2), seed=1)
    allidx = np.concatenate(list(parts.values()))
    assert sorted(allidx.tolist()) == list(range(80))
    assert np.sum(labels[parts["train"]] == 1) == 18
    again = stratified_split(labels, (0.6, 0.2, 0.2), seed=1)
    assert all(np.array_equal(parts[k], again[k]) for k in parts)


def test_predict_softmax():
    cls, probs = predict_logits(np.array([[3.0, 1.0], [0.2, 0.2]]))
    assert cls.tolist() == [0, 0]
    assert probs[0] == pytest.approx([0.881, 0.119], abs=1e-3)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(train_fraction=0.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})


# --- training ---------------------------------------------------------------------------------

def test_separable_training_loss_drops():
    g, _ = gen_feature_separable_graph(GraphSpec(seed=0, node_count=200, class_rule="feature_separable",
                                                 sigma=0.2))
    m = train(g, TrainConfig(hidden_dim=8, learning_rate=0.01, epochs=200, seed=0))
    assert min(r["train_loss"] for r in m.metrics_log) < 0.05
    assert evaluate(g, m, "test").macro_f1 >= 0.95


def test_training_is_deterministic_and_checkpoints_roundtrip(tmp_path):
    g = _random_graph(9, 60)
    cfg = TrainConfig(hidden_dim=6, epochs=15, seed=7, learning_rate=0.01)
    a, b = train(g, cfg), train(g, cfg)
    assert metrics_csv(a.metrics_log) == metrics_csv(b.metrics_log)
    save_checkpoint(a, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    np.testing.assert_array_equal(predict(g, back)[1], predict(g, a)[1])
    save_checkpoint(b, tmp_path / "n.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "n.json").read_bytes()


def test_best_epoch_is_reported():
    g = _random_graph(10, 60)
    m = train(g, TrainConfig(hidden_dim=4, epochs=10, learning_rate=0.01))
    best = max(m.metrics_log, key=lambda r: r["val_macro_f1"])
    assert m.val_macro_f1 == best["val_macro_f1"]
    assert m.epoch == min(r["epoch"] for r in m.metrics_log if r["val_macro_f1"] == best["val_macro_f1"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    g = _random_graph(11, 40)
    with pytest.raises(NonFiniteLoss) as exc:
        train(g, TrainConfig(hidden_dim=4, epochs=50, learning_rate=1e200))
    assert exc.value.epoch >= 1


def test_single_class_graph_rejected():
    g = _random_graph(12, 30)
    for n in g.nodes:
        n.label = 0
    with pytest.raises(MissingClass):
        baseline_isotropic_mean(g, TrainConfig(epochs=1))


def test_gradient_check_all_models():
    for model in ("climategraph", "isotropic_mean", "uniform_attention"):
        assert gradient_check(seed=1, model=model) < 1e-4


def test_gradient_check_ten_node_graph():
    assert gradient_check(seed=2, nodes=10) < 1e-4
