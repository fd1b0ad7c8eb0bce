"""ClimateGraph: anisotropic, geometry-aware graph attention for node
classification, plus the isotropic ablations it is compared against.

One layer computes, for every centre node i with neighbours j,

    h_i' = sigma(W0 h_i + sum_j alpha_ij K(theta_ij) Wn h_j)

with K a truncated Fourier series over the edge bearing and alpha a
softmax over LeakyReLU(a . [Wh h_i | Wh h_j | phi_ij]) within each
neighbourhood, phi_ij = (normalised distance, sin theta, cos theta).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, MissingClass, NonFiniteLoss, NumericalError, ShapeMismatch
from .graph import FeatureStats, SpatialGraph, fit_feature_stats
from .metrics import macro_f1, node_classification_report

log = logging.getLogger(__name__)

MODELS = ("climategraph", "isotropic_mean", "uniform_attention")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    model: str = "climategraph"
    layers: int = 2
    hidden_dim: int = 32
    attention_dim: Optional[int] = None  # defaults to hidden_dim
    harmonics: int = 4
    learning_rate: float = 1e-3
    epochs: int = 300
    seed: int = 0
    class_weight_mode: str = "inverse_frequency"
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    leaky_slope: float = 0.2
    num_classes: Optional[int] = None
    standardize: bool = True

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}")
        if self.layers < 1 or self.hidden_dim < 1 or self.harmonics < 1 or self.epochs < 1:
            raise ConfigError("layers, hidden_dim, harmonics and epochs must be >= 1")
        if self.attention_dim is not None and self.attention_dim < 1:
            raise ConfigError("attention_dim must be >= 1")
        if self.class_weight_mode not in ("uniform", "inverse_frequency"):
            raise ConfigError("class_weight_mode must be 'uniform' or 'inverse_frequency'")
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be non-negative and sum to 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")

    @property
    def att_dim(self) -> int:
        return self.attention_dim or self.hidden_dim

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --- geometry ------------------------------------------------------------------

@dataclass
class EdgeGeometry:
    center: np.ndarray      # aggregating node i
    neighbor: np.ndarray    # message source j
    distance: np.ndarray    # normalised, in [0, 2]
    sin: np.ndarray
    cos: np.ndarray
    theta: np.ndarray
    num_nodes: int

    @property
    def num_edges(self) -> int:
        return int(self.center.size)

    @property
    def phi(self) -> np.ndarray:
        return np.column_stack([self.distance, self.sin, self.cos])

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.center, minlength=self.num_nodes)


def distance_scale(graph: SpatialGraph, nodes=None) -> float:
    """95th percentile of edge lengths whose centre is in ``nodes`` (all when None)."""
    d = graph.distance
    if nodes is not None:
        d = d[np.isin(graph.src, np.asarray(nodes))]
    if d.size == 0:
        return 1.0
    scale = float(np.percentile(d, 95))
    return scale if scale > 0 else 1.0


def edge_geometry(graph: SpatialGraph, scale: float) -> EdgeGeometry:
    theta = np.asarray(graph.bearing, dtype=np.float64)
    return EdgeGeometry(
        center=np.asarray(graph.src, dtype=np.intp),
        neighbor=np.asarray(graph.dst, dtype=np.intp),
        distance=np.clip(np.asarray(graph.distance) / scale, 0.0, 2.0),
        sin=np.sin(theta), cos=np.cos(theta), theta=theta,
        num_nodes=graph.num_nodes,
    )


# --- parameters ----------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return ad.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(in_dim: int, num_classes: int, config: TrainConfig) -> dict:
    rng = np.random.default_rng(config.seed)
    params = {}
    dims = [in_dim] + [config.hidden_dim] * config.layers
    d = config.att_dim
    L = config.harmonics
    for layer in range(config.layers):
        f_in, f_out = dims[layer], dims[layer + 1]
        p = f"layer{layer}."
        params[p + "W0"] = _uniform(rng, (f_out, f_in), f_in)
        params[p + "Wn"] = _uniform(rng, (f_out, f_in), f_in)
        if config.model == "climategraph":
            params[p + "Wh"] = _uniform(rng, (d, f_in), f_in)
            params[p + "a"] = _uniform(rng, (2 * d + 3,), 2 * d + 3)
        if config.model in ("climategraph", "uniform_attention"):
            kappa = np.zeros(L)
            kappa[0] = 1.0
            kappa[1:] = 0.1 * rng.uniform(-1.0, 1.0, size=L - 1)
            params[p + "kappa"] = ad.Tensor(kappa, requires_grad=True)
            params[p + "mu"] = ad.Tensor(np.zeros(L), requires_grad=True)
    params["Wc"] = _uniform(rng, (num_classes, dims[-1]), dims[-1])
    params["bc"] = ad.Tensor(np.zeros(num_classes), requires_grad=True)
    return params


def kernel_eval(theta, kappa, mu, harmonics: Optional[int] = None):
    """K(theta) = sum_l kappa_l cos(l*theta - mu_l), plain numpy."""
    kappa = np.asarray(kappa, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    L = harmonics or kappa.size
    ls = np.arange(L, dtype=np.float64)
    th = np.asarray(theta, dtype=np.float64)
    return (kappa[:L] * np.cos(th[..., None] * ls - mu[:L])).sum(axis=-1)


def kernel_tensor(theta: np.ndarray, kappa: ad.Tensor, mu: ad.Tensor) -> ad.Tensor:
    ls = np.arange(kappa.shape[0], dtype=np.float64)
    return ad.matmul(ad.cos_shifted(ad.Tensor(theta), ls, mu), kappa)


def attention_logits(h, geom: EdgeGeometry, Wh, a, slope: float = 0.2) -> ad.Tensor:
    """e_ij = LeakyReLU(a . [Wh h_i | Wh h_j | phi_ij]) per edge."""
    h, Wh, a = ad.as_tensor(h), ad.as_tensor(Wh), ad.as_tensor(a)
    d = Wh.shape[0]
    if a.shape != (2 * d + 3,):
        raise ShapeMismatch(f"attention vector has shape {a.shape}, expected ({2 * d + 3},)")
    zh = ad.matmul(h, ad.transpose(Wh))
    s_center = ad.matmul(zh, ad.gather(a, np.arange(d)))
    s_neigh = ad.matmul(zh, ad.gather(a, np.arange(d, 2 * d)))
    s_geo = ad.matmul(ad.Tensor(geom.phi), ad.gather(a, np.arange(2 * d, 2 * d + 3)))
    pre = ad.gather(s_center, geom.center) + ad.gather(s_neigh, geom.neighbor) + s_geo
    return ad.leaky_relu(pre, slope)


def layer_forward(h, geom: EdgeGeometry, params: dict, *, mode: str = "climategraph",
                  slope: float = 0.2, activation: bool = True, return_alpha: bool = False):
    """One message-passing layer. ``params`` holds W0, Wn and, per mode,
    Wh/a (attention) and kappa/mu (kernel)."""
    h = ad.as_tensor(h)
    if h.shape[0] != geom.num_nodes:
        raise ShapeMismatch(f"H has {h.shape[0]} rows for {geom.num_nodes} nodes")
    out = ad.matmul(h, ad.transpose(params["W0"]))
    alpha = None
    if geom.num_edges:
        if mode == "climategraph":
            e = attention_logits(h, geom, params["Wh"], params["a"], slope)
            alpha = ad.segment_softmax(e, geom.center, geom.num_nodes)
        else:
            deg = geom.in_degree()
            alpha = ad.Tensor(1.0 / deg[geom.center])
        if mode == "isotropic_mean":
            weight = alpha
        else:
            weight = alpha * kernel_tensor(geom.theta, params["kappa"], params["mu"])
        zn = ad.matmul(h, ad.transpose(params["Wn"]))
        msg = ad.reshape(weight, (geom.num_edges, 1)) * ad.gather(zn, geom.neighbor)
        out = out + ad.segment_sum(msg, geom.center, geom.num_nodes)
    if activation:
        out = ad.leaky_relu(out, slope)
    return (out, alpha) if return_alpha else out


def layer_params(params: dict, layer: int) -> dict:
    p = f"layer{layer}."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def forward(x, geom: EdgeGeometry, params: dict, config: TrainConfig) -> ad.Tensor:
    """Stacked layers (LeakyReLU between, identity on the last) then the linear classifier."""
    h = ad.as_tensor(x)
    for layer in range(config.layers):
        h = layer_forward(h, geom, layer_params(params, layer), mode=config.model,
                          slope=config.leaky_slope, activation=layer < config.layers - 1)
    return ad.matmul(h, ad.transpose(params["Wc"])) + params["bc"]


# --- loss and training -------------------------------------------------------

def class_weights(labels, mode: str, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    labels = labels[labels >= 0]
    if mode == "uniform":
        return np.ones(num_classes)
    if mode != "inverse_frequency":
        raise ConfigError(f"unknown class weight mode {mode!r}")
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingClass(f"classes {missing.tolist()} have no labeled nodes")
    return labels.size / (num_classes * counts.astype(np.float64))


def stratified_split(labels, fractions, seed: int) -> dict:
    """Seeded per-class split of labeled node indices into train/val/test."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(fractions[0] * idx.size))
        n_val = int(round(fractions[1] * idx.size))
        n_val = min(n_val, idx.size - n_train)
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return {k: np.sort(np.concatenate(v)) if v else np.zeros(0, dtype=np.intp) for k, v in parts.items()}


class Adam:
    def __init__(self, params: list, lr: float, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainedModel:
    config: TrainConfig
    params: dict
    num_classes: int
    feature_stats: Optional[FeatureStats]
    distance_scale: float
    splits: dict = field(default_factory=dict)  # split name -> node ids
    epoch: int = 0
    val_macro_f1: float = 0.0
    metrics_log: list = field(default_factory=list)

    def prepare(self, graph: SpatialGraph) -> tuple[np.ndarray, EdgeGeometry]:
        x = graph.features()
        if self.feature_stats is not None:
            x = self.feature_stats.apply(x)
        return x, edge_geometry(graph, self.distance_scale)

    def logits(self, graph: SpatialGraph) -> np.ndarray:
        x, geom = self.prepare(graph)
        return forward(x, geom, self.params, self.config).values

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "num_classes": self.num_classes,
            "feature_stats": self.feature_stats.to_dict() if self.feature_stats else None,
            "distance_scale": self.distance_scale,
            "params": {k: {"shape": list(v.shape), "values": v.values.reshape(-1).tolist()}
                       for k, v in self.params.items()},
            "epoch": self.epoch,
            "val_macro_f1": self.val_macro_f1,
            "splits": {k: list(v) for k, v in self.splits.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        params = {k: ad.Tensor(np.array(v["values"], dtype=np.float64).reshape(v["shape"]))
                  for k, v in d["params"].items()}
        stats = FeatureStats.from_dict(d["feature_stats"]) if d.get("feature_stats") else None
        return cls(TrainConfig.from_dict(d["config"]), params, int(d["num_classes"]), stats,
                   float(d["distance_scale"]), {k: [int(i) for i in v] for k, v in d.get("splits", {}).items()},
                   int(d.get("epoch", 0)), float(d.get("val_macro_f1", 0.0)))


def save_checkpoint(model: TrainedModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), separators=(",", ":"), allow_nan=False) + "\n")


def load_checkpoint(path) -> TrainedModel:
    return TrainedModel.from_dict(json.loads(Path(path).read_text()))


def metrics_csv(metrics_log: list) -> str:
    lines = ["epoch,train_loss,val_loss,val_macro_f1"]
    for row in metrics_log:
        lines.append(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},{row['val_macro_f1']!r}")
    return "\n".join(lines) + "\n"


def _numpy_wce(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray, idx: np.ndarray) -> float:
    if idx.size == 0:
        return float("nan")
    logp = ad.log_softmax_values(logits[idx])
    y = labels[idx]
    return float(-(weights[y] * logp[np.arange(idx.size), y]).sum() / idx.size)


def train(graph: SpatialGraph, config: Optional[TrainConfig] = None) -> TrainedModel:
    """Full-batch Adam on the weighted cross-entropy over the training split.

    Returns the parameters from the epoch with the best validation macro-F1
    (earliest on ties).
    """
    config = config or TrainConfig()
    config.validate()
    labels = graph.labels()
    present = np.unique(labels[labels >= 0])
    if present.size < 2:
        raise MissingClass("training needs labeled nodes from at least 2 classes")
    num_classes = config.num_classes or int(labels.max()) + 1
    splits = stratified_split(labels, (config.train_fraction, config.val_fraction, config.test_fraction),
                              config.seed)
    train_idx, val_idx = splits["train"], splits["val"]
    select_idx = val_idx if val_idx.size else train_idx
    x = graph.features()
    stats = fit_feature_stats(x, train_idx) if config.standardize else None
    if stats is not None:
        x = stats.apply(x)
    scale = distance_scale(graph, train_idx)
    geom = edge_geometry(graph, scale)
    weights = class_weights(labels[train_idx], config.class_weight_mode, num_classes)
    params = init_params(x.shape[1], num_classes, config)
    plist = list(params.values())
    opt = Adam(plist, config.learning_rate)

    best_f1, best_epoch, best_values = -1.0, 0, None
    history = []
    for epoch in range(1, config.epochs + 1):
        ad.zero_grads(plist)
        try:
            with ad.Tape() as tape:
                logits = forward(x, geom, params, config)
                loss = ad.weighted_cross_entropy(logits, labels, weights, train_idx)
                tape.backward(loss)
        except NumericalError as exc:
            raise NonFiniteLoss(epoch, float("nan")) from exc
        train_loss = float(loss.values)
        if not math.isfinite(train_loss):
            raise NonFiniteLoss(epoch, train_loss)
        lv = logits.values
        val_loss = _numpy_wce(lv, labels, weights, val_idx)
        val_f1 = macro_f1(np.argmax(lv[select_idx], axis=1), labels[select_idx], num_classes)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_macro_f1": val_f1})
        if val_f1 > best_f1:
            best_f1, best_epoch = val_f1, epoch
            best_values = {k: v.values.copy() for k, v in params.items()}
        opt.step()

    final = {k: ad.Tensor(v) for k, v in best_values.items()}
    ids = np.array([n.id for n in graph.nodes])
    return TrainedModel(config, final, num_classes, stats, scale,
                        {k: ids[v].tolist() for k, v in splits.items()},
                        best_epoch, best_f1, history)


def baseline_isotropic_mean(graph: SpatialGraph, config: Optional[TrainConfig] = None) -> TrainedModel:
    """alpha uniform and K == 1: a direction-blind mean aggregator."""
    return train(graph, replace(config or TrainConfig(), model="isotropic_mean"))


def baseline_uniform_attention(graph: SpatialGraph, config: Optional[TrainConfig] = None) -> TrainedModel:
    """Learned directional kernel, uniform attention weights."""
    return train(graph, replace(config or TrainConfig(), model="uniform_attention"))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(ad.log_softmax_values(np.asarray(logits, dtype=np.float64)))


def predict_logits(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = softmax(logits)
    return np.argmax(probs, axis=1), probs  # argmax returns the first maximum


def predict(graph: SpatialGraph, model: TrainedModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-node class (ties to the lowest index) and probability vectors."""
    return predict_logits(model.logits(graph))


def split_indices(graph: SpatialGraph, model: TrainedModel, split: str) -> np.ndarray:
    if split == "all":
        return np.flatnonzero(graph.labels() >= 0)
    index = {n.id: i for i, n in enumerate(graph.nodes)}
    return np.array(sorted(index[i] for i in model.splits.get(split, []) if i in index), dtype=np.intp)


def evaluate(graph: SpatialGraph, model: TrainedModel, split: str = "test"):
    idx = split_indices(graph, model, split)
    pred, _ = predict(graph, model)
    return node_classification_report(pred[idx], graph.labels()[idx], model.num_classes)


def run_replicates(graph: SpatialGraph, config: TrainConfig, replicates: int) -> list:
    """Train ``replicates`` models with seeds seed, seed+1, ...; returns (model, test report) pairs."""
    out = []
    for r in range(replicates):
        m = train(graph, replace(config, seed=config.seed + r))
        out.append((m, evaluate(graph, m, "test")))
    return out


# --- gradient check ------------------------------------------------------------

def gradcheck_graph(seed: int = 0, nodes: int = 12, features: int = 4, k: int = 8) -> SpatialGraph:
    from .geo import GeoPoint
    from .graph import PoiNode, knn_edges

    rng = np.random.default_rng(seed)
    lons = 74.0 + rng.uniform(0, 0.2, nodes)
    lats = 31.0 + rng.uniform(0, 0.2, nodes)
    labels = np.arange(nodes) % 2
    pois = [PoiNode(i, GeoPoint(float(lons[i]), float(lats[i])), rng.normal(size=features), int(labels[i]))
            for i in range(nodes)]
    return knn_edges(pois, k)


def gradient_check(seed: int = 0, nodes: int = 12, layers: int = 2, harmonics: int = 4,
                   hidden_dim: int = 8, eps: float = 1e-5, model: str = "climategraph") -> float:
    """Max relative error of analytic vs central-difference gradients of the full loss."""
    graph = gradcheck_graph(seed, nodes)
    config = TrainConfig(model=model, layers=layers, harmonics=harmonics, hidden_dim=hidden_dim,
                         seed=seed, standardize=False)
    labels = graph.labels()
    x = graph.features()
    geom = edge_geometry(graph, distance_scale(graph))
    params = init_params(x.shape[1], 2, config)
    rng = np.random.default_rng(seed + 1)
    # move kernel phases and higher harmonics off their special initial values
    for name, p in params.items():
        if name.endswith("mu") or name.endswith("kappa"):
            p.values += rng.uniform(-0.5, 0.5, size=p.shape)
    weights = class_weights(labels, "inverse_frequency", 2)
    mask = np.arange(nodes)

    def loss():
        return ad.weighted_cross_entropy(forward(x, geom, params, config), labels, weights, mask)

    return ad.finite_difference_check(loss, list(params.values()), eps)
