"""The six baseline recommenders and their training / decision rules.

All kinds share user and item embedding tables ``P`` and ``Q``:

* ``deepmf``: dot product of the two embedding rows.
* ``vdeepmf``: each embedding row feeds a linear *mean* head and a softplus
  *variance* head; training samples the latent vectors with the
  reparameterisation trick, inference uses the means.
* ``ncf_regression`` / ``binary_regression``: concatenated embeddings through
  a dropout MLP ending in one rectified / sigmoid unit.
* ``ncf_classification`` / ``ncf_classification_improved``: the same MLP
  shape ending in a softmax over votes ``0..R``. The two kinds share every
  parameter; they only differ in how a vote is read off the distribution
  (argmax vs. expectation).

Regression targets are rescaled to ``[0, 1]`` over the rating scale for
training and mapped back at prediction time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import checkpoint
from .numkernel import (
    AdamState,
    DenseLayer,
    adam_step,
    dense_backward,
    dense_forward,
    dropout_mask,
    embedding_init,
    gaussian_reparameterize,
    loss_eval,
    reparameterize_backward,
)

MODEL_KINDS = (
    "deepmf",
    "vdeepmf",
    "ncf_regression",
    "ncf_classification",
    "ncf_classification_improved",
    "binary_regression",
)
CLASSIFICATION_KINDS = ("ncf_classification", "ncf_classification_improved")
REGRESSION_KINDS = ("deepmf", "vdeepmf", "ncf_regression")
MLP_KINDS = ("ncf_regression", "binary_regression") + CLASSIFICATION_KINDS

VAR_BIAS_INIT = -6.0


class ModelError(ValueError):
    pass


def check_kind(kind):
    if kind not in MODEL_KINDS:
        raise ModelError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    return kind


@dataclass(frozen=True)
class NetConfig:
    latent_dim: int = 16
    hidden: Optional[tuple] = None
    dropout: Optional[tuple] = None
    epochs: int = 15
    batch_size: int = 512
    learning_rate: float = 1e-3
    relevance_threshold: Optional[int] = None

    def resolve(self, kind, scale) -> "NetConfig":
        """Fill kind-dependent defaults (layer widths, dropout, threshold)."""
        check_kind(kind)
        hidden, dropout = self.hidden, self.dropout
        if kind in MLP_KINDS:
            if kind in CLASSIFICATION_KINDS:
                default_h, default_d = (80, 25), (0.6, 0.4)
            else:
                default_h, default_d = (50, 20), (0.4, 0.4)
            hidden = tuple(hidden) if hidden is not None else default_h
            dropout = tuple(dropout) if dropout is not None else default_d
        else:
            hidden, dropout = (), ()
        if len(hidden) != len(dropout):
            raise ModelError(f"{len(hidden)} hidden widths but {len(dropout)} dropout rates")
        threshold = self.relevance_threshold
        if threshold is None and kind == "binary_regression":
            threshold = scale[1] - 1
        return replace(self, hidden=hidden, dropout=dropout, relevance_threshold=threshold)

    def output(self, kind):
        return {
            "deepmf": "dot",
            "vdeepmf": "dot",
            "ncf_regression": "rectified_unit",
            "binary_regression": "sigmoid_unit",
        }.get(kind, "softmax")


@dataclass
class TrainedModel:
    kind: str
    num_users: int
    num_items: int
    scale: tuple
    config: NetConfig
    params: dict
    loss_log: list = field(default_factory=list)

    @property
    def P(self):
        return self.params["P"]

    @property
    def Q(self):
        return self.params["Q"]

    @property
    def num_classes(self):
        return self.scale[1] + 1

    def mlp_layers(self):
        """The dense stack after the embeddings (empty for the dot-product kinds)."""
        if self.kind not in MLP_KINDS:
            return []
        names = [f"fc{n + 1}" for n in range(len(self.config.hidden))] + ["out"]
        acts = ["relu"] * len(self.config.hidden) + [_output_activation(self.kind)]
        return [self.layer(n, a) for n, a in zip(names, acts)]

    def layer(self, name, activation):
        return DenseLayer(self.params[f"{name}.W"], self.params[f"{name}.b"], activation)

    def copy(self):
        return TrainedModel(self.kind, self.num_users, self.num_items, self.scale, self.config,
                            {k: v.copy() for k, v in self.params.items()}, list(self.loss_log))


def _output_activation(kind):
    if kind == "ncf_regression":
        return "relu"
    if kind == "binary_regression":
        return "sigmoid"
    return "softmax"


def build(kind, num_users, num_items, config: NetConfig | None = None, rng=None, scale=(1, 5)) -> TrainedModel:
    """Create an untrained model with freshly initialised parameters."""
    check_kind(kind)
    if rng is None:
        raise ModelError("build needs an rng")
    config = (config or NetConfig()).resolve(kind, scale)
    K = config.latent_dim
    if num_users <= 0 or num_items <= 0 or K <= 0:
        raise ModelError(f"dimensions must be positive: users={num_users} items={num_items} K={K}")
    if kind in CLASSIFICATION_KINDS and scale[0] < 0:
        raise ModelError("classification needs a non-negative rating scale")
    params = {"P": embedding_init(num_users, K, rng), "Q": embedding_init(num_items, K, rng)}
    if kind == "vdeepmf":
        for side in ("user", "item"):
            mean = DenseLayer.init(K, K, "linear", rng)
            var = DenseLayer.init(K, K, "softplus", rng)
            params[f"{side}_mean.W"], params[f"{side}_mean.b"] = mean.weights, mean.bias
            params[f"{side}_var.W"] = var.weights
            params[f"{side}_var.b"] = np.full(K, VAR_BIAS_INIT)
    elif kind in MLP_KINDS:
        out_width = scale[1] + 1 if kind in CLASSIFICATION_KINDS else 1
        widths = [2 * K, *config.hidden, out_width]
        names = [f"fc{n + 1}" for n in range(len(config.hidden))] + ["out"]
        for name, w_in, w_out in zip(names, widths[:-1], widths[1:]):
            layer = DenseLayer.init(w_in, w_out, "linear", rng)
            params[f"{name}.W"], params[f"{name}.b"] = layer.weights, layer.bias
    return TrainedModel(kind, int(num_users), int(num_items), (int(scale[0]), int(scale[1])),
                        config, params)


# --------------------------------------------------------------------------
# forward / backward


def forward(model: TrainedModel, users, items, training=False, rng=None, masks=None, noise=None):
    """Batch forward pass.

    Returns ``(output, cache)``. ``output`` is the normalised prediction for
    the dot-product kinds and ncf_regression, a relevance probability for
    binary_regression, and a ``(batch, R + 1)`` probability matrix for the
    classification kinds. In training mode dropout masks and Gaussian noise are
    drawn from ``rng`` unless frozen through ``masks`` / ``noise``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    p = model.params
    g, h = p["P"][users], p["Q"][items]
    cache = {"users": users, "items": items, "g": g, "h": h, "training": training}
    kind = model.kind
    if kind == "deepmf":
        return np.sum(g * h, axis=1), cache
    if kind == "vdeepmf":
        layers = {name: model.layer(name, act) for name, act in
                  (("user_mean", "linear"), ("user_var", "softplus"),
                   ("item_mean", "linear"), ("item_var", "softplus"))}
        mu1, cache["user_mean"] = dense_forward(g, layers["user_mean"])
        var1, cache["user_var"] = dense_forward(g, layers["user_var"])
        mu2, cache["item_mean"] = dense_forward(h, layers["item_mean"])
        var2, cache["item_var"] = dense_forward(h, layers["item_var"])
        if training:
            n1 = n2 = None
            if noise is not None:
                n1, n2 = noise
            a, n1 = gaussian_reparameterize(mu1, var1, rng, n1)
            b, n2 = gaussian_reparameterize(mu2, var2, rng, n2)
            cache["noise"] = (n1, n2)
        else:
            a, b = mu1, mu2
        cache["a"], cache["b"] = a, b
        cache["var"] = (var1, var2)
        return np.sum(a * b, axis=1), cache
    # MLP kinds: item embedding first, then user embedding
    x = np.concatenate([h, g], axis=1)
    layers = model.mlp_layers()
    layer_caches = []
    used_masks = []
    for n, layer in enumerate(layers[:-1]):
        x, c = dense_forward(x, layer)
        layer_caches.append(c)
        if training:
            mask = masks[n] if masks is not None else dropout_mask(x.shape, model.config.dropout[n], rng)
            used_masks.append(mask)
            x = x * mask
    out, c = dense_forward(x, layers[-1])
    layer_caches.append(c)
    cache["layers"] = layer_caches
    cache["masks"] = used_masks
    if kind in CLASSIFICATION_KINDS:
        return out, cache
    return out[:, 0], cache


def backward(model: TrainedModel, cache, grad_out) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d output."""
    kind = model.kind
    users, items = cache["users"], cache["items"]
    grads = {}
    if kind == "deepmf":
        grad_g = grad_out[:, None] * cache["h"]
        grad_h = grad_out[:, None] * cache["g"]
    elif kind == "vdeepmf":
        a, b = cache["a"], cache["b"]
        grad_a = grad_out[:, None] * b
        grad_b = grad_out[:, None] * a
        if cache["training"]:
            n1, n2 = cache["noise"]
            var1, var2 = cache["var"]
            grad_mu1, grad_var1 = reparameterize_backward(grad_a, var1, n1)
            grad_mu2, grad_var2 = reparameterize_backward(grad_b, var2, n2)
        else:
            grad_mu1, grad_mu2 = grad_a, grad_b
            grad_var1 = np.zeros_like(grad_a)
            grad_var2 = np.zeros_like(grad_b)
        grad_g = np.zeros_like(cache["g"])
        grad_h = np.zeros_like(cache["h"])
        for name, upstream, target in (("user_mean", grad_mu1, grad_g), ("user_var", grad_var1, grad_g),
                                       ("item_mean", grad_mu2, grad_h), ("item_var", grad_var2, grad_h)):
            gin, gw, gb = dense_backward(upstream, cache[name])
            grads[f"{name}.W"], grads[f"{name}.b"] = gw, gb
            target += gin
    else:
        layer_caches = cache["layers"]
        names = [f"fc{n + 1}" for n in range(len(model.config.hidden))] + ["out"]
        g = grad_out if grad_out.ndim == 2 else grad_out[:, None]
        for n in range(len(layer_caches) - 1, -1, -1):
            g, gw, gb = dense_backward(g, layer_caches[n])
            grads[f"{names[n]}.W"], grads[f"{names[n]}.b"] = gw, gb
            if n > 0 and cache["training"]:
                g = g * cache["masks"][n - 1]
        K = model.config.latent_dim
        grad_h, grad_g = g[:, :K], g[:, K:]
    gP = np.zeros_like(model.params["P"])
    gQ = np.zeros_like(model.params["Q"])
    np.add.at(gP, users, grad_g)
    np.add.at(gQ, items, grad_h)
    grads["P"], grads["Q"] = gP, gQ
    return grads


def targets_for(model: TrainedModel, ratings):
    ratings = np.asarray(ratings)
    lo, hi = model.scale
    kind = model.kind
    if kind in REGRESSION_KINDS:
        return (ratings - lo) / max(hi - lo, 1)
    if kind == "binary_regression":
        return (ratings >= model.config.relevance_threshold).astype(np.float64)
    onehot = np.zeros((len(ratings), model.num_classes))
    onehot[np.arange(len(ratings)), ratings] = 1.0
    return onehot


def loss_kind(kind):
    if kind in REGRESSION_KINDS:
        return "squared"
    if kind == "binary_regression":
        return "binary_cross_entropy"
    return "categorical_cross_entropy"


def batch_loss(model: TrainedModel, users, items, ratings, training=True, rng=None,
               masks=None, noise=None):
    """Mean per-example loss over a batch and its parameter gradients."""
    out, cache = forward(model, users, items, training=training, rng=rng, masks=masks, noise=noise)
    value, grad = loss_eval(loss_kind(model.kind), out, targets_for(model, ratings))
    n = len(ratings)
    return value / n, backward(model, cache, grad / n)


def _check_ids(model, users, items):
    if len(users) and (users.min() < 0 or users.max() >= model.num_users):
        raise ModelError(f"user id outside [0, {model.num_users})")
    if len(items) and (items.min() < 0 or items.max() >= model.num_items):
        raise ModelError(f"item id outside [0, {model.num_items})")


def train(model: TrainedModel, train_set, rng) -> TrainedModel:
    """Mini-batch Adam training; returns a new model, leaving ``model`` untouched."""
    users, items, ratings = train_set.users, train_set.items, train_set.ratings
    _check_ids(model, users, items)
    lo, hi = model.scale
    if len(ratings) and (ratings.min() < lo or ratings.max() > hi):
        raise ModelError(f"ratings outside the model scale {model.scale}")
    trained = model.copy()
    cfg = trained.config
    state = AdamState.for_params(trained.params, learning_rate=cfg.learning_rate)
    n = len(ratings)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = batch_loss(trained, users[idx], items[idx], ratings[idx], rng=rng)
            total += loss * len(idx)
            adam_step(trained.params, grads, state)
        trained.loss_log.append(total / n if n else 0.0)
    return trained


# --------------------------------------------------------------------------
# decision rules


@dataclass
class ClassDistribution:
    """Probabilities over vote classes. Classes below ``min_vote`` are ignored."""

    probabilities: np.ndarray
    votes: np.ndarray
    min_vote: Optional[int] = None

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.votes = np.asarray(self.votes)
        if self.probabilities.shape != self.votes.shape:
            raise ModelError("probabilities and votes differ in length")

    def eligible(self):
        if self.min_vote is None:
            return np.ones(len(self.votes), dtype=bool)
        return self.votes >= self.min_vote


def argmax_vote(dist: ClassDistribution):
    """Vote of the most probable eligible class; ties go to the higher vote."""
    votes, _ = _argmax_rows(dist.probabilities[None, :], dist.votes, dist.eligible())
    return votes[0].item()


def expected_vote(dist: ClassDistribution) -> float:
    """Probability-weighted vote, renormalised over the eligible classes."""
    return float(_expected_rows(dist.probabilities[None, :], dist.votes, dist.eligible())[0])


def _argmax_rows(probs, votes, eligible):
    p = np.where(eligible, probs, -np.inf)
    last = p.shape[1] - 1
    # argmax on the reversed columns finds the highest vote among ties
    idx = last - np.argmax(p[:, ::-1], axis=1)
    rows = np.arange(len(p))
    return votes[idx], probs[rows, idx]


def _expected_rows(probs, votes, eligible):
    masked = probs * eligible
    mass = masked.sum(axis=1)
    if np.any(mass <= 0):
        raise ModelError("distribution has no mass on eligible votes")
    return masked @ votes.astype(np.float64) / mass


def _votes(model):
    return np.arange(model.num_classes)


def predict_distribution_batch(model: TrainedModel, users, items):
    if model.kind not in CLASSIFICATION_KINDS:
        raise ModelError(f"{model.kind} does not produce a class distribution")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_ids(model, users, items)
    probs, _ = forward(model, users, items, training=False)
    return probs


def predict_distribution(model: TrainedModel, user, item) -> ClassDistribution:
    probs = predict_distribution_batch(model, [user], [item])[0]
    return ClassDistribution(probs, _votes(model), min_vote=model.scale[0])


def score_batch(model: TrainedModel, users, items):
    """Ranking scores and, for classification kinds, the argmax reliability.

    Returns ``(scores, reliability)``; ``reliability`` is ``None`` for
    non-classification kinds.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_ids(model, users, items)
    lo, hi = model.scale
    out, _ = forward(model, users, items, training=False)
    kind = model.kind
    if kind in ("deepmf", "vdeepmf"):
        return lo + (hi - lo) * out, None
    if kind == "ncf_regression":
        return np.clip(lo + (hi - lo) * out, lo, hi), None
    if kind == "binary_regression":
        return out, None
    votes = _votes(model)
    eligible = votes >= lo
    top_votes, reliability = _argmax_rows(out, votes, eligible)
    if kind == "ncf_classification":
        return top_votes.astype(np.float64), reliability
    return _expected_rows(out, votes, eligible), reliability


def predict_score(model: TrainedModel, user, item) -> float:
    scores, _ = score_batch(model, [user], [item])
    return float(scores[0])


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: TrainedModel, sink) -> int:
    header = {
        "kind": model.kind,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "latent_dim": model.config.latent_dim,
        "scale": list(model.scale),
        "config": _config_dict(model.config),
        "loss_log": list(model.loss_log),
    }
    return checkpoint.write(sink, header, model.params)


def load_model(source) -> TrainedModel:
    header, blocks = checkpoint.read(source)
    kind = header.get("kind")
    if kind not in MODEL_KINDS:
        raise checkpoint.CheckpointError(f"checkpoint holds {kind!r}, not a recommender model")
    cfg = dict(header["config"])
    for key in ("hidden", "dropout"):
        if cfg.get(key) is not None:
            cfg[key] = tuple(cfg[key])
    return TrainedModel(kind, header["num_users"], header["num_items"], tuple(header["scale"]),
                        NetConfig(**cfg), blocks, list(header["loss_log"]))


def _config_dict(cfg: NetConfig):
    d = asdict(cfg)
    for key in ("hidden", "dropout"):
        if d[key] is not None:
            d[key] = list(d[key])
    return d

