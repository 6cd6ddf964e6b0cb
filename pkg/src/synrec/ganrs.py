"""GAN-based synthetic rating datasets.

Pipeline: a DeepMF model embeds the source dataset; every rating becomes a
latent sample ``user_vec || item_vec || normalised_rating``; a small GAN
learns that sample distribution; new samples are drawn from the generator and
quantised into fake user / item identities with k-means.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import models as M
from .data import RatingDataset
from .numkernel import (
    PROB_CLAMP,
    AdamState,
    DenseLayer,
    adam_step,
    dense_backward,
    dense_forward,
    derive_seed,
    make_rng,
    sigmoid,
)

BUNDLE_KIND = "GANRS"


class GanError(ValueError):
    pass


@dataclass
class EmbeddingSpace:
    users: np.ndarray
    items: np.ndarray
    scale: tuple

    @property
    def latent_dim(self):
        return self.users.shape[1]


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 16
    noise_dim: int = 32
    noise_sigma: float = 2.5
    generator_hidden: tuple = (64, 64)
    discriminator_hidden: tuple = (64, 32)
    learning_rate: float = 2e-4
    beta1: float = 0.5
    epochs: int = 30
    batch_size: int = 256
    generator_loss: str = "non_saturating"
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise GanError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if self.generator_loss not in ("non_saturating", "minimax"):
            raise GanError(f"unknown generator loss {self.generator_loss!r}")

    @property
    def sample_width(self):
        return 2 * self.latent_dim + 1


@dataclass
class GanBundle:
    config: GanConfig
    generator: dict
    discriminator: dict
    source_scale: tuple = (1, 5)
    log: dict = field(default_factory=lambda: {"d_loss": [], "g_loss": [], "d_accuracy": []})
    holdout_accuracy: float | None = None
    provenance: dict = field(default_factory=dict)  # e.g. source dataset name and seeds

    @property
    def noise_dim(self):
        return self.config.noise_dim

    @property
    def noise_sigma(self):
        return self.config.noise_sigma

    def generator_layers(self):
        return _stack_layers(self.generator, len(self.config.generator_hidden), "linear")

    def discriminator_layers(self):
        return _stack_layers(self.discriminator, len(self.config.discriminator_hidden), "sigmoid")


@dataclass(frozen=True)
class SynthesisRequest:
    num_users: int
    num_items: int
    num_samples: int
    scale: tuple | None = None
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        for what in ("num_users", "num_items", "num_samples"):
            if getattr(self, what) <= 0:
                raise GanError(f"{what} must be positive, got {getattr(self, what)}")


def _stack_layers(params, n_hidden, out_activation):
    names = [f"h{n + 1}" for n in range(n_hidden)] + ["out"]
    acts = ["leaky_relu"] * n_hidden + [out_activation]
    return [DenseLayer(params[f"{n}.W"], params[f"{n}.b"], a) for n, a in zip(names, acts)]


def _init_stack(widths, rng):
    params = {}
    names = [f"h{n + 1}" for n in range(len(widths) - 2)] + ["out"]
    for name, w_in, w_out in zip(names, widths[:-1], widths[1:]):
        layer = DenseLayer.init(w_in, w_out, "linear", rng)
        params[f"{name}.W"], params[f"{name}.b"] = layer.weights, layer.bias
    return params


def init_bundle(config: GanConfig, rng, source_scale=(1, 5)) -> GanBundle:
    width = config.sample_width
    gen = _init_stack([config.noise_dim, *config.generator_hidden, width], rng)
    disc = _init_stack([width, *config.discriminator_hidden, 1], rng)
    return GanBundle(config, gen, disc, tuple(source_scale))


# --------------------------------------------------------------------------
# embedding stage


def embed_dataset(ds: RatingDataset, latent_dim=16, rng=None, config: M.NetConfig | None = None) -> EmbeddingSpace:
    """Train DeepMF on ``ds`` and return its user and item embedding tables."""
    if len(ds) == 0:
        raise GanError("cannot embed an empty dataset")
    if rng is None:
        raise GanError("embed_dataset needs an rng")
    cfg = replace(config or M.NetConfig(), latent_dim=latent_dim)
    model = M.build("deepmf", ds.num_users, ds.num_items, cfg, rng, scale=ds.scale)
    model = M.train(model, ds, rng)
    return EmbeddingSpace(model.P.copy(), model.Q.copy(), ds.scale)


def real_sample_bank(space: EmbeddingSpace, ds: RatingDataset) -> np.ndarray:
    """One latent sample row per rating of ``ds``."""
    if len(ds) and (ds.users.max() >= len(space.users) or ds.items.max() >= len(space.items)):
        raise GanError("dataset ids exceed the embedding space")
    lo, hi = ds.scale
    rating = (ds.ratings - lo) / max(hi - lo, 1)
    return np.hstack([space.users[ds.users], space.items[ds.items], rating[:, None].astype(np.float64)])


def sample_parts(samples, latent_dim):
    """Split latent samples into ``(user_part, item_part, rating_part)``."""
    K = latent_dim
    return samples[:, :K], samples[:, K:2 * K], samples[:, 2 * K]


# --------------------------------------------------------------------------
# losses


def _check_probs(values, what):
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise GanError(f"empty {what} batch")
    return values


def discriminator_loss(d_real, d_fake) -> float:
    """``-(mean log D(x) + mean log(1 - D(G(z))))``."""
    return _discriminator_loss_grad(d_real, d_fake)[0]


def generator_loss(d_fake, form="non_saturating") -> float:
    """``-mean log D(G(z))``, or ``mean log(1 - D(G(z)))`` with ``form="minimax"``."""
    return _generator_loss_grad(d_fake, form)[0]


def _discriminator_loss_grad(d_real, d_fake):
    d_real = _check_probs(d_real, "real")
    d_fake = _check_probs(d_fake, "fake")
    pr = np.clip(d_real, PROB_CLAMP, 1.0)
    qf = np.clip(1.0 - d_fake, PROB_CLAMP, 1.0)
    value = -(np.mean(np.log(pr)) + np.mean(np.log(qf)))
    # clamped entries sit on a flat piece of the loss and get no gradient
    grad_real = np.where(d_real >= PROB_CLAMP, -1.0 / (len(d_real) * pr), 0.0)
    grad_fake = np.where(1.0 - d_fake >= PROB_CLAMP, 1.0 / (len(d_fake) * qf), 0.0)
    return float(value), grad_real, grad_fake


def _generator_loss_grad(d_fake, form="non_saturating"):
    d_fake = _check_probs(d_fake, "fake")
    n = len(d_fake)
    if form == "non_saturating":
        p = np.clip(d_fake, PROB_CLAMP, 1.0)
        return float(-np.mean(np.log(p))), np.where(d_fake >= PROB_CLAMP, -1.0 / (n * p), 0.0)
    if form == "minimax":
        q = np.clip(1.0 - d_fake, PROB_CLAMP, 1.0)
        return float(np.mean(np.log(q))), np.where(1.0 - d_fake >= PROB_CLAMP, -1.0 / (n * q), 0.0)
    raise GanError(f"unknown generator loss {form!r}")


# --------------------------------------------------------------------------
# networks


def _stack_forward(layers, x):
    caches = []
    for layer in layers:
        x, c = dense_forward(x, layer)
        caches.append(c)
    return x, caches


def _stack_backward(caches, grad):
    grads = {}
    names = [f"h{n + 1}" for n in range(len(caches) - 1)] + ["out"]
    for name, cache in zip(reversed(names), reversed(caches)):
        grad, gw, gb = dense_backward(grad, cache)
        grads[f"{name}.W"], grads[f"{name}.b"] = gw, gb
    return grad, grads


def generator_forward(bundle: GanBundle, z):
    """Generator output: linear embedding parts, sigmoid rating part."""
    raw, caches = _stack_forward(bundle.generator_layers(), z)
    out = raw.copy()
    out[:, -1] = sigmoid(raw[:, -1])
    return out, (caches, out)


def generator_backward(cache, grad_out):
    caches, out = cache
    g = grad_out.copy()
    s = out[:, -1]
    g[:, -1] *= s * (1.0 - s)
    return _stack_backward(caches, g)


def discriminator_forward(bundle: GanBundle, x):
    out, caches = _stack_forward(bundle.discriminator_layers(), x)
    return out[:, 0], caches


def discriminator_backward(caches, grad_out):
    return _stack_backward(caches, grad_out[:, None])


def draw_noise(bundle: GanBundle, count, rng):
    return rng.normal(0.0, bundle.config.noise_sigma, size=(count, bundle.config.noise_dim))


def gan_losses(bundle: GanBundle, real, z):
    """Discriminator and generator losses for a real batch and a noise batch."""
    fake, _ = generator_forward(bundle, z)
    d_real, _ = discriminator_forward(bundle, real)
    d_fake, _ = discriminator_forward(bundle, fake)
    return discriminator_loss(d_real, d_fake), generator_loss(d_fake, bundle.config.generator_loss)


def discriminator_step_grads(bundle: GanBundle, real, fake):
    d_real, c_real = discriminator_forward(bundle, real)
    d_fake, c_fake = discriminator_forward(bundle, fake)
    loss, g_real, g_fake = _discriminator_loss_grad(d_real, d_fake)
    _, grads_r = discriminator_backward(c_real, g_real)
    _, grads_f = discriminator_backward(c_fake, g_fake)
    grads = {k: grads_r[k] + grads_f[k] for k in grads_r}
    return loss, grads, d_real, d_fake


def generator_step_grads(bundle: GanBundle, z):
    fake, g_cache = generator_forward(bundle, z)
    d_fake, d_cache = discriminator_forward(bundle, fake)
    loss, g = _generator_loss_grad(d_fake, bundle.config.generator_loss)
    grad_fake, _ = discriminator_backward(d_cache, g)
    _, grads = generator_backward(g_cache, grad_fake)
    return loss, grads


def discriminator_accuracy(bundle: GanBundle, real, rng):
    fake = generate(bundle, len(real), rng)
    d_real, _ = discriminator_forward(bundle, real)
    d_fake, _ = discriminator_forward(bundle, fake)
    return float((np.sum(d_real > 0.5) + np.sum(d_fake < 0.5)) / (len(real) + len(fake)))


def train_gan(bank, config: GanConfig = GanConfig(), epochs=None, batch_size=None, rng=None,
              source_scale=(1, 5)) -> GanBundle:
    """Alternating GAN training: one discriminator step, then one generator step.

    ``epochs`` and ``batch_size`` default to the values in ``config``.
    """
    epochs = config.epochs if epochs is None else epochs
    batch_size = config.batch_size if batch_size is None else batch_size
    bank = np.asarray(bank, dtype=np.float64)
    if rng is None:
        raise GanError("train_gan needs an rng")
    if bank.ndim != 2 or bank.shape[1] != config.sample_width:
        raise GanError(f"bank rows must have width {config.sample_width}, got shape {bank.shape}")
    n = len(bank)
    if batch_size > n:
        raise GanError(f"batch size {batch_size} exceeds the {n} samples in the bank")
    bundle = init_bundle(config, rng, source_scale)
    n_hold = int(n * config.holdout_fraction)
    if n - n_hold < batch_size:
        n_hold = 0
    perm = rng.permutation(n)
    held, train_rows = bank[perm[:n_hold]], bank[perm[n_hold:]]
    hyper = dict(learning_rate=config.learning_rate, beta1=config.beta1)
    d_state = AdamState.for_params(bundle.discriminator, **hyper)
    g_state = AdamState.for_params(bundle.generator, **hyper)
    m = len(train_rows)
    for _ in range(epochs):
        order = rng.permutation(m)
        d_losses, g_losses, correct, seen = [], [], 0, 0
        for start in range(0, m - batch_size + 1, batch_size):
            real = train_rows[order[start:start + batch_size]]
            fake, _ = generator_forward(bundle, draw_noise(bundle, batch_size, rng))
            d_loss, d_grads, d_real, d_fake = discriminator_step_grads(bundle, real, fake)
            adam_step(bundle.discriminator, d_grads, d_state)
            g_loss, g_grads = generator_step_grads(bundle, draw_noise(bundle, batch_size, rng))
            adam_step(bundle.generator, g_grads, g_state)
            d_losses.append(d_loss)
            g_losses.append(g_loss)
            correct += int(np.sum(d_real > 0.5) + np.sum(d_fake < 0.5))
            seen += 2 * batch_size
        bundle.log["d_loss"].append(float(np.mean(d_losses)))
        bundle.log["g_loss"].append(float(np.mean(g_losses)))
        bundle.log["d_accuracy"].append(correct / seen)
    check = held if n_hold else train_rows
    bundle.holdout_accuracy = discriminator_accuracy(bundle, check, rng)
    return bundle


def generate(bundle: GanBundle, count, rng) -> np.ndarray:
    """``count`` latent samples from noise ``z ~ N(0, noise_sigma^2 I)``."""
    if count <= 0:
        raise GanError(f"count must be positive, got {count}")
    out = np.empty((count, bundle.config.sample_width))
    chunk = 65536
    for start in range(0, count, chunk):
        stop = min(start + chunk, count)
        out[start:stop], _ = generator_forward(bundle, draw_noise(bundle, stop - start, rng))
    return out


# --------------------------------------------------------------------------
# k-means quantisation


def _nearest(X, centroids):
    """Nearest centroid index and squared distance for every row of ``X``."""
    n, k = len(X), len(centroids)
    assign = np.empty(n, dtype=np.int64)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    c_t = np.ascontiguousarray(centroids.T)
    # small blocks keep the n x k distance slab in cache
    chunk = max(1, 262144 // k)
    for start in range(0, n, chunk):
        d2 = X[start:start + chunk] @ c_t
        d2 *= -2.0
        d2 += c_sq
        assign[start:start + chunk] = np.argmin(d2, axis=1)
    diff = X - centroids[assign]
    return assign, np.einsum("ij,ij->i", diff, diff)


def _kmeans_pp(X, k, rng):
    n = len(X)
    x_sq = np.einsum("ij,ij->i", X, X)

    def dist_to(c):
        return np.maximum(x_sq - 2.0 * (X @ c) + c @ c, 0.0)

    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = dist_to(centers[0])
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[j] = X[idx]
        np.minimum(d2, dist_to(centers[j]), out=d2)
    return centers


def kmeans(points, k, seed=0, max_iters=100, history=None):
    """Lloyd iterations from k-means++ seeding.

    Returns ``(assignments, centroids)``; the assignments are the nearest
    centroids of the returned centroids. Stops when assignments repeat or after
    ``max_iters`` assignment passes. Clusters emptied by an update are moved to
    the points farthest from their centroids. If ``history`` is a list, the
    inertia of each assignment pass is appended to it.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if k < 1:
        raise GanError(f"k must be positive, got {k}")
    if n < k:
        raise GanError(f"{n} points cannot fill {k} clusters")
    rng = make_rng(seed, "kmeans")
    centroids = _kmeans_pp(X, k, rng)
    prev = None
    for it in range(max_iters):
        assign, d2 = _nearest(X, centroids)
        if history is not None:
            history.append(float(d2.sum()))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        if it == max_iters - 1:
            break
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=X[:, d], minlength=k) for d in range(X.shape[1])], axis=1)
        filled = counts > 0
        centroids = centroids.copy()
        centroids[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            diff = X - centroids[assign]
            dist = np.einsum("ij,ij->i", diff, diff)
            far = np.argsort(-dist, kind="stable")[:len(empty)]
            centroids[empty] = X[far]
    return assign, centroids


# --------------------------------------------------------------------------
# synthesis


def ratings_from_parts(rating_part, scale):
    lo, hi = scale
    raw = np.floor(lo + np.asarray(rating_part) * (hi - lo) + 0.5)
    return np.clip(raw, lo, hi).astype(np.int64)


def synthesize(bundle: GanBundle, req: SynthesisRequest) -> RatingDataset:
    """Generate a discrete synthetic dataset of at most ``num_samples`` triples."""
    S = req.num_samples
    if S < req.num_users or S < req.num_items:
        raise GanError(f"{S} samples cannot populate {req.num_users} users and {req.num_items} items")
    scale = tuple(req.scale) if req.scale is not None else tuple(bundle.source_scale)
    samples = generate(bundle, S, make_rng(req.seed, "generate"))
    user_part, item_part, rating_part = sample_parts(samples, bundle.config.latent_dim)
    users, _ = kmeans(user_part, req.num_users, derive_seed(req.seed, "users"))
    items, _ = kmeans(item_part, req.num_items, derive_seed(req.seed, "items"))
    ratings = ratings_from_parts(rating_part, scale)
    keys = users * req.num_items + items
    _, first = np.unique(keys, return_index=True)
    keep = np.sort(first)
    # clusters left empty by k-means get no id, so ids stay dense
    user_ids, users = np.unique(users[keep], return_inverse=True)
    item_ids, items = np.unique(items[keep], return_inverse=True)
    name = req.name or f"ganrs-u{req.num_users}-i{req.num_items}-s{S}"
    ds = RatingDataset(users, items, ratings[keep], len(user_ids), len(item_ids), scale, name)
    return ds.validate()


def write_metadata(path, **fields) -> None:
    """Plain ``key=value`` sidecar, one field per line, keys sorted."""
    lines = [f"{k}={fields[k]}" for k in sorted(fields)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metadata(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


# --------------------------------------------------------------------------
# checkpoints


def save_bundle(bundle: GanBundle, sink) -> int:
    cfg = asdict(bundle.config)
    cfg["generator_hidden"] = list(cfg["generator_hidden"])
    cfg["discriminator_hidden"] = list(cfg["discriminator_hidden"])
    header = {
        "kind": BUNDLE_KIND,
        "latent_dim": bundle.config.latent_dim,
        "scale": list(bundle.source_scale),
        "config": cfg,
        "log": bundle.log,
        "holdout_accuracy": bundle.holdout_accuracy,
        "provenance": bundle.provenance,
    }
    blocks = {f"G/{k}": v for k, v in bundle.generator.items()}
    blocks.update({f"D/{k}": v for k, v in bundle.discriminator.items()})
    return checkpoint.write(sink, header, blocks)


def load_bundle(source) -> GanBundle:
    header, blocks = checkpoint.read(source)
    if header.get("kind") != BUNDLE_KIND:
        raise checkpoint.CheckpointError(f"checkpoint holds {header.get('kind')!r}, not {BUNDLE_KIND}")
    cfg = dict(header["config"])
    cfg["generator_hidden"] = tuple(cfg["generator_hidden"])
    cfg["discriminator_hidden"] = tuple(cfg["discriminator_hidden"])
    gen = {k[2:]: v for k, v in blocks.items() if k.startswith("G/")}
    disc = {k[2:]: v for k, v in blocks.items() if k.startswith("D/")}
    return GanBundle(GanConfig(**cfg), gen, disc, tuple(header["scale"]), header["log"],
                     header["holdout_accuracy"], header.get("provenance", {}))

