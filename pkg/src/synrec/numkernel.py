"""Dense numerical kernel shared by every model in the package.

Everything here works on float64 numpy arrays. Layers are plain data
(:class:`DenseLayer`); forward passes return an explicit cache object that the
matching backward pass consumes, so no layer carries hidden mutable state.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "relu", "leaky_relu", "sigmoid", "softmax", "softplus")
LOSS_KINDS = ("squared", "categorical_cross_entropy", "binary_cross_entropy")

LEAKY_SLOPE = 0.2
PROB_CLAMP = 1e-12
EMBEDDING_STD = 0.05


class KernelError(ValueError):
    pass


class ShapeError(KernelError):
    def __init__(self, what, expected, got):
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class MissingCacheError(KernelError):
    pass


# --------------------------------------------------------------------------
# random sources


def make_rng(seed, *keys) -> np.random.Generator:
    """PCG64 generator for ``seed``, optionally forked by a path of keys.

    Keys may be ints or strings; strings are hashed with CRC32 so the derived
    stream is stable across interpreter runs.
    """
    spawn_key = tuple(_key_to_int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *keys) -> int:
    """A 63-bit seed derived from ``seed`` and ``keys``."""
    spawn_key = tuple(_key_to_int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=spawn_key)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


# --------------------------------------------------------------------------
# initialisation


def glorot_uniform(fan_in, fan_out, rng) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_init(rows, cols, rng, std=EMBEDDING_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=(rows, cols))


# --------------------------------------------------------------------------
# activations


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(logits):
    """Row-wise softmax with max subtraction. Accepts a vector or a 2-D batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise KernelError("softmax of an empty vector")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def activate(name, z):
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "softmax":
        return softmax(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    raise KernelError(f"unknown activation {name!r}")


def activation_backward(name, z, a, grad):
    """Gradient w.r.t. the pre-activation ``z`` given ``grad`` w.r.t. ``a``."""
    if name == "linear":
        return grad
    if name == "relu":
        return grad * (z > 0)
    if name == "leaky_relu":
        return grad * np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return grad * a * (1.0 - a)
    if name == "softmax":
        # Jacobian-vector product of softmax, row by row
        return a * (grad - np.sum(grad * a, axis=-1, keepdims=True))
    if name == "softplus":
        return grad * sigmoid(z)
    raise KernelError(f"unknown activation {name!r}")


# --------------------------------------------------------------------------
# dense layers


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("dense weights ndim", 2, self.weights.ndim)
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("dense bias length", self.weights.shape[1], self.bias.shape)
        if self.activation not in ACTIVATIONS:
            raise KernelError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, in_width, out_width, activation, rng):
        return cls(glorot_uniform(in_width, out_width, rng), np.zeros(out_width), activation)

    @property
    def in_width(self):
        return self.weights.shape[0]

    @property
    def out_width(self):
        return self.weights.shape[1]


@dataclass
class DenseCache:
    inputs: np.ndarray
    pre: np.ndarray
    out: np.ndarray
    layer: DenseLayer
    vector: bool = False


def dense_forward(inputs, layer: DenseLayer):
    """Compute ``activation(inputs @ W + b)``.

    ``inputs`` is a single vector or a batch with one row per example.
    Returns ``(output, cache)``; pass the cache to :func:`dense_backward`.
    """
    x = np.asarray(inputs, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[None, :]
    if x.shape[1] != layer.in_width:
        raise ShapeError("dense input width", layer.in_width, x.shape[1])
    z = x @ layer.weights + layer.bias
    a = activate(layer.activation, z)
    cache = DenseCache(x, z, a, layer, vector)
    return (a[0] if vector else a), cache


def dense_backward(upstream, cache: DenseCache | None):
    """Return ``(input_grad, weight_grad, bias_grad)`` for a cached forward."""
    if cache is None:
        raise MissingCacheError("dense_backward called without a forward cache")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.vector and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.out.shape:
        raise ShapeError("dense upstream gradient shape", cache.out.shape, g.shape)
    gz = activation_backward(cache.layer.activation, cache.pre, cache.out, g)
    weight_grad = cache.inputs.T @ gz
    bias_grad = gz.sum(axis=0)
    input_grad = gz @ cache.layer.weights.T
    if cache.vector:
        input_grad = input_grad[0]
    return input_grad, weight_grad, bias_grad


def dropout_mask(shape, rate, rng) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise KernelError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


# --------------------------------------------------------------------------
# losses


def loss_eval(kind, prediction, target):
    """Summed loss over all elements and its gradient w.r.t. ``prediction``.

    ``categorical_cross_entropy`` expects probability rows and matching target
    rows (one-hot or soft labels).
    """
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"{kind} loss target shape", p.shape, t.shape)
    if kind == "squared":
        diff = p - t
        return float(np.sum(diff * diff)), 2.0 * diff
    if kind == "categorical_cross_entropy":
        pc = np.maximum(p, PROB_CLAMP)
        value = -np.sum(t * np.log(pc))
        # the clamped region is flat, so its gradient is zero
        return float(value), np.where((t != 0) & (p >= PROB_CLAMP), -t / pc, 0.0)
    if kind == "binary_cross_entropy":
        pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        value = -np.sum(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
        inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)
        return float(value), np.where(inside, -t / pc + (1.0 - t) / (1.0 - pc), 0.0)
    raise KernelError(f"unknown loss kind {kind!r}")


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise KernelError(f"gradient keys {sorted(grads)} do not match params {sorted(params)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"adam gradient for {name!r}", params[name].shape, g.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        elif state.m[name].shape != g.shape:
            raise ShapeError(f"adam moment for {name!r}", state.m[name].shape, g.shape)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


# --------------------------------------------------------------------------
# stochastic sampling


def gaussian_reparameterize(mean, variance, rng=None, noise=None):
    """Draw ``mean + sqrt(variance) * eps`` with ``eps ~ N(0, I)``.

    Pass ``noise`` to fix ``eps`` (used to freeze sampling during gradient
    checks). Returns ``(sample, eps)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if mean.shape != variance.shape:
        raise ShapeError("reparameterize variance shape", mean.shape, variance.shape)
    if np.any(variance < 0):
        raise KernelError("negative variance")
    if noise is None:
        if rng is None:
            raise KernelError("gaussian_reparameterize needs an rng or fixed noise")
        noise = rng.standard_normal(mean.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != mean.shape:
            raise ShapeError("reparameterize noise shape", mean.shape, noise.shape)
    return mean + np.sqrt(variance) * noise, noise


def reparameterize_backward(grad, variance, noise):
    """Gradients w.r.t. mean and variance of :func:`gaussian_reparameterize`.

    The variance gradient is taken as zero where the variance is exactly zero.
    """
    std = np.sqrt(variance)
    safe = np.where(std > 0, std, 1.0)
    grad_var = np.where(std > 0, grad * noise / (2.0 * safe), 0.0)
    return grad, grad_var


# --------------------------------------------------------------------------
# gradient checking


KINKED = ("relu", "leaky_relu")


def kink_pattern(caches) -> np.ndarray:
    """Sign pattern of every rectifier pre-activation in ``caches``.

    Two parameter points with equal patterns lie in the same linear piece of
    all rectifiers, so a finite difference between them is meaningful.
    """
    parts = [(c.pre > 0).ravel() for c in caches if c.layer.activation in KINKED]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def grad_check(loss_fn, params: dict, rng=None, step=1e-4, max_coords=None, floor=1e-6, report=None,
               value_fn=None):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``. Parameters are perturbed in place and restored. When
    ``max_coords`` is set, that many coordinates per parameter block are
    sampled with ``rng``; otherwise every coordinate is checked. The relative
    error is ``|a - n| / max(|a|, |n|, floor)``.

    ``loss_fn`` may return a third value, a rectifier sign pattern (see
    :func:`kink_pattern`). A coordinate whose perturbed points change that
    pattern straddles a kink where the loss has no derivative; it is skipped.
    If ``report`` is a dict it receives the ``checked`` and ``skipped`` counts.
    ``value_fn``, if given, is used at the perturbed points instead of
    ``loss_fn``; it returns ``(loss,)`` or ``(loss, pattern)`` and can skip the
    backward pass.
    """
    def probe(p):
        if value_fn is not None:
            out = value_fn(p)
            return (out[0], out[1] if len(out) > 1 else None)
        out = loss_fn(p)
        return (out[0], out[2] if len(out) > 2 else None)

    base = loss_fn(params)
    loss, grads = base[0], base[1]
    pattern = base[2] if len(base) > 2 else None
    if not np.isfinite(loss):
        raise KernelError(f"loss is not finite at the check point: {loss}")
    worst = 0.0
    checked = skipped = 0
    for name in sorted(params):
        value = params[name]
        flat = value.reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                raise KernelError("max_coords needs an rng")
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            up = probe(params)
            flat[idx] = orig - step
            down = probe(params)
            flat[idx] = orig
            if not (np.isfinite(up[0]) and np.isfinite(down[0])):
                raise KernelError(f"loss became non-finite perturbing {name}[{idx}]")
            if pattern is not None and not (np.array_equal(up[1], pattern) and np.array_equal(down[1], pattern)):
                skipped += 1
                continue
            checked += 1
            numeric = (up[0] - down[0]) / (2.0 * step)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    if report is not None:
        report["checked"], report["skipped"] = checked, skipped
    return worst
