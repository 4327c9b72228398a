"""Small numpy neural-network toolkit with hand-written backpropagation.

Everything runs in float64. Batches are row-major: ``x`` has shape
``(batch, n_in)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG2 = np.log(2.0)
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# name -> (f, f' expressed through (pre, post))
ACTIVATIONS = {
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(z.dtype)),
    "softplus": (softplus, lambda z, a: sigmoid(z)),
}
ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


class ShapeError(ValueError):
    pass


class Mlp:
    """Fully connected network; ``activations[i]`` follows layer ``i``."""

    def __init__(self, sizes, activations, rng=None, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.activations = tuple(activations)
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            self.params = []
            for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
                bound = 1.0 / np.sqrt(n_in)
                self.params.append(rng.uniform(-bound, bound, (n_in, n_out)))
                self.params.append(rng.uniform(-bound, bound, n_out))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.activations, params=self.params)

    def forward(self, x, return_cache=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"expected input dimension {self.sizes[0]}, got {x.shape[-1]}")
        cache = [x]
        h = x
        for i, act in enumerate(self.activations):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            h = ACTIVATIONS[act][0](z)
            cache.append((z, h))
        return (h, cache) if return_cache else h

    __call__ = forward

    def backward(self, cache, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input."""
        grads = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            z, a = cache[i + 1]
            g = g * ACTIVATIONS[self.activations[i]][1](z, a)
            h_prev = cache[i] if i == 0 else cache[i][1]
            grads[2 * i] = h_prev.T @ g if h_prev.ndim > 1 else np.outer(h_prev, g)
            grads[2 * i + 1] = g.sum(axis=0) if g.ndim > 1 else g.copy()
            g = g @ self.params[2 * i].T
        return grads, g


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, x, upstream_grad):
    _, cache = net.forward(x, return_cache=True)
    return net.backward(cache, upstream_grad)


@dataclass
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        """Update ``params`` in place."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for p, g, m in zip(params, grads, self.m):
            if p.shape != np.shape(g) or m.shape != p.shape:
                raise ShapeError("parameter/gradient shape mismatch")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def optim_step(state: Adam, params, grads):
    return state.step(params, grads)


@dataclass(frozen=True)
class SquashedGaussianHead:
    """Maps raw network outputs (mean, log-std pre-activation) to bounded actions.

    The log-std is squashed smoothly into ``[log_std_min, log_std_max]``.
    """
    scale: float = 30.0
    offset: float = 0.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def log_std(self, raw):
        lo, hi = self.log_std_min, self.log_std_max
        return lo + 0.5 * (hi - lo) * (np.tanh(raw) + 1.0)

    def dlog_std(self, raw):
        t = np.tanh(raw)
        return 0.5 * (self.log_std_max - self.log_std_min) * (1.0 - t * t)

    def squash(self, u):
        return self.offset + self.scale * np.tanh(u)

    def log_prob_pre(self, u, mean, log_std):
        """Density of the squashed action, evaluated at pre-squash value ``u``."""
        eps = (u - mean) / np.exp(log_std)
        log_jac = 2.0 * (LOG2 - u - softplus(-2.0 * u))  # log(1 - tanh(u)^2)
        return -0.5 * eps * eps - log_std - LOG_SQRT_2PI - np.log(self.scale) - log_jac

    def log_prob(self, action, mean, log_std):
        y = np.clip((np.asarray(action) - self.offset) / self.scale, -1 + 1e-12, 1 - 1e-12)
        return self.log_prob_pre(np.arctanh(y), mean, log_std)

    def sample(self, mean, raw_log_std, eps):
        """Reparameterised sample. Returns (action, log_prob, u, log_std)."""
        log_std = self.log_std(raw_log_std)
        u = mean + np.exp(log_std) * eps
        return self.squash(u), self.log_prob_pre(u, mean, log_std), u, log_std

    def sample_grads(self, u, eps, log_std, raw_log_std, g_action, g_logp):
        """Backpropagate ``g_action * action + g_logp * log_prob`` to (mean, raw log-std)."""
        t = np.tanh(u)
        sig = np.exp(log_std)
        da_du = self.scale * (1.0 - t * t)
        # d log_prob / du at fixed eps comes only from the tanh Jacobian term
        dlp_du = 2.0 * t
        g_u = g_action * da_du + g_logp * dlp_du
        g_mean = g_u
        g_log_std = g_u * sig * eps - g_logp
        return g_mean, g_log_std * self.dlog_std(raw_log_std)


def sample_action(head: SquashedGaussianHead, mean, raw_log_std, rng):
    """Draw ``(action, log_prob)`` from the squashed Gaussian."""
    eps = rng.standard_normal(np.shape(mean))
    a, lp, _, _ = head.sample(mean, raw_log_std, eps)
    return a, lp


def numerical_grad(f, params, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a), np.asarray(n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# --- checkpoints --------------------------------------------------------

NET_MAGIC = b"MNET"
NET_VERSION = 1


def pack_mlp(net: Mlp) -> bytes:
    parts = [struct.pack("<I", net.n_layers + 1)]
    parts.append(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
    parts.append(struct.pack(f"<{net.n_layers}I", *(ACT_CODES[a] for a in net.activations)))
    for p in net.params:
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def unpack_mlp(buf: bytes, offset: int = 0):
    (n_sizes,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    sizes = struct.unpack_from(f"<{n_sizes}I", buf, offset)
    offset += 4 * n_sizes
    codes = struct.unpack_from(f"<{n_sizes - 1}I", buf, offset)
    offset += 4 * (n_sizes - 1)
    names = list(ACTIVATIONS)
    params = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((n_in, n_out), (n_out,)):
            count = int(np.prod(shape))
            params.append(np.frombuffer(buf, "<f8", count, offset).reshape(shape).copy())
            offset += 8 * count
    return Mlp(sizes, [names[c] for c in codes], params=params), offset


def save_mlp(net: Mlp, path, extra: np.ndarray | None = None) -> None:
    """Write ``MNET`` checkpoint: header, architecture, f64 weights, optional f64 trailer."""
    extra = np.zeros(0) if extra is None else np.asarray(extra, dtype="<f8")
    body = pack_mlp(net)
    data = (NET_MAGIC + struct.pack("<I", NET_VERSION) + body
            + struct.pack("<I", extra.size) + extra.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_mlp(path):
    buf = Path(path).read_bytes()
    if buf[:4] != NET_MAGIC:
        raise OSError(f"{path}: not an MNET checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != NET_VERSION:
        raise OSError(f"{path}: unsupported MNET version {version}")
    net, off = unpack_mlp(buf, 8)
    (n_extra,) = struct.unpack_from("<I", buf, off)
    extra = np.frombuffer(buf, "<f8", n_extra, off + 4).copy()
    return net, extra
