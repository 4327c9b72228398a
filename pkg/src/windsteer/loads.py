"""Blade-root flapwise fatigue loads.

Per-turbine damage-equivalent loads (DEL, kN m) come from a small neural
surrogate fed with 10-minute averaged sector inflow features and yaw. The
surrogate is fitted to an analytic DEL model; rainflow counting is provided
for offline checks on load time series.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from windsteer.nncore import Adam, Mlp, softplus, sigmoid

N_FEATURES = 9  # 4 sector speeds, 4 sector TIs, yaw
FEATURE_NAMES = ("ws_left", "ws_right", "ws_top", "ws_bottom",
                 "ti_left", "ti_right", "ti_top", "ti_bottom", "yaw")
WINDOW_SECONDS = 600.0


@dataclass(frozen=True)
class OracleCoefficients:
    c0: float = 120.0
    e1: float = 1.4
    a1: float = 8.0
    a2: float = 3.0
    a3: float = 0.6
    a4: float = 0.25


def del_oracle(features, coef: OracleCoefficients = OracleCoefficients()):
    """Analytic flapwise DEL (kN m) for feature rows ``(..., 9)``.

    ``c0 U^e1 (1 + a1 TI + a2 |u_left - u_right| / U + a3 (yaw/30)^2 + a4 yaw/30)``
    with ``U`` and ``TI`` the sector means. The linear yaw term makes positive
    and negative offsets load the blades differently.
    """
    f = np.asarray(features, dtype=np.float64)
    u = f[..., 0:4].mean(axis=-1)
    ti = f[..., 4:8].mean(axis=-1)
    g = f[..., 8] / 30.0
    with np.errstate(divide="ignore", invalid="ignore"):
        asym = np.where(u > 0, np.abs(f[..., 0] - f[..., 1]) / u, 0.0)
    shape = 1.0 + coef.a1 * ti + coef.a2 * asym + coef.a3 * g * g + coef.a4 * g
    return coef.c0 * np.maximum(u, 0.0) ** coef.e1 * shape


# --- sliding window ------------------------------------------------------

class DelWindow:
    """10-minute sliding averages of sector statistics for every turbine of one farm.

    Each entry stores, per turbine and sector, the mean and mean-square of the
    15 sensor speeds, plus the yaw. Window TI of a sector is the standard
    deviation of all its sensor samples across the window divided by their
    mean, so it captures both temporal and within-sector variation.
    """

    def __init__(self, n_turbines: int, capacity: int = 60):
        self.n_turbines = n_turbines
        self.capacity = capacity
        self._buf = np.zeros((capacity, n_turbines, 9))
        self._count = 0
        self._head = 0

    def clear(self):
        self._buf[:] = 0.0
        self._count = 0
        self._head = 0

    def __len__(self):
        return self._count

    def push(self, speeds, yaw):
        """Add one snapshot; ``speeds`` has shape (n_turbines, 4, 15)."""
        row = self._buf[self._head]
        row[:, 0:4] = speeds.mean(axis=2)
        row[:, 4:8] = (speeds * speeds).mean(axis=2)
        row[:, 8] = yaw
        self._head = (self._head + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)

    def entries(self) -> np.ndarray:
        """Stored entries in chronological order."""
        if self._count < self.capacity:
            return self._buf[: self._count]
        return np.roll(self._buf, -self._head, axis=0)

    def features(self) -> np.ndarray:
        """Feature rows, shape (n_turbines, 9)."""
        if self._count == 0:
            raise ValueError("window is empty")
        return window_features(self.entries())


def window_features(entries) -> np.ndarray:
    """Features from stacked window entries of shape (steps, n_turbines, 9)."""
    mean = np.asarray(entries).mean(axis=0)
    u = mean[:, 0:4]
    var = np.maximum(mean[:, 4:8] - u * u, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ti = np.where(u > 0, np.sqrt(var) / u, 0.0)
    return np.concatenate([u, ti, mean[:, 8:9]], axis=1)


def constraint_delta(del_agent, del_baseline) -> float:
    """Max-to-max load increase: ``max(DEL_agent) / max(DEL_baseline) - 1``."""
    return float(np.max(del_agent) / np.max(del_baseline) - 1.0)


# --- surrogate -----------------------------------------------------------

SURROGATE_MAGIC = b"DSUR"
SURROGATE_VERSION = 1


@dataclass
class SurrogateNet:
    net: Mlp
    in_mean: np.ndarray
    in_std: np.ndarray
    out_scale: float

    def __call__(self, features):
        return self.predict(features)

    def predict(self, features):
        f = np.asarray(features, dtype=np.float64)
        z = self.net.forward((f - self.in_mean) / self.in_std)
        return self.out_scale * softplus(z[..., 0])

    def forward_with_cache(self, features):
        f = np.asarray(features, dtype=np.float64)
        z, cache = self.net.forward((f - self.in_mean) / self.in_std, return_cache=True)
        return self.out_scale * softplus(z[..., 0]), z, cache

    def grads(self, features, upstream):
        """Parameter gradients of ``sum(upstream * predict(features))``."""
        _, z, cache = self.forward_with_cache(features)
        g = (np.asarray(upstream) * self.out_scale * sigmoid(z[..., 0]))[..., None]
        grads, g_in = self.net.backward(cache, g)
        return grads, g_in / self.in_std

    def save(self, path):
        net = self.net
        parts = [SURROGATE_MAGIC, struct.pack("<II", SURROGATE_VERSION, len(net.sizes)),
                 struct.pack(f"<{len(net.sizes)}I", *net.sizes),
                 np.asarray(self.in_mean, "<f8").tobytes(),
                 np.asarray(self.in_std, "<f8").tobytes(),
                 struct.pack("<d", self.out_scale)]
        for p in net.params:
            parts.append(np.ascontiguousarray(p, "<f8").tobytes())
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "SurrogateNet":
        buf = Path(path).read_bytes()
        if buf[:4] != SURROGATE_MAGIC:
            raise OSError(f"{path}: not a DSUR surrogate checkpoint")
        version, n_sizes = struct.unpack_from("<II", buf, 4)
        if version != SURROGATE_VERSION:
            raise OSError(f"{path}: unsupported surrogate version {version}")
        off = 12
        sizes = struct.unpack_from(f"<{n_sizes}I", buf, off)
        off += 4 * n_sizes
        n_in = sizes[0]
        in_mean = np.frombuffer(buf, "<f8", n_in, off).copy()
        off += 8 * n_in
        in_std = np.frombuffer(buf, "<f8", n_in, off).copy()
        off += 8 * n_in
        (out_scale,) = struct.unpack_from("<d", buf, off)
        off += 8
        params = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            for shape in ((a, b), (b,)):
                count = int(np.prod(shape))
                params.append(np.frombuffer(buf, "<f8", count, off).reshape(shape).copy())
                off += 8 * count
        acts = ["tanh"] * (len(sizes) - 2) + ["linear"]
        return cls(Mlp(sizes, acts, params=params), in_mean, in_std, out_scale)


@dataclass(frozen=True)
class SampleSpec:
    """Ranges for oracle-labelled training data."""
    ws: tuple = (3.0, 16.0)
    ti: tuple = (0.01, 0.25)
    yaw: tuple = (-30.0, 30.0)
    asymmetry: tuple = (0.0, 0.6)
    shear: tuple = (-0.2, 0.2)  # (top - bottom) / U
    ti_spread: tuple = (-0.3, 0.3)  # relative sector TI variation

    def covers(self, other: "SampleSpec") -> bool:
        pairs = [(self.ws, other.ws), (self.ti, other.ti), (self.yaw, other.yaw),
                 (self.asymmetry, other.asymmetry)]
        return all(a[0] <= b[0] and a[1] >= b[1] for a, b in pairs)


MINIMUM_SAMPLE_SPEC = SampleSpec(ws=(4.0, 16.0), ti=(0.02, 0.18), asymmetry=(0.0, 0.3))


def sample_features(n: int, spec: SampleSpec, seed: int) -> np.ndarray:
    """Latin-hypercube feature rows, shape (n, 9)."""
    u01 = qmc.LatinHypercube(d=8, seed=np.random.default_rng(seed)).random(n)

    def span(col, lim):
        return lim[0] + (lim[1] - lim[0]) * u01[:, col]

    U = span(0, spec.ws)
    asym = span(1, spec.asymmetry)
    sign = np.where(u01[:, 2] < 0.5, -1.0, 1.0)
    shear = span(3, spec.shear)
    ti = span(4, spec.ti)
    spread = span(5, spec.ti_spread)
    yaw = span(6, spec.yaw)
    tilt = np.where(u01[:, 7] < 0.5, -1.0, 1.0)
    f = np.empty((n, N_FEATURES))
    f[:, 0] = U * (1 + 0.5 * sign * asym)
    f[:, 1] = U * (1 - 0.5 * sign * asym)
    f[:, 2] = U * (1 + 0.5 * shear)
    f[:, 3] = U * (1 - 0.5 * shear)
    # zero-mean sector TI pattern: left/right contrast or top/bottom contrast
    pattern = np.where(tilt[:, None] > 0, [1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0])
    f[:, 4:8] = ti[:, None] * (1 + spread[:, None] * pattern)
    f[:, 8] = yaw
    return f


class SurrogateTrainingError(RuntimeError):
    def __init__(self, rmse: float, tol: float):
        super().__init__(f"surrogate did not reach relative RMSE {tol:.4f}: final {rmse:.4f}")
        self.rmse = rmse


@dataclass
class SurrogateReport:
    train_rel_rmse: float
    heldout_rel_rmse: float
    epochs: int
    history: list = field(default_factory=list)


def relative_rmse(pred, target) -> float:
    """RMSE as a fraction of the mean target."""
    pred, target = np.asarray(pred), np.asarray(target)
    return float(np.sqrt(np.mean((pred - target) ** 2)) / np.mean(target))


def max_relative_error(pred, target) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    return float(np.max(np.abs(pred - target) / target))


def train_surrogate(oracle=del_oracle, sample_spec: SampleSpec = SampleSpec(), *,
                    n_samples: int = 20000, seed: int = 1, hidden: int = 64,
                    epochs: int = 150, batch_size: int = 128, lr: float = 2e-3,
                    tol: float = 0.02, holdout: float = 0.1, return_report: bool = False):
    """Fit a 9-h-h-1 tanh network to ``oracle`` on Latin-hypercube samples.

    Raises SurrogateTrainingError if the held-out relative RMSE stays above
    ``tol`` once the epoch budget is spent.
    """
    rng = np.random.default_rng(seed)
    X = sample_features(n_samples, sample_spec, seed)
    y = oracle(X)
    n_hold = int(round(holdout * n_samples))
    Xh, yh, Xt, yt = X[:n_hold], y[:n_hold], X[n_hold:], y[n_hold:]

    in_mean, in_std = Xt.mean(axis=0), Xt.std(axis=0)
    in_std = np.where(in_std > 0, in_std, 1.0)
    out_scale = float(yt.mean())
    net = Mlp((N_FEATURES, hidden, hidden, 1), ("tanh", "tanh", "linear"), rng=rng)
    model = SurrogateNet(net, in_mean, in_std, out_scale)
    opt = Adam(lr=lr)
    Zt = (Xt - in_mean) / in_std
    history = []
    n = Zt.shape[0]
    for epoch in range(epochs):
        # cosine decay of the step size over the budget
        opt.lr = lr * 0.5 * (1 + np.cos(np.pi * epoch / epochs)) + 1e-5
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            z, cache = net.forward(Zt[idx], return_cache=True)
            pred = out_scale * softplus(z[:, 0])
            # squared relative error keeps accuracy uniform across the load range
            r = (pred - yt[idx]) / yt[idx]
            g = (2.0 * r / yt[idx] * out_scale * sigmoid(z[:, 0]) / idx.size)[:, None]
            grads, _ = net.backward(cache, g)
            opt.step(net.params, grads)
        if (epoch + 1) % 25 == 0 or epoch == epochs - 1:
            history.append((epoch + 1, relative_rmse(model.predict(Xh), yh)))
    held = relative_rmse(model.predict(Xh), yh)
    report = SurrogateReport(relative_rmse(model.predict(Xt), yt), held, epochs, history)
    if held > tol:
        raise SurrogateTrainingError(held, tol)
    return (model, report) if return_report else model


def estimate_del(window: DelWindow, net: SurrogateNet, turbine: int | None = None):
    """Surrogate DEL from the window averages; all turbines when ``turbine`` is None."""
    f = window.features()
    out = net.predict(f)
    return out if turbine is None else float(out[turbine])


# --- rainflow ------------------------------------------------------------

def turning_points(series) -> np.ndarray:
    """Local extrema of ``series`` including both end points; plateaus collapsed."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < 2:
        raise ValueError("series needs at least two samples")
    keep = np.concatenate([[True], np.diff(x) != 0])
    x = x[keep]
    if x.size < 3:
        return x
    d = np.diff(x)
    interior = np.nonzero(d[:-1] * d[1:] < 0)[0] + 1
    return np.concatenate([x[:1], x[interior], x[-1:]])


def rainflow_cycles(series):
    """Four-point rainflow counting.

    Returns ``(full, half)``: ranges of closed cycles, and ranges of the
    residual's consecutive reversals, each counted as half a cycle.
    """
    full = []
    stack = []
    for p in turning_points(series):
        stack.append(p)
        while len(stack) >= 4:
            a, b, c, d = stack[-4:]
            inner = abs(b - c)
            if inner <= abs(a - b) and inner <= abs(c - d):
                full.append(inner)
                del stack[-3:-1]
            else:
                break
    half = np.abs(np.diff(stack)) if len(stack) > 1 else np.zeros(0)
    return np.asarray(full, dtype=np.float64), half


def rainflow_del(series, wohler_m: float = 10.0, n_ref: float | None = None) -> float:
    """Damage-equivalent load range ``(sum n_i S_i^m / n_ref)^(1/m)``.

    ``n_ref`` defaults to one cycle per sample (1 Hz for 1 s data).
    """
    if wohler_m <= 0:
        raise ValueError("wohler_m must be positive")
    x = np.asarray(series, dtype=np.float64)
    if n_ref is None:
        n_ref = float(x.size)
    full, half = rainflow_cycles(x)
    if full.size == 0 and half.size == 0:
        return 0.0
    smax = max(full.max(initial=0.0), half.max(initial=0.0))
    if smax == 0.0:
        return 0.0
    # factor out the largest range to avoid overflow at large m
    damage = np.sum((full / smax) ** wohler_m) + 0.5 * np.sum((half / smax) ** wohler_m)
    return float(smax * (damage / n_ref) ** (1.0 / wohler_m))
