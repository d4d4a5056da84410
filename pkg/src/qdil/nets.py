"""Small dense networks on flat float64 parameter vectors, with exact manual gradients."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

HEADS = ("identity", "sigmoid")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a tanh MLP: layer_sizes[0] inputs through layer_sizes[-1] outputs.

    Hidden activations are tanh; the head is applied to the last layer only.
    n_extras parameters (e.g. state-independent log-stds) are appended to the
    flat vector after all weights and biases and do not enter forward().
    """

    layer_sizes: tuple[int, ...]
    head: str = "identity"
    n_extras: int = 0

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"non-positive layer size in {self.layer_sizes}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.n_extras < 0:
            raise ValueError("n_extras must be >= 0")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def param_count(self) -> int:
        n = 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            n += a * b + b
        return n + self.n_extras


def split_params(spec: MlpSpec, params: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Views into the flat vector: per-layer (in, out) weights row-major, then biases, then extras."""
    if params.shape != (spec.param_count,):
        raise ValueError(f"expected {spec.param_count} params, got {params.shape}")
    ws, bs, off = [], [], 0
    for a, b in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        ws.append(params[off:off + a * b].reshape(a, b))
        off += a * b
        bs.append(params[off:off + b])
        off += b
    return ws, bs, params[off:]


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    if n_in < n_out:
        q = q.T
    return gain * q


def init_params(spec: MlpSpec, rng: np.random.Generator, out_gain: float = 1.0) -> np.ndarray:
    """Orthogonal weights (gain sqrt(2) on hidden layers, out_gain on the last), zero biases and extras."""
    params = np.zeros(spec.param_count)
    ws, _, _ = split_params(spec, params)
    for i, w in enumerate(ws):
        gain = out_gain if i == spec.n_layers - 1 else np.sqrt(2.0)
        w[...] = _orthogonal(rng, w.shape[0], w.shape[1], gain)
    return params


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]          # activation entering each layer
    out: np.ndarray                   # head output
    weights: list[np.ndarray] = field(repr=False, default_factory=list)


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; x has shape (n, layer_sizes[0])."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"input width {x.shape[1]} != {spec.layer_sizes[0]}")
    ws, bs, _ = split_params(spec, params)
    inputs = []
    h = x
    for i, (w, b) in enumerate(zip(ws, bs)):
        inputs.append(h)
        z = h @ w + b
        h = z if i == spec.n_layers - 1 else np.tanh(z)
    out = _sigmoid(h) if spec.head == "sigmoid" else h
    return out, ForwardCache(inputs=inputs, out=out, weights=ws)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def backward(spec: MlpSpec, cache: ForwardCache, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients for a scalar loss given dloss/dout.

    Returns (flat param gradient, dloss/dinput). The caller folds any batch
    averaging into dout; extras slots come back zero since forward() never
    reads them.
    """
    grad = np.zeros(spec.param_count)
    gws, gbs, _ = split_params(spec, grad)
    dz = np.asarray(dout, dtype=np.float64)
    if spec.head == "sigmoid":
        dz = dz * cache.out * (1.0 - cache.out)
    for i in range(spec.n_layers - 1, -1, -1):
        h = cache.inputs[i]
        gws[i][...] = h.T @ dz
        gbs[i][...] = dz.sum(axis=0)
        dx = dz @ cache.weights[i].T
        if i > 0:
            dz = dx * (1.0 - h * h)   # h = tanh(z_{i-1})
    return grad, dx


STD_LOG_BOUND = 60.0


def std_exp(log_std: np.ndarray) -> np.ndarray:
    """exp with a saturated exponent: raw exp overflows float64 near 710, and
    candidate parameter vectors built from large coefficient combinations can
    carry log_std far outside any behaviorally distinct range."""
    return np.exp(np.clip(log_std, -STD_LOG_BOUND, STD_LOG_BOUND))


def gaussian_logp(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, one scalar per row."""
    z = (actions - mean) * std_exp(-log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_logp_grads(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(dlogp/dmean, dlogp/dlog_std) evaluated per row."""
    inv = std_exp(-log_std)
    d_mean = (actions - mean) * inv * inv
    d_log_std = ((actions - mean) * inv) ** 2 - 1.0
    return d_mean, d_log_std


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Entropy of the diagonal Gaussian; state-independent."""
    return float(log_std.sum() + 0.5 * log_std.size * (1.0 + LOG_2PI))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update, in place on params and state."""
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _finite_diff(loss_fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        hi = loss_fn(p)
        p[i] -= 2.0 * h
        lo = loss_fn(p)
        g[i] = (hi - lo) / (2.0 * h)
    return g


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of analytic gradients vs central differences, over every head type."""
    rng = np.random.default_rng(seed)
    worst = 0.0

    for spec in (MlpSpec((4, 8, 5, 3), head="identity"),
                 MlpSpec((4, 6, 2), head="sigmoid"),
                 MlpSpec((3, 1), head="identity")):
        params = 0.5 * rng.standard_normal(spec.param_count)
        x = rng.standard_normal((5, spec.layer_sizes[0]))
        w = rng.standard_normal((5, spec.layer_sizes[-1]))

        def loss(p, spec=spec, x=x, w=w):
            y, _ = forward(spec, p, x)
            return float((w * y).sum())

        y, cache = forward(spec, params, x)
        analytic, _ = backward(spec, cache, w)
        worst = max(worst, _rel_err(analytic, _finite_diff(loss, params, h)))

    # gaussian policy head: logp flows through the mean MLP and the log_std extras
    spec = MlpSpec((4, 8, 2), head="identity", n_extras=2)
    params = 0.5 * rng.standard_normal(spec.param_count)
    x = rng.standard_normal((6, 4))
    actions = rng.standard_normal((6, 2))

    def loss(p):
        mean, _ = forward(spec, p, x)
        _, _, log_std = split_params(spec, p)
        return float(gaussian_logp(mean, log_std, actions).sum())

    mean, cache = forward(spec, params, x)
    _, _, log_std = split_params(spec, params)
    d_mean, d_log_std = gaussian_logp_grads(mean, log_std, actions)
    analytic, _ = backward(spec, cache, d_mean)
    _, _, extras_grad = split_params(spec, analytic)
    extras_grad[...] = d_log_std.sum(axis=0)
    worst = max(worst, _rel_err(analytic, _finite_diff(loss, params, h)))
    return worst


_MAGIC = b"QDNP"
_HEAD_CODES = {name: i for i, name in enumerate(HEADS)}


def save_params(path: str, spec: MlpSpec, params: np.ndarray) -> None:
    """Little-endian checkpoint: magic, version, head code, layer sizes, extras count, flat f64."""
    if params.shape != (spec.param_count,):
        raise ValueError("params do not match spec")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", 1, _HEAD_CODES[spec.head], len(spec.layer_sizes)))
        f.write(struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes))
        f.write(struct.pack("<QQ", spec.n_extras, params.size))
        f.write(np.ascontiguousarray(params, dtype="<f8").tobytes())


def load_params(path: str) -> tuple[MlpSpec, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, head_code, n_sizes = struct.unpack_from("<III", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, off)
    off += 4 * n_sizes
    n_extras, n_params = struct.unpack_from("<QQ", raw, off)
    off += 16
    spec = MlpSpec(tuple(int(s) for s in sizes), head=HEADS[head_code], n_extras=int(n_extras))
    if n_params != spec.param_count:
        raise ValueError(f"{path}: header says {n_params} params, spec needs {spec.param_count}")
    if len(raw) - off < 8 * n_params:
        raise ValueError(f"{path}: truncated parameter block")
    params = np.frombuffer(raw, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    return spec, params
