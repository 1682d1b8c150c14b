"""A small fully connected network in float64 numpy.

Hidden layer i computes ``sigmoid(BN(X @ W_i + b_i))``.  The output layer is
affine with no batch norm or activation, so the output is unconstrained.
Batch norm uses batch statistics in ``"train"`` mode and running statistics
in ``"infer"`` mode.  Running stats update with momentum 0.9 and eps 1e-5.
Weights are Glorot-uniform and biases zero.

Gradients are computed by an explicit reverse pass, including the
dependence of the batch mean and variance on every row.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import MalformedFileError, NonFiniteGradientError, ShapeMismatchError, StaleCacheError

TRAIN = "train"
INFER = "infer"


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_layers: int = 3
    hidden_width: int = 128
    activation: str = "sigmoid"
    batch_norm: bool = True
    seed: int = 0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("input_dim, hidden_layers and hidden_width must be >= 1")
        if self.activation != "sigmoid":
            raise ValueError("only the sigmoid activation is supported")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [1]


@dataclass
class Network:
    config: NetConfig
    weights: list
    biases: list
    gamma: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    running_mean: list = field(default_factory=list)
    running_var: list = field(default_factory=list)
    version: int = 0

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.config.hidden_layers):
            names += [f"W{i}", f"b{i}"]
            if self.config.batch_norm:
                names += [f"gamma{i}", f"beta{i}"]
        return names + ["W_out", "b_out"]

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (views, not copies)."""
        out = {}
        n = self.config.hidden_layers
        for i in range(n):
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
            if self.config.batch_norm:
                out[f"gamma{i}"] = self.gamma[i]
                out[f"beta{i}"] = self.beta[i]
        out["W_out"] = self.weights[n]
        out["b_out"] = self.biases[n]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.running_mean, self.running_var)):
            out[f"running_mean{i}"] = m
            out[f"running_var{i}"] = v
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params(), **self.buffers()}

    def copy(self) -> "Network":
        c = lambda xs: [x.copy() for x in xs]
        return Network(self.config, c(self.weights), c(self.biases), c(self.gamma), c(self.beta),
                       c(self.running_mean), c(self.running_var), self.version)

    def load_state(self, state: dict[str, np.ndarray]):
        """Copy arrays from ``state`` into this network in place."""
        mine = self.state()
        if set(mine) != set(state):
            raise ShapeMismatchError(f"state keys differ: {sorted(set(mine) ^ set(state))}")
        for name, arr in mine.items():
            if arr.shape != np.shape(state[name]):
                raise ShapeMismatchError(f"{name}: expected {arr.shape}, got {np.shape(state[name])}")
            arr[...] = state[name]
        self.version += 1

    def num_params(self) -> int:
        return sum(a.size for a in self.params().values())


def init_network(config: NetConfig) -> Network:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    dims = config.dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    net = Network(config, weights, biases)
    if config.batch_norm:
        h = config.hidden_width
        for _ in range(config.hidden_layers):
            net.gamma.append(np.ones(h))
            net.beta.append(np.zeros(h))
            net.running_mean.append(np.zeros(h))
            net.running_var.append(np.ones(h))
    return net


@dataclass
class Cache:
    mode: str
    version: int
    net_id: int
    inputs: list          # input to each layer, including the output layer
    xhat: list            # normalized pre-activations (batch norm only)
    inv_std: list
    activations: list


def forward(net: Network, batch, mode: str = TRAIN, *, update_running: bool = True):
    """Run the network on an ``(M, input_dim)`` batch; returns ``(outputs, cache)``."""
    X = np.asarray(batch, dtype=np.float64)
    cfg = net.config
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ShapeMismatchError(f"expected batch of shape (M, {cfg.input_dim}), got {X.shape}")
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}")
    M = X.shape[0]
    if M < 1 or (mode == TRAIN and cfg.batch_norm and M < 2):
        raise ShapeMismatchError("train mode with batch norm needs at least 2 rows")

    inputs, xhats, inv_stds, acts = [], [], [], []
    h = X
    for i in range(cfg.hidden_layers):
        inputs.append(h)
        z = h @ net.weights[i] + net.biases[i]
        if cfg.batch_norm:
            if mode == TRAIN:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                if update_running:
                    m = cfg.bn_momentum
                    unbiased = var * (M / (M - 1))
                    net.running_mean[i] *= m
                    net.running_mean[i] += (1 - m) * mu
                    net.running_var[i] *= m
                    net.running_var[i] += (1 - m) * unbiased
            else:
                mu, var = net.running_mean[i], net.running_var[i]
            inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
            xhat = (z - mu) * inv_std
            z = net.gamma[i] * xhat + net.beta[i]
            xhats.append(xhat)
            inv_stds.append(inv_std)
        h = expit(z)
        acts.append(h)
    inputs.append(h)
    out = (h @ net.weights[-1] + net.biases[-1])[:, 0]
    return out, Cache(mode, net.version, id(net), inputs, xhats, inv_stds, acts)


INFER_BLOCK = 256


def predict(net: Network, batch) -> np.ndarray:
    """Infer-mode outputs; does not touch any network state.

    Rows are scored in zero-padded blocks of ``INFER_BLOCK`` so every row goes
    through matrix products of the same shape.  A row's output is then
    bit-identical whether it is scored alone or inside any larger batch.
    """
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.config.input_dim:
        raise ShapeMismatchError(f"expected batch of shape (M, {net.config.input_dim}), got {X.shape}")
    M = X.shape[0]
    if M == 0:
        raise ShapeMismatchError("cannot score an empty batch")
    out = np.empty(M)
    block = np.zeros((INFER_BLOCK, X.shape[1]))
    for start in range(0, M, INFER_BLOCK):
        n = min(INFER_BLOCK, M - start)
        block[:n] = X[start:start + n]
        block[n:] = 0.0
        out[start:start + n] = forward(net, block, INFER)[0][:n]
    return out


def backward(net: Network, cache: Cache, grad_out) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``d loss / d outputs`` for the cached batch."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("cache was produced by a different parameter state; rerun forward")
    cfg = net.config
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
    if g.shape[0] != cache.inputs[0].shape[0]:
        raise ShapeMismatchError("loss gradient length does not match the cached batch")
    n = cfg.hidden_layers
    grads = {}
    grads["W_out"] = cache.inputs[n].T @ g
    grads["b_out"] = g.sum(axis=0)
    dh = g @ net.weights[n].T
    for i in reversed(range(n)):
        a = cache.activations[i]
        dz = dh * a * (1.0 - a)
        if cfg.batch_norm:
            xhat = cache.xhat[i]
            grads[f"gamma{i}"] = (dz * xhat).sum(axis=0)
            grads[f"beta{i}"] = dz.sum(axis=0)
            dxhat = dz * net.gamma[i]
            if cache.mode == TRAIN:
                M = dxhat.shape[0]
                dz = cache.inv_std[i] / M * (
                    M * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dz = dxhat * cache.inv_std[i]
        grads[f"W{i}"] = cache.inputs[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ net.weights[i].T
    return {name: grads[name] for name in net.param_names()}


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0

    @classmethod
    def for_network(cls, net: Network, **kwargs) -> "OptimState":
        params = net.params()
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kwargs)


def clip_by_global_norm(grads: dict, clip_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def adam_step(net: Network, grads: dict, opt: OptimState):
    """Clip to the global norm, then apply one bias-corrected Adam update in place."""
    params = net.params()
    if set(grads) != set(params):
        raise ShapeMismatchError("gradient names do not match network parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeMismatchError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name} at step {opt.step + 1}")
    grads, _ = clip_by_global_norm(grads, opt.clip_norm)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        g = grads[name]
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    net.version += 1
    return net, opt


# -- artifact container --------------------------------------------------------
#
# layout: MAGIC | u32 format version | u64 header length | header JSON (utf-8)
#         | float64 little-endian array payload in header order
# The header is serialized with sorted keys and no whitespace, so identical
# content gives identical bytes.

MAGIC = b"RHNET\x00"
FORMAT_VERSION = 1


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    manifest = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise MalformedFileError(f"{path}: not a network artifact")
    try:
        off = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", raw, off)
        if version != FORMAT_VERSION:
            raise MalformedFileError(f"{path}: unsupported artifact version {version}")
        off += struct.calcsize("<IQ")
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
        off += hlen
        arrays = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise MalformedFileError(f"{path}: corrupt artifact ({exc})") from exc
    if off != len(raw):
        raise MalformedFileError(f"{path}: trailing or missing payload bytes")
    return header["meta"], arrays


def network_from_state(config: NetConfig, state: dict[str, np.ndarray]) -> Network:
    net = init_network(config)
    net.load_state(state)
    net.version = 0
    return net


def save_network(net: Network, path, extra: dict | None = None) -> Path:
    meta = {"net_config": asdict(net.config), "extra": extra or {}}
    return write_container(path, meta, net.state())


def load_network(path) -> tuple[Network, dict]:
    meta, arrays = read_container(path)
    config = NetConfig(**meta["net_config"])
    return network_from_state(config, arrays), meta.get("extra", {})
