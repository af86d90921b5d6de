"""Tiny feed-forward networks with exact reverse-mode gradients.

Architecture: a per-beam channel mix (a stack of 1x1 convolutions with weights
shared across beams), flattened and concatenated with scalar inputs, then a
dense stack and a linear head. The gaussian policy head emits a 2D mean plus a
state-independent learnable log-std; the scalar head emits one value (critic
value or discriminator logit).

Inputs are flat rows: ``beams * channels`` lidar values in beam-major order
followed by the scalar inputs. Everything is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from vibe.errors import BadMagic, ShapeMismatch, TruncatedFile, VersionMismatch

HEADS = ("gaussian_policy", "scalar")
ACTIVATIONS = ("tanh", "identity")
MAGIC = b"VIBENET\x00"
FORMAT_VERSION = 1
LOG_STD_INIT = -0.5


@dataclass(frozen=True)
class NetworkSpec:
    scalar_inputs: int
    lidar_beams: int = 64
    lidar_channels: int = 5
    mix_layers: tuple = (15, 3)
    dense_layers: tuple = (128, 64)
    head: str = "gaussian_policy"
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "mix_layers", tuple(int(w) for w in self.mix_layers))
        object.__setattr__(self, "dense_layers", tuple(int(w) for w in self.dense_layers))
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.mix_layers + self.dense_layers, default=1) < 1:
            raise ValueError("layer widths must be >= 1")
        if self.lidar_beams < 0 or self.lidar_channels < 1 or self.scalar_inputs < 0:
            raise ValueError("bad input sizes")

    @property
    def out_dim(self):
        return 2 if self.head == "gaussian_policy" else 1

    @property
    def lidar_dim(self):
        return self.lidar_beams * self.lidar_channels

    @property
    def input_dim(self):
        return self.lidar_dim + self.scalar_inputs

    def layout(self):
        """Ordered ``(name, shape)`` blocks of the flat parameter vector."""
        blocks = []
        c = self.lidar_channels
        for k, w in enumerate(self.mix_layers):
            blocks += [(f"mix{k}.W", (c, w)), (f"mix{k}.b", (w,))]
            c = w
        n = self.lidar_beams * c + self.scalar_inputs
        for k, w in enumerate(self.dense_layers):
            blocks += [(f"dense{k}.W", (n, w)), (f"dense{k}.b", (w,))]
            n = w
        blocks += [("head.W", (n, self.out_dim)), ("head.b", (self.out_dim,))]
        if self.head == "gaussian_policy":
            blocks.append(("log_std", (2,)))
        return blocks

    def param_count(self):
        c, total = self.lidar_channels, 0
        for w in self.mix_layers:
            total += (c + 1) * w
            c = w
        n = self.lidar_beams * c + self.scalar_inputs
        for w in self.dense_layers:
            total += (n + 1) * w
            n = w
        total += (n + 1) * self.out_dim
        return total + (2 if self.head == "gaussian_policy" else 0)

    def to_json(self):
        d = asdict(self)
        d["mix_layers"], d["dense_layers"] = list(self.mix_layers), list(self.dense_layers)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def unpack(spec: NetworkSpec, params):
    """Views into ``params`` keyed by block name."""
    params = np.asarray(params)
    if params.shape != (spec.param_count(),):
        raise ShapeMismatch(f"expected {spec.param_count()} parameters, got {params.shape}")
    out, i = {}, 0
    for name, shape in spec.layout():
        n = int(np.prod(shape))
        out[name] = params[i:i + n].reshape(shape)
        i += n
    return out


def init_params(spec: NetworkSpec, rng) -> np.ndarray:
    """Uniform Glorot weights, zero biases, log-std at ``LOG_STD_INIT``."""
    parts = []
    for name, shape in spec.layout():
        if name == "log_std":
            parts.append(np.full(shape, LOG_STD_INIT))
        elif name.endswith(".W"):
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-lim, lim, size=shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return np.concatenate([np.ravel(p) for p in parts])


def _act(spec, z):
    return np.tanh(z) if spec.activation == "tanh" else z


def _act_grad(spec, a, g):
    return g * (1.0 - a * a) if spec.activation == "tanh" else g


def forward(spec: NetworkSpec, params, x):
    """Evaluate a batch ``x`` of shape (B, input_dim); returns (B, out_dim) and a cache."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ShapeMismatch(f"expected input width {spec.input_dim}, got {x.shape[1]}")
    p = unpack(spec, params)
    b = x.shape[0]
    h = x[:, :spec.lidar_dim].reshape(b * spec.lidar_beams, spec.lidar_channels)
    acts = [h]
    for k in range(len(spec.mix_layers)):
        h = _act(spec, h @ p[f"mix{k}.W"] + p[f"mix{k}.b"])
        acts.append(h)
    h = np.concatenate([h.reshape(b, -1), x[:, spec.lidar_dim:]], axis=1)
    dense_acts = [h]
    for k in range(len(spec.dense_layers)):
        h = _act(spec, h @ p[f"dense{k}.W"] + p[f"dense{k}.b"])
        dense_acts.append(h)
    out = h @ p["head.W"] + p["head.b"]
    cache = {"acts": acts, "dense": dense_acts, "batch": b, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def backward(spec: NetworkSpec, params, cache, grad_out, grad_log_std=None):
    """Gradient of ``sum(grad_out * out)`` (+ ``grad_log_std . log_std``) w.r.t. params."""
    p = unpack(spec, params)
    b = cache["batch"]
    g = np.asarray(grad_out, dtype=float).reshape(b, spec.out_dim)
    grads = {}
    h = cache["dense"][-1]
    grads["head.W"] = h.T @ g
    grads["head.b"] = g.sum(axis=0)
    g = g @ p["head.W"].T
    for k in reversed(range(len(spec.dense_layers))):
        g = _act_grad(spec, cache["dense"][k + 1], g)
        grads[f"dense{k}.W"] = cache["dense"][k].T @ g
        grads[f"dense{k}.b"] = g.sum(axis=0)
        g = g @ p[f"dense{k}.W"].T
    if spec.mix_layers and spec.lidar_beams:
        width = spec.mix_layers[-1]
        g = g[:, :spec.lidar_beams * width].reshape(b * spec.lidar_beams, width)
        for k in reversed(range(len(spec.mix_layers))):
            g = _act_grad(spec, cache["acts"][k + 1], g)
            grads[f"mix{k}.W"] = cache["acts"][k].T @ g
            grads[f"mix{k}.b"] = g.sum(axis=0)
            if k:
                g = g @ p[f"mix{k}.W"].T
    else:
        for k in range(len(spec.mix_layers)):
            grads[f"mix{k}.W"] = np.zeros_like(p[f"mix{k}.W"])
            grads[f"mix{k}.b"] = np.zeros_like(p[f"mix{k}.b"])
    if spec.head == "gaussian_policy":
        grads["log_std"] = np.zeros(2) if grad_log_std is None else np.asarray(grad_log_std, dtype=float)
    return np.concatenate([grads[name].ravel() for name, _ in spec.layout()])


def log_std(spec: NetworkSpec, params):
    if spec.head != "gaussian_policy":
        raise ValueError("only the gaussian policy head has a log-std")
    return np.asarray(params)[-2:]


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grad, state: AdamState, hyper: AdamConfig = AdamConfig()):
    """One bias-corrected Adam descent step; returns new params and state."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != np.shape(params) or state.m.shape != grad.shape:
        raise ShapeMismatch("params, gradient and moments must share a shape")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grad * grad
    m_hat = m / (1 - hyper.beta1**t)
    v_hat = v / (1 - hyper.beta2**t)
    new = params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(m, v, t)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(spec: NetworkSpec, params, meta=None) -> bytes:
    """magic | u32 version | u32 len + spec JSON | u64 count | f64[count] | u32 len + meta JSON."""
    params = np.asarray(params, dtype="<f8")
    if params.shape != (spec.param_count(),):
        raise ShapeMismatch("parameter vector does not match spec")
    s = spec.to_json().encode()
    m = json.dumps(meta or {}, sort_keys=True).encode()
    return b"".join([
        MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(s)), s,
        struct.pack("<Q", len(params)), params.tobytes(), struct.pack("<I", len(m)), m,
    ])


def load_checkpoint(data: bytes):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFile(f"checkpoint ends at byte {len(view)}, needed {pos + n}")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise BadMagic("not a network checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    (n,) = struct.unpack("<I", take(4))
    spec = NetworkSpec.from_json(take(n).decode())
    (count,) = struct.unpack("<Q", take(8))
    if count != spec.param_count():
        raise ShapeMismatch("parameter count disagrees with spec")
    params = np.frombuffer(take(8 * count), dtype="<f8").astype(float)
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n).decode())
    return spec, params, meta


def write_checkpoint(path, spec, params, meta=None):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(spec, params, meta))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


def describe(spec: NetworkSpec, meta) -> str:
    lines = [f"head: {spec.head}", f"activation: {spec.activation}",
             f"lidar: {spec.lidar_beams} beams x {spec.lidar_channels} channels",
             f"mix layers: {list(spec.mix_layers)}", f"scalar inputs: {spec.scalar_inputs}",
             f"dense layers: {list(spec.dense_layers)}", f"parameters: {spec.param_count()}"]
    lines += [f"{k}: {meta[k]}" for k in sorted(meta)]
    return "\n".join(lines)
