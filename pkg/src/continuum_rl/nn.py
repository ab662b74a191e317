"""Small fully-connected ReLU network with a TD-loss gradient and Adam.

Parameters live in one flat float64 vector; per-layer weight and bias arrays
are views into it, so optimizer updates and checkpoints work on a single
array.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

AGENT_TOPOLOGY = (2, 180, 180, 180, 4)
SINGLE_AGENT_TOPOLOGY = (2, 240, 240, 240, 16)


class MlpParams:
    """Weights and biases of a ReLU MLP, stored flat in layer order (W1, b1, W2, b2, ...)."""

    def __init__(self, topology, flat=None):
        topology = tuple(int(n) for n in topology)
        if len(topology) < 2 or any(n < 1 for n in topology):
            raise ValueError(f"invalid topology {topology}")
        self.topology = topology
        size = sum(i * o + o for i, o in zip(topology[:-1], topology[1:]))
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ValueError(f"flat parameter vector has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self.weights = []
        self.biases = []
        off = 0
        for i, o in zip(topology[:-1], topology[1:]):
            self.weights.append(flat[off : off + i * o].reshape(i, o))
            off += i * o
            self.biases.append(flat[off : off + o])
            off += o

    @property
    def size(self):
        return self.flat.size

    def __eq__(self, other):
        return (
            isinstance(other, MlpParams)
            and self.topology == other.topology
            and np.array_equal(self.flat, other.flat)
        )

    def __repr__(self):
        return f"MlpParams(topology={self.topology})"


def mlp_init(topology, seed):
    """Uniform Glorot weights (+/- sqrt(6 / (fan_in + fan_out))), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = MlpParams(topology)
    for W in params.weights:
        fan_in, fan_out = W.shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return params


def copy_weights(src):
    return MlpParams(src.topology, src.flat.copy())


def _as_batch(states):
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite network input")
    return x


def _forward_cache(params, x):
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(params, states):
    """Q-values for one state (shape ``(n_out,)``) or a batch (``(n, n_out)``)."""
    x = np.asarray(states, dtype=np.float64)
    out = _forward_cache(params, _as_batch(x))[-1]
    return out[0] if x.ndim == 1 else out


def loss(params, states, actions, targets):
    q = forward(params, _as_batch(states))
    idx = np.asarray(actions, dtype=np.intp)
    return float(np.mean((np.asarray(targets) - q[np.arange(len(idx)), idx]) ** 2))


def loss_gradient(params, states, actions, targets):
    """Gradient of mean_j (y_j - Q(s_j, a_j))^2 w.r.t. the flat parameters.

    Returns ``(grad, loss_value)``.
    """
    x = _as_batch(states)
    idx = np.asarray(actions, dtype=np.intp)
    y = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty minibatch")
    if idx.shape != (n,) or y.shape != (n,):
        raise ValueError("states, actions and targets must have matching batch size")
    n_out = params.topology[-1]
    if np.any(idx < 0) or np.any(idx >= n_out):
        raise IndexError(f"action index out of range for {n_out} outputs")
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite TD targets")

    acts = _forward_cache(params, x)
    rows = np.arange(n)
    resid = y - acts[-1][rows, idx]
    grad = MlpParams(params.topology)
    delta = np.zeros_like(acts[-1])
    delta[rows, idx] = -2.0 * resid / n
    for k in range(len(params.weights) - 1, -1, -1):
        grad.weights[k][...] = acts[k].T @ delta
        grad.biases[k][...] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0)
    return grad.flat, float(np.mean(resid * resid))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-4, **kw):
        return cls(np.zeros(params.size), np.zeros(params.size), 0, lr, **kw)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, grad, state):
    """One bias-corrected Adam update; mutates and returns ``(params, state)``."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ValueError("gradient / moment shape does not match parameters")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    # lr * (m / bc1) / (sqrt(v / bc2) + eps), evaluated in one scratch buffer
    tmp = state.v * (1.0 / bc2)
    np.sqrt(tmp, out=tmp)
    tmp += state.eps
    np.divide(state.m, tmp, out=tmp)
    tmp *= state.lr / bc1
    params.flat -= tmp
    return params, state


# Checkpoint layout (all little-endian):
#   magic   4s   b"CRQN"
#   version u16  = 1
#   nlayer  u16  number of topology entries
#   topo    u32 * nlayer
#   nparam  u64
#   params  f64 * nparam
#   has_opt u8
#   [step u64, lr f64, beta1 f64, beta2 f64, eps f64, m f64 * nparam, v f64 * nparam]
CHECKPOINT_MAGIC = b"CRQN"
CHECKPOINT_VERSION = 1


def dump_params(params, adam=None):
    buf = io.BytesIO()
    topo = params.topology
    buf.write(struct.pack("<4sHH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(topo)))
    buf.write(struct.pack(f"<{len(topo)}I", *topo))
    buf.write(struct.pack("<Q", params.size))
    buf.write(params.flat.astype("<f8").tobytes())
    buf.write(struct.pack("<B", adam is not None))
    if adam is not None:
        buf.write(struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        buf.write(adam.m.astype("<f8").tobytes())
        buf.write(adam.v.astype("<f8").tobytes())
    return buf.getvalue()


def _read(stream, n):
    data = stream.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def load_params(data):
    """Inverse of :func:`dump_params`; accepts bytes or a binary stream. Returns ``(params, adam | None)``."""
    stream = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    magic, version, nlayer = struct.unpack("<4sHH", _read(stream, 8))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    topo = struct.unpack(f"<{nlayer}I", _read(stream, 4 * nlayer))
    (nparam,) = struct.unpack("<Q", _read(stream, 8))
    flat = np.frombuffer(_read(stream, 8 * nparam), dtype="<f8").astype(np.float64)
    params = MlpParams(topo, flat)
    (has_opt,) = struct.unpack("<B", _read(stream, 1))
    adam = None
    if has_opt:
        step, lr, b1, b2, eps = struct.unpack("<Q4d", _read(stream, 40))
        m = np.frombuffer(_read(stream, 8 * nparam), dtype="<f8").astype(np.float64)
        v = np.frombuffer(_read(stream, 8 * nparam), dtype="<f8").astype(np.float64)
        adam = AdamState(m, v, step, lr, b1, b2, eps)
    return params, adam
