"""Differentiable MLPs, Adam, EMA and the shared checkpoint format.

Every learned function in the package is an :class:`MLP` whose parameters live
in one flat float64 vector. The network object only describes the architecture;
parameters are passed explicitly, so live, target and EMA copies of the same
network are just different vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "MLP",
    "AdamState",
    "adam_step",
    "EmaTracker",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "softplus",
    "sigmoid",
]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "silu":
        return z * sigmoid(z)
    if name == "mish":
        return z * np.tanh(softplus(z))
    if name == "softplus":
        return softplus(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name: str, z: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if name == "identity":
        return dy
    if name == "relu":
        return dy * (z > 0.0)
    if name == "tanh":
        return dy * (1.0 - y * y)
    if name == "silu":
        s = sigmoid(z)
        return dy * s * (1.0 + z * (1.0 - s))
    if name == "mish":
        t = np.tanh(softplus(z))
        return dy * (t + z * (1.0 - t * t) * sigmoid(z))
    if name == "softplus":
        return dy * sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


class MLP:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    Parameters are stored layer by layer as ``W`` (row-major, ``in x out``)
    followed by ``b``.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activation: str = "relu",
        output_activation: str = "identity",
    ):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.output_activation = output_activation
        _act_forward(activation, np.zeros(1))
        _act_forward(output_activation, np.zeros(1))
        self._offsets = []
        off = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            self._offsets.append((off, off + n_in * n_out, off + n_in * n_out + n_out))
            off += n_in * n_out + n_out
        self.n_params = off

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def arch(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "activation": self.activation,
            "output_activation": self.output_activation,
        }

    def layers(self, params: np.ndarray):
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} params, got {params.shape}")
        out = []
        for (w0, b0, b1), n_in, n_out in zip(self._offsets, self.sizes[:-1], self.sizes[1:]):
            out.append((params[w0:b0].reshape(n_in, n_out), params[b0:b1]))
        return out

    def init(self, rng: np.random.Generator, last_layer_scale: float = 1.0) -> np.ndarray:
        params = np.empty(self.n_params)
        layers = self.layers(params)
        for i, (w, b) in enumerate(layers):
            bound = 1.0 / np.sqrt(w.shape[0])
            if i == len(layers) - 1:
                bound *= last_layer_scale
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        return params

    def __call__(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        h = x
        layers = self.layers(params)
        last = len(layers) - 1
        for i, (w, b) in enumerate(layers):
            h = _act_forward(self.output_activation if i == last else self.activation, h @ w + b)
        return h

    def forward(self, params: np.ndarray, x: np.ndarray):
        """Return ``(y, cache)``; the cache feeds :meth:`backward`."""
        cache = []
        h = x
        layers = self.layers(params)
        last = len(layers) - 1
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            act = self.output_activation if i == last else self.activation
            y = _act_forward(act, z)
            cache.append((h, z, y, act))
            h = y
        return h, cache

    def backward(self, params: np.ndarray, cache, dy: np.ndarray, need_dx: bool = True):
        """Backpropagate ``dL/dy``. Returns ``(dL/dparams, dL/dx)``."""
        grad = np.zeros(self.n_params)
        layers = self.layers(params)
        grads = self.layers(grad)
        d = dy
        for i in range(len(layers) - 1, -1, -1):
            h, z, y, act = cache[i]
            dz = _act_backward(act, z, y, d)
            gw, gb = grads[i]
            gw[...] = h.T @ dz
            gb[...] = dz.sum(axis=0)
            if i > 0 or need_dx:
                d = dz @ layers[i][0].T
        return grad, (d if need_dx else None)


@dataclass
class AdamState:
    n: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``state``, returns new params."""
    if params.shape != (state.n,) or grad.shape != (state.n,):
        raise ValueError(
            f"length mismatch: state {state.n}, params {params.shape}, grad {grad.shape}"
        )
    if not state.lr > 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EmaTracker:
    shadow: np.ndarray
    rate: float = 0.005

    def __post_init__(self):
        self.shadow = np.array(self.shadow, dtype=np.float64)
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"EMA rate {self.rate} outside [0, 1]")


def ema_update(tracker: EmaTracker, live: np.ndarray) -> np.ndarray:
    """``shadow <- shadow + w (live - shadow)``."""
    if not 0.0 <= tracker.rate <= 1.0:
        raise ValueError(f"EMA rate {tracker.rate} outside [0, 1]")
    if live.shape != tracker.shadow.shape:
        raise ValueError(f"shape mismatch {live.shape} vs {tracker.shadow.shape}")
    tracker.shadow = tracker.shadow + tracker.rate * (live - tracker.shadow)
    return tracker.shadow


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"DWMCKPT1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    """Write ``magic | u32 header_len | JSON header | little-endian f64 payload``."""
    blocks = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        blocks.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes(order="C"))
    head = dict(header or {})
    head["blocks"] = blocks
    raw = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode())
    pos = 12 + hlen
    arrays = {}
    for blk in header["blocks"]:
        count = int(np.prod(blk["shape"], dtype=np.int64))
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: payload truncated in block {blk['name']!r}")
        arrays[blk["name"]] = np.frombuffer(data[pos:end], dtype="<f8").reshape(blk["shape"]).astype(np.float64)
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays
