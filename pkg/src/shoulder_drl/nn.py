"""Fully connected ReLU network with hand-written backprop and Adam.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of
shape ``(B, fan_in)`` maps through ``x @ W + b``. Everything is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SDMLP\x00\x00\x00"
FORMAT_VERSION = 1


class Mlp:
    """ReLU on hidden layers, identity on the output layer."""

    def __init__(self, layer_dims: Sequence[int], rng=None, output_gain: float = 1.0):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"bad layer_dims {layer_dims!r}")
        self.layer_dims = dims
        rng = np.random.default_rng(rng)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            # He-uniform; the output layer is optionally shrunk.
            limit = np.sqrt(6.0 / fan_in)
            if k == len(dims) - 2:
                limit *= output_gain
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        i = 0
        for p in self.params():
            p[...] = vec[i : i + p.size].reshape(p.shape)
            i += p.size

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        twin = Mlp.__new__(Mlp)
        twin.layer_dims = list(self.layer_dims)
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def load_from(self, other: "Mlp") -> None:
        if other.layer_dims != self.layer_dims:
            raise ValueError("layer_dims differ")
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def forward(self, x: np.ndarray, cache: bool = False):
        """Returns the output, plus the per-layer inputs when ``cache`` is set."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.layer_dims[0]:
            raise ValueError(f"input dim {x.shape[-1]} != {self.layer_dims[0]}")
        inputs = []
        h = x
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        if cache:
            return h, inputs
        return h

    __call__ = forward

    def backward(self, inputs: list[np.ndarray], upstream: np.ndarray, need_input_grad: bool = False):
        """Reverse-mode gradients of ``sum(upstream * output)``.

        ``inputs`` is the cache from ``forward(x, cache=True)``; batch rows
        are summed. ReLU's derivative at exactly 0 is taken as 0.
        """
        g = np.asarray(upstream, dtype=float)
        grads: list[np.ndarray] = [None] * (2 * self.n_layers)
        for k in range(self.n_layers - 1, -1, -1):
            h_in = inputs[k]
            if g.ndim == 1:
                grads[2 * k] = np.outer(h_in, g)
                grads[2 * k + 1] = g.copy()
            else:
                grads[2 * k] = h_in.T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            if k == 0 and not need_input_grad:
                break
            g = g @ self.weights[k].T
            if k > 0:
                # h_in is the ReLU output of layer k-1; zero where the unit was off.
                g = g * (h_in > 0.0)
        if need_input_grad:
            return grads, g
        return grads


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list | None = None
    v: list | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Bias-corrected Adam update applied in place to ``params``."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params):
            raise ValueError("params/grads length mismatch")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save(path: str | Path, net: Mlp, extra: np.ndarray | None = None) -> None:
    """Write ``net`` (and optional trailing float64 values) in the flat binary format.

    Layout: 8-byte magic, uint32 version, uint32 count of layer dims, the
    dims as int32, then every parameter as float64, layer by layer, weights
    row-major (fan_in, fan_out) before biases. All little-endian.
    """
    dims = net.layer_dims
    header = MAGIC + struct.pack(f"<II{len(dims)}i", FORMAT_VERSION, len(dims), *dims)
    body = net.flat().astype("<f8").tobytes()
    tail = b"" if extra is None else np.asarray(extra, dtype="<f8").tobytes()
    Path(path).write_bytes(header + body + tail)


def load(path: str | Path) -> tuple[Mlp, np.ndarray]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a network file")
    off = len(MAGIC)
    version, n = struct.unpack_from("<II", data, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off += 8
    dims = list(struct.unpack_from(f"<{n}i", data, off))
    off += 4 * n
    net = Mlp(dims, rng=0)
    size = net.n_params * 8
    if len(data) < off + size or (len(data) - off - size) % 8:
        raise ValueError(f"{path}: truncated parameter block")
    net.set_flat(np.frombuffer(data, dtype="<f8", count=net.n_params, offset=off))
    extra = np.frombuffer(data, dtype="<f8", offset=off + size).astype(float)
    return net, extra
