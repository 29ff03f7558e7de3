"""Positional encoding, a small fully connected network with hand-written
backpropagation, and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LFMLP\x00\x01\x00"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PositionalEncoding:
    """``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``.

    The sin/cos pairs are grouped per coordinate after the raw input.
    """

    frequencies: int = 10
    include_input: bool = True

    def dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.frequencies + int(self.include_input))

    def __call__(self, p: np.ndarray) -> np.ndarray:
        return encode(p, self.frequencies, self.include_input)


def encode(p: np.ndarray, L: int = 10, include_input: bool = True) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("cannot encode non-finite input")
    freq = np.pi * 2.0 ** np.arange(L)
    ang = p[..., :, None] * freq
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(p.shape[:-1] + (p.shape[-1] * 2 * L,))
    return np.concatenate([p, sc], axis=-1) if include_input else sc


class Mlp:
    """ReLU network with a linear output layer, float64 throughout.

    ``widths`` lists every layer size including input and output, so a net
    with ``len(widths) - 1`` linear layers. Parameters are initialized with
    He-uniform fan-in scaling from ``rng``; ``zero_last`` zeroes the output
    layer so the network starts as the zero function.
    """

    def __init__(self, widths, rng: np.random.Generator | None = None, *, zero_last: bool = False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need at least an input and an output width")
        rng = np.random.default_rng(0) if rng is None else rng
        self.widths = widths
        self.weights, self.biases = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / a)
            W = rng.uniform(-bound, bound, size=(a, b))
            if zero_last and i == len(widths) - 2:
                W[:] = 0.0
            self.weights.append(W)
            self.biases.append(np.zeros(b))
        self.reset_optimizer()

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def reset_optimizer(self):
        self.m = [np.zeros_like(p) for p in self.params()]
        self.v = [np.zeros_like(p) for p in self.params()]
        self.step_count = 0

    def forward(self, x: np.ndarray):
        """Returns ``(y, cache)``; the cache feeds :meth:`backward`."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.widths[0]:
            raise ValueError(f"expected input of width {self.widths[0]}, got shape {h.shape}")
        acts = [h]
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dy: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(dy * y)`` w.r.t. the parameters, ordered like :meth:`params`."""
        acts = cache
        g = np.asarray(dy, dtype=np.float64)
        grads = [None] * (2 * self.n_layers)
        for i in range(self.n_layers - 1, -1, -1):
            if i != self.n_layers - 1:
                g = g * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
        return grads

    def adam_step(self, grads, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        params = self.params()
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ValueError("gradient shapes do not match the parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - beta1 ** t
        c2 = 1 - beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def copy(self) -> Mlp:
        out = Mlp.__new__(Mlp)
        out.widths = list(self.widths)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        out.m = [a.copy() for a in self.m]
        out.v = [a.copy() for a in self.v]
        out.step_count = self.step_count
        return out

    # flat binary layout:
    #   magic(8) | uint32 n_widths | uint32 widths[n] | uint8 has_adam
    #   | float64 params | (uint64 step | float64 m | float64 v)
    def to_bytes(self, include_optimizer: bool = True) -> bytes:
        head = MAGIC + struct.pack("<I", len(self.widths)) + struct.pack(f"<{len(self.widths)}I", *self.widths)
        head += struct.pack("<B", int(include_optimizer))
        blob = b"".join(p.astype("<f8").tobytes() for p in self.params())
        if include_optimizer:
            blob += struct.pack("<Q", self.step_count)
            blob += b"".join(a.astype("<f8").tobytes() for a in self.m + self.v)
        return head + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> Mlp:
        if data[:8] != MAGIC:
            raise CheckpointError("not a network checkpoint (bad magic)")
        (n,) = struct.unpack_from("<I", data, 8)
        widths = list(struct.unpack_from(f"<{n}I", data, 12))
        off = 12 + 4 * n
        (has_adam,) = struct.unpack_from("<B", data, off)
        off += 1
        net = cls.__new__(cls)
        net.widths = widths
        shapes = [s for a, b in zip(widths[:-1], widths[1:]) for s in ((a, b), (b,))]

        def take(off):
            out = []
            for s in shapes:
                size = int(np.prod(s))
                if off + 8 * size > len(data):
                    raise CheckpointError("truncated network checkpoint")
                out.append(np.frombuffer(data, "<f8", size, off).reshape(s).astype(np.float64))
                off += 8 * size
            return out, off

        params, off = take(off)
        net.weights, net.biases = params[0::2], params[1::2]
        net.reset_optimizer()
        if has_adam:
            (net.step_count,) = struct.unpack_from("<Q", data, off)
            net.m, off = take(off + 8)
            net.v, off = take(off)
        if off != len(data):
            raise CheckpointError("trailing bytes in network checkpoint")
        return net


def gradient_check(net: Mlp, probes: int = 100, seed: int = 0, eps: float = 1e-5, batch: int = 4) -> float:
    """Largest relative difference between backprop and central differences.

    The scalar checked is ``sum(r * net(x))`` for random ``x`` and ``r``.
    ``probes`` parameters are drawn at random (spread over all layers).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, net.widths[0]))
    r = rng.standard_normal((batch, net.widths[-1]))
    y, cache = net.forward(x)
    grads = net.backward(cache, r)
    params = net.params()
    worst = 0.0
    for _ in range(probes):
        i = int(rng.integers(len(params)))
        j = int(rng.integers(params[i].size))
        flat = params[i].reshape(-1)
        old = flat[j]
        flat[j] = old + eps
        fp = float(np.sum(r * net(x)))
        flat[j] = old - eps
        fm = float(np.sum(r * net(x)))
        flat[j] = old
        num = (fp - fm) / (2 * eps)
        ana = float(grads[i].reshape(-1)[j])
        scale = max(abs(num), abs(ana), 1e-6)
        worst = max(worst, abs(num - ana) / scale)
    return worst
