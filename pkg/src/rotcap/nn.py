"""Minimal differentiable-layer substrate in float64 numpy.

Every layer stores its forward cache on itself and accumulates parameter
gradients on backward, so a layer instance is single-owner during a
training step.  All gradients here are verified against central finite
differences in the test suite.
"""
from __future__ import annotations

import numpy as np

from .errors import DataError

DTYPE = np.float64


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_out = n_in, n_out
        self.w = uniform_init(rng, (n_in, n_out), n_in)
        self.b = uniform_init(rng, (n_out,), n_in)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise DataError(f"linear: expected last dim {self.n_in}, got {x.shape}")
        self._x = x
        return x @ self.w + self.b

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.n_in)
        d2 = dout.reshape(-1, self.n_out)
        self.dw += x2.T @ d2
        self.db += d2.sum(axis=0)
        return dout @ self.w.T

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


class ReLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask

    def params(self):
        return {}

    def grads(self):
        return {}


class Conv2d:
    """2-D convolution (cross-correlation) via im2col and one matmul."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 pad: int | None = None, rng: np.random.Generator | None = None):
        if rng is None:
            raise DataError("conv2d needs an rng for initialization")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, kernel, stride
        self.pad = kernel // 2 if pad is None else pad
        fan_in = c_in * kernel * kernel
        self.w = uniform_init(rng, (c_out, fan_in), fan_in)
        self.b = uniform_init(rng, (c_out,), fan_in)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def _im2col(self, xp: np.ndarray, oh: int, ow: int) -> np.ndarray:
        b, c, _, _ = xp.shape
        k, s = self.k, self.stride
        cols = np.empty((b, c, k, k, oh, ow), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
        return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * k * k)

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        if c != self.c_in:
            raise DataError(f"conv2d: expected {self.c_in} input channels, got {c}")
        k, s, p = self.k, self.stride, self.pad
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise DataError(f"conv2d: input {h}x{w} too small for kernel {k} stride {s}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = self._im2col(xp, oh, ow)
        self._cache = (cols, x.shape, oh, ow)
        out = cols @ self.w.T + self.b
        return out.reshape(b, oh, ow, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, x_shape, oh, ow = self._cache
        b, c, h, w = x_shape
        k, s, p = self.k, self.stride, self.pad
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.dw += d2.T @ cols
        self.db += d2.sum(axis=0)
        dcols = (d2 @ self.w).reshape(b, oh, ow, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w] if p else dxp

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}


class _Pool2d:
    """Base for non-overlapping k x k pooling (stride = kernel)."""

    def __init__(self, k: int = 2):
        self.k = k

    def _windows(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise DataError(f"pool: spatial dims {h}x{w} not divisible by {k}")
        return x.reshape(b, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(b, c, h // k, w // k, k * k)

    def params(self):
        return {}

    def grads(self):
        return {}


class MaxPool2d(_Pool2d):
    def forward(self, x: np.ndarray) -> np.ndarray:
        win = self._windows(x)
        self._idx = win.argmax(axis=-1)  # first max wins ties: deterministic
        self._x_shape = x.shape
        return np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, c, h, w = self._x_shape
        k = self.k
        dwin = np.zeros((b, c, h // k, w // k, k * k), dtype=DTYPE)
        np.put_along_axis(dwin, self._idx[..., None], dout[..., None], axis=-1)
        return dwin.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5) \
                   .reshape(b, c, h, w)


class AvgPool2d(_Pool2d):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x_shape = x.shape
        return self._windows(x).mean(axis=-1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, c, h, w = self._x_shape
        k = self.k
        dwin = np.broadcast_to(dout[..., None] / (k * k), dout.shape + (k * k,))
        return dwin.reshape(b, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5) \
                   .reshape(b, c, h, w)


class GlobalAvgPool:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, c, h, w = self._x_shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), (b, c, h, w)).copy()

    def params(self):
        return {}

    def grads(self):
        return {}


class Embedding:
    def __init__(self, n_words: int, dim: int, rng: np.random.Generator):
        self.n_words, self.dim = n_words, dim
        self.w = uniform_init(rng, (n_words, dim), dim)
        self.dw = np.zeros_like(self.w)

    def forward(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_words):
            raise DataError(f"embedding: token index out of range [0, {self.n_words})")
        self._idx = idx
        return self.w[idx]

    def backward(self, dout: np.ndarray) -> np.ndarray | None:
        np.add.at(self.dw, self._idx, dout)
        return None

    def params(self):
        return {"w": self.w}

    def grads(self):
        return {"w": self.dw}


class LSTM:
    """Single-layer LSTM over full sequences, zero initial state.

    Gate order in the packed weight matrices is [input, forget, candidate,
    output].  ``self.last_cells`` holds the cell-state trajectory of the
    most recent forward pass (used by the gating-algebra tests).
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_in, self.n_hidden = n_in, n_hidden
        fan_in = n_in + n_hidden
        self.wx = uniform_init(rng, (n_in, 4 * n_hidden), fan_in)
        self.wh = uniform_init(rng, (n_hidden, 4 * n_hidden), fan_in)
        self.b = uniform_init(rng, (4 * n_hidden,), fan_in)
        self.dwx = np.zeros_like(self.wx)
        self.dwh = np.zeros_like(self.wh)
        self.db = np.zeros_like(self.b)

    def _gates(self, z: np.ndarray):
        hs = self.n_hidden
        i = _sigmoid(z[:, :hs])
        f = _sigmoid(z[:, hs : 2 * hs])
        g = np.tanh(z[:, 2 * hs : 3 * hs])
        o = _sigmoid(z[:, 3 * hs :])
        return i, f, g, o

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, t, n_in = x.shape
        if n_in != self.n_in:
            raise DataError(f"lstm: expected input dim {self.n_in}, got {n_in}")
        hs = self.n_hidden
        h = np.zeros((b, hs), dtype=DTYPE)
        c = np.zeros((b, hs), dtype=DTYPE)
        outs = np.empty((b, t, hs), dtype=DTYPE)
        cells = np.empty((b, t, hs), dtype=DTYPE)
        steps = []
        for step in range(t):
            xt = x[:, step, :]
            z = xt @ self.wx + h @ self.wh + self.b
            i, f, g, o = self._gates(z)
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h_prev = h
            h = o * tc
            outs[:, step, :] = h
            cells[:, step, :] = c
            steps.append((xt, h_prev, c_prev, i, f, g, o, tc))
        self._steps = steps
        self.last_cells = cells
        return outs

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, t, hs = dout.shape
        dx = np.empty((b, t, self.n_in), dtype=DTYPE)
        dh_carry = np.zeros((b, hs), dtype=DTYPE)
        dc_carry = np.zeros((b, hs), dtype=DTYPE)
        for step in range(t - 1, -1, -1):
            xt, h_prev, c_prev, i, f, g, o, tc = self._steps[step]
            dh = dout[:, step, :] + dh_carry
            do = dh * tc
            dc = dc_carry + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_carry = dc * f
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
                axis=1,
            )
            self.dwx += xt.T @ dz
            self.dwh += h_prev.T @ dz
            self.db += dz.sum(axis=0)
            dx[:, step, :] = dz @ self.wx.T
            dh_carry = dz @ self.wh.T
        return dx

    def step(self, xt: np.ndarray, h: np.ndarray, c: np.ndarray):
        """One cache-free step for autoregressive generation."""
        z = xt @ self.wx + h @ self.wh + self.b
        i, f, g, o = self._gates(z)
        c_new = f * c + i * g
        return o * np.tanh(c_new), c_new

    def params(self):
        return {"wx": self.wx, "wh": self.wh, "b": self.b}

    def grads(self):
        return {"wx": self.dwx, "wh": self.dwh, "b": self.db}


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean NLL over all rows; returns (loss, dloss/dlogits).

    logits: (N, V), targets: (N,) int.  Raises on non-finite logits or
    out-of-range targets.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets)
    if not np.isfinite(logits).all():
        raise DataError("cross entropy: non-finite logits")
    n, v = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise DataError(f"cross entropy: target out of range [0, {v})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def zero_grads(layers) -> None:
    for layer in layers:
        for g in layer.grads().values():
            g[...] = 0.0


def collect(layers: dict, which: str) -> dict[str, np.ndarray]:
    """Flatten ``{prefix: layer}`` into ``{"prefix.name": array}``."""
    out: dict[str, np.ndarray] = {}
    for prefix, layer in layers.items():
        table = layer.params() if which == "params" else layer.grads()
        for name, arr in table.items():
            out[f"{prefix}.{name}"] = arr
    return out
