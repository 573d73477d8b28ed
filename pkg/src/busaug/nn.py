"""Minimal NumPy layer library with hand-written backward passes.

All computation is plain NumPy with a fixed reduction order, which keeps
training and sampling bit-reproducible across runs, processes, and BLAS
thread counts. Layers read their weights through a ParamStore so low-rank
adapters can be attached to any 2-D weight by name without touching layer
code.

Conventions:
  * images are (N, C, H, W) arrays, conditioning vectors (N, D)
  * ``forward(x, cache)`` records intermediates under the layer's unique
    name when ``cache`` is a dict; ``backward(dy, cache, grads)`` returns
    dx and accumulates parameter gradients into ``grads``
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ParamStore:
    """Named parameter tensors plus optional low-rank adapter deltas.

    Adapter arrays are exposed as pseudo-parameters named
    ``"<target>::lora_A"`` / ``"<target>::lora_B"`` so optimizers and
    freeze selectors treat them uniformly with base parameters.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.adapters: dict[str, dict] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        return self.params[name]

    def names(self) -> list[str]:
        names = list(self.params)
        for target, ad in self.adapters.items():
            names.append(f"{target}::lora_A")
            names.append(f"{target}::lora_B")
        return names

    def get(self, name: str) -> np.ndarray:
        if "::lora_" in name:
            target, which = name.split("::lora_")
            return self.adapters[target][which]
        return self.params[name]

    def set(self, name: str, value: np.ndarray) -> None:
        self.get(name)[...] = value

    def all_params(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for target, ad in self.adapters.items():
            out[f"{target}::lora_A"] = ad["A"]
            out[f"{target}::lora_B"] = ad["B"]
        return out

    def attach_adapter(self, target: str, A: np.ndarray, B: np.ndarray, rank: int, alpha: float) -> None:
        if target not in self.params:
            raise KeyError(f"no parameter named {target!r}")
        if self.params[target].ndim != 2:
            raise ValueError(f"adapter target {target!r} is not a 2-D weight")
        if target in self.adapters:
            raise ValueError(f"adapter already attached to {target!r}")
        self.adapters[target] = {
            "A": np.ascontiguousarray(A, dtype=self.dtype),
            "B": np.ascontiguousarray(B, dtype=self.dtype),
            "rank": int(rank),
            "alpha": float(alpha),
        }

    def adapter_delta(self, target: str) -> np.ndarray:
        ad = self.adapters[target]
        return (ad["alpha"] / ad["rank"]) * (ad["B"] @ ad["A"])

    def freeze_base(self) -> None:
        """Flag every current base parameter as frozen (adapter names exempt)."""
        self.frozen.update(self.params)

    def is_frozen(self, name: str) -> bool:
        return name in self.frozen

    def effective(self, name: str) -> np.ndarray:
        w = self.params[name]
        if name in self.adapters:
            return w + self.adapter_delta(name)
        return w

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.all_params().items()}


def _accumulate(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(dtype)


class Linear:
    """Dense map ``y = x @ W.T + b`` with an optionally adapted weight."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, init_scale: float = 1.0, bias: bool = True):
        self.store = store
        self.name = name
        self.wname = f"{name}.weight"
        self.bname = f"{name}.bias" if bias else None
        w = init_scale * he_normal(rng, (d_out, d_in), d_in, store.dtype)
        store.add(self.wname, w)
        if bias:
            store.add(self.bname, np.zeros(d_out, dtype=store.dtype))

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        w = self.store.effective(self.wname)
        y = x @ w.T
        if self.bname is not None:
            y += self.store.params[self.bname]
        if cache is not None:
            cache[self.name] = x
        return y

    def backward(self, dy: np.ndarray, cache: dict, grads: dict) -> np.ndarray:
        x = cache[self.name]
        dw = dy.T @ x
        _accumulate(grads, self.wname, dw)
        if self.bname is not None:
            _accumulate(grads, self.bname, dy.sum(axis=0))
        if self.wname in self.store.adapters:
            ad = self.store.adapters[self.wname]
            s = ad["alpha"] / ad["rank"]
            _accumulate(grads, f"{self.wname}::lora_A", s * (ad["B"].T @ dw))
            _accumulate(grads, f"{self.wname}::lora_B", s * (dw @ ad["A"].T))
        return dy @ self.store.effective(self.wname)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, xshape: tuple[int, ...], k: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    dwin = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


class Conv2d:
    """3x3-style convolution via im2col; weight shape (c_out, c_in, k, k)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, k: int = 3, stride: int = 1, pad: int = 1,
                 init_scale: float = 1.0):
        self.store = store
        self.name = name
        self.wname = f"{name}.weight"
        self.bname = f"{name}.bias"
        self.k, self.stride, self.pad = k, stride, pad
        self.c_in, self.c_out = c_in, c_out
        fan_in = c_in * k * k
        w = init_scale * he_normal(rng, (c_out, c_in, k, k), fan_in, store.dtype)
        store.add(self.wname, w)
        store.add(self.bname, np.zeros(c_out, dtype=store.dtype))

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        n = x.shape[0]
        cols, ho, wo = _im2col(x, self.k, self.stride, self.pad)
        wm = self.store.params[self.wname].reshape(self.c_out, -1)
        y = cols @ wm.T + self.store.params[self.bname]
        y = y.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        if cache is not None:
            cache[self.name] = (cols, x.shape, ho, wo)
        return np.ascontiguousarray(y)

    def backward(self, dy: np.ndarray, cache: dict, grads: dict) -> np.ndarray:
        cols, xshape, ho, wo = cache[self.name]
        n = xshape[0]
        dym = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, self.c_out)
        wm = self.store.params[self.wname].reshape(self.c_out, -1)
        _accumulate(grads, self.wname, (dym.T @ cols).reshape(self.store.params[self.wname].shape))
        _accumulate(grads, self.bname, dym.sum(axis=0))
        dcols = dym @ wm
        return _col2im(dcols, xshape, self.k, self.stride, self.pad, ho, wo)


class GroupNorm:
    """Group normalization over (C/g, H, W) with per-channel affine."""

    EPS = 1e-5

    def __init__(self, store: ParamStore, name: str, groups: int, channels: int):
        if channels % groups:
            raise ValueError(f"{name}: channels {channels} not divisible by groups {groups}")
        self.store = store
        self.name = name
        self.groups = groups
        self.channels = channels
        self.gname = f"{name}.gamma"
        self.bname = f"{name}.beta"
        store.add(self.gname, np.ones(channels, dtype=store.dtype))
        store.add(self.bname, np.zeros(channels, dtype=store.dtype))

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        n, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(n, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = ((xg - mu) * inv).reshape(n, c, h, w)
        gamma = self.store.params[self.gname]
        y = xhat * gamma[None, :, None, None] + self.store.params[self.bname][None, :, None, None]
        if cache is not None:
            cache[self.name] = (xhat, inv)
        return y

    def backward(self, dy: np.ndarray, cache: dict, grads: dict) -> np.ndarray:
        xhat, inv = cache[self.name]
        n, c, h, w = dy.shape
        g = self.groups
        gamma = self.store.params[self.gname]
        _accumulate(grads, self.gname, (dy * xhat).sum(axis=(0, 2, 3)))
        _accumulate(grads, self.bname, dy.sum(axis=(0, 2, 3)))
        dxhat = (dy * gamma[None, :, None, None]).reshape(n, g, -1)
        xhatg = xhat.reshape(n, g, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xhatg).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - m1 - xhatg * m2)
        return dx.reshape(n, c, h, w)


class SiLU:
    """x * sigmoid(x); stateless."""

    def __init__(self, name: str):
        self.name = name

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        s = 1.0 / (1.0 + np.exp(-x))
        if cache is not None:
            cache[self.name] = (x, s)
        return x * s

    def backward(self, dy: np.ndarray, cache: dict, grads: dict) -> np.ndarray:
        x, s = cache[self.name]
        return dy * (s * (1.0 + x * (1.0 - s)))


class ReLU:
    def __init__(self, name: str):
        self.name = name

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        y = np.maximum(x, 0.0)
        if cache is not None:
            cache[self.name] = x > 0
        return y

    def backward(self, dy: np.ndarray, cache: dict, grads: dict) -> np.ndarray:
        return dy * cache[self.name]


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = dy.shape
    return dy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dy: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    return np.broadcast_to(dy[:, :, None, None], dy.shape + (h, w)).reshape(
        dy.shape[0], dy.shape[1], h, w
    ) / (h * w)


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Standard transformer-style timestep embedding; ``dim`` must be even."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and gradient w.r.t. logits."""
    n = logits.shape[0]
    p = softmax(logits)
    eps = np.finfo(p.dtype).tiny
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


class Adam:
    """Adam with bias correction, updating parameters in place.

    Only parameters whose names pass ``selector`` are ever touched, which
    keeps excluded parameters bit-identical through training. With no
    selector, frozen parameters are skipped.
    """

    def __init__(self, store: ParamStore, learning_rate: float, selector=None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        names = store.names()
        if selector is None:
            self.names = [n for n in names if not store.is_frozen(n)]
        else:
            self.names = [n for n in names if selector(n)]
        self.m = {n: np.zeros_like(store.get(n)) for n in self.names}
        self.v = {n: np.zeros_like(store.get(n)) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name in self.names:
            if name not in grads:
                continue
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = self.store.get(name)
            p -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(p.dtype)
