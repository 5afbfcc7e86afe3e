"""Dense layers with explicit forward/backward passes.

Every ``forward`` returns ``(y, cache)`` and the matching ``backward`` takes
``(cache, gy)`` and returns ``(gx, grads)`` where ``grads`` is a flat dict keyed
like :meth:`Module.named_params`.  Inputs may carry any number of leading axes.
"""

from __future__ import annotations

import numpy as np

from ..errors import BadConfig, ShapeMismatch

LN_EPS = 1e-5


class Module:
    """Container of named parameter arrays and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_params(f"{prefix}{name}/"))
        return out

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    def load(self, flat: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy values from a flat dict into this module's arrays (in place)."""
        for k, v in self.named_params(prefix).items():
            if k not in flat:
                raise ShapeMismatch(f"missing parameter {k!r}")
            if flat[k].shape != v.shape:
                raise ShapeMismatch(f"parameter {k!r} has shape {flat[k].shape}, expected {v.shape}")
            v[...] = flat[k]

    def reset(self, rng: np.random.Generator) -> None:
        pass

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.named_params().items()}


def accumulate(total: dict, grads: dict, prefix: str = "") -> None:
    for k, v in grads.items():
        total[prefix + k] += v


def prefixed(grads: dict, prefix: str) -> dict:
    return {prefix + k: v for k, v in grads.items()}


def glorot_std(fan_in: int, fan_out: int, gain: float = 1.0) -> float:
    return gain * np.sqrt(2.0 / (fan_in + fan_out))


# --------------------------------------------------------------------------
# Linear


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, gain: float = 1.0):
        super().__init__()
        self.n_in, self.n_out, self.gain = n_in, n_out, gain
        self.params["W"] = np.zeros((n_out, n_in))
        self.params["b"] = np.zeros(n_out)

    def reset(self, rng):
        W = self.params["W"]
        W[...] = rng.normal(0.0, glorot_std(self.n_in, self.n_out, self.gain), W.shape)
        self.params["b"][...] = 0.0

    def forward(self, x):
        return linear_forward(x, self.params["W"], self.params["b"])

    def backward(self, cache, gy):
        gx, gW, gb = linear_backward(cache, gy, self.params["W"])
        return gx, {"W": gW, "b": gb}


def linear_forward(x, W, b):
    x = np.asarray(x, dtype=W.dtype)
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"linear layer expects {W.shape[1]} inputs, got {x.shape[-1]}")
    return x @ W.T + b, x


def linear_backward(x, gy, W):
    if gy.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"upstream gradient has {gy.shape[-1]} entries, expected {W.shape[0]}")
    gx = gy @ W
    gy2 = gy.reshape(-1, W.shape[0])
    gW = gy2.T @ x.reshape(-1, W.shape[1])
    gb = gy2.sum(axis=0)
    return gx, gW, gb


# --------------------------------------------------------------------------
# Layer normalization


def layernorm_forward(x, scale, offset, eps: float = LN_EPS):
    """Normalize over the last axis, then apply scale and offset."""
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise ShapeMismatch("layer norm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * scale + offset, (xhat, inv)


def layernorm_backward(cache, gy, scale):
    xhat, inv = cache
    D = xhat.shape[-1]
    gxhat = gy * scale
    gx = inv / D * (D * gxhat - gxhat.sum(axis=-1, keepdims=True)
                    - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True))
    lead = tuple(range(gy.ndim - 1))
    return gx, np.sum(gy * xhat, axis=lead), np.sum(gy, axis=lead)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        if not eps > 0:
            raise BadConfig("layer norm epsilon must be positive")
        self.eps = eps
        self.params["scale"] = np.ones(dim)
        self.params["offset"] = np.zeros(dim)

    def reset(self, rng):
        self.params["scale"][...] = 1.0
        self.params["offset"][...] = 0.0

    def forward(self, x):
        return layernorm_forward(x, self.params["scale"], self.params["offset"], self.eps)

    def backward(self, cache, gy):
        gx, gs, go = layernorm_backward(cache, gy, self.params["scale"])
        return gx, {"scale": gs, "offset": go}


# --------------------------------------------------------------------------
# Dropout


def dropout(x, p: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout; returns ``(y, mask)`` with ``mask`` None when inactive."""
    if not 0.0 <= p < 1.0:
        raise BadConfig(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    keep = (rng.random(np.shape(x)) >= p) / (1.0 - p)
    return x * keep, keep


def dropout_backward(mask, gy):
    return gy if mask is None else gy * mask


# --------------------------------------------------------------------------
# MLPs


class MLP(Module):
    """Linear -> [LayerNorm] -> ReLU blocks followed by a linear output layer."""

    def __init__(self, sizes, norm: bool = True, out_gain: float = 1.0):
        super().__init__()
        if len(sizes) < 2:
            raise BadConfig("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.norm = norm
        n = len(sizes) - 1
        for i in range(n):
            last = i == n - 1
            self.children[f"fc{i}"] = Linear(sizes[i], sizes[i + 1], out_gain if last else 1.0)
            if not last and norm:
                self.children[f"ln{i}"] = LayerNorm(sizes[i + 1])
        self.n_layers = n

    @property
    def out_layer(self) -> Linear:
        return self.children[f"fc{self.n_layers - 1}"]

    def forward(self, x):
        caches = []
        h = x
        for i in range(self.n_layers):
            h, c_fc = self.children[f"fc{i}"].forward(h)
            c_ln = None
            if i < self.n_layers - 1:
                if self.norm:
                    h, c_ln = self.children[f"ln{i}"].forward(h)
                h = np.maximum(h, 0.0)
            caches.append((c_fc, c_ln, h))
        return h, caches

    def backward(self, caches, gy):
        grads = {}
        g = gy
        for i in range(self.n_layers - 1, -1, -1):
            c_fc, c_ln, h = caches[i]
            if i < self.n_layers - 1:
                g = g * (h > 0)
                if self.norm:
                    g, gl = self.children[f"ln{i}"].backward(c_ln, g)
                    grads.update(prefixed(gl, f"ln{i}/"))
            g, gf = self.children[f"fc{i}"].backward(c_fc, g)
            grads.update(prefixed(gf, f"fc{i}/"))
        return g, grads


class ResMLP(Module):
    """Feed-forward network with an additive skip around every pair of layers."""

    def __init__(self, n_in: int, width: int, n_blocks: int, n_out: int, out_gain: float = 1.0):
        super().__init__()
        self.n_blocks = n_blocks
        self.children["inp"] = Linear(n_in, width)
        for k in range(n_blocks):
            self.children[f"b{k}a"] = Linear(width, width)
            self.children[f"b{k}b"] = Linear(width, width)
        self.children["out"] = Linear(width, n_out, out_gain)

    @property
    def out_layer(self) -> Linear:
        return self.children["out"]

    def forward(self, x):
        h, c0 = self.children["inp"].forward(x)
        h = np.maximum(h, 0.0)
        caches = [(c0, h)]
        for k in range(self.n_blocks):
            a, ca = self.children[f"b{k}a"].forward(h)
            a = np.maximum(a, 0.0)
            b, cb = self.children[f"b{k}b"].forward(a)
            h = np.maximum(h + b, 0.0)
            caches.append((ca, a, cb, h))
        y, cy = self.children["out"].forward(h)
        caches.append(cy)
        return y, caches

    def backward(self, caches, gy):
        grads = {}
        g, go = self.children["out"].backward(caches[-1], gy)
        grads.update(prefixed(go, "out/"))
        for k in range(self.n_blocks - 1, -1, -1):
            ca, a, cb, h = caches[k + 1]
            g = g * (h > 0)
            ga, gb = self.children[f"b{k}b"].backward(cb, g)
            grads.update(prefixed(gb, f"b{k}b/"))
            ga = ga * (a > 0)
            gskip, gA = self.children[f"b{k}a"].backward(ca, ga)
            grads.update(prefixed(gA, f"b{k}a/"))
            g = g + gskip
        c0, h0 = caches[0]
        g = g * (h0 > 0)
        gx, gi = self.children["inp"].backward(c0, g)
        grads.update(prefixed(gi, "inp/"))
        return gx, grads
