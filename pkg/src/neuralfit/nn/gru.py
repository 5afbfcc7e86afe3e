"""GRU cell with layer normalization on the input and recurrent projections.

    z  = sigmoid(LN(Wz x) + LN(Uz h) + bz)
    r  = sigmoid(LN(Wr x) + LN(Ur h) + br)
    hh = tanh(LN(Wh x) + LN(Uh (r * h)) + bh)
    h' = (1 - z) * h + z * hh
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .layers import LN_EPS, Module, glorot_std, layernorm_backward, layernorm_forward

_GATES = ("z", "r", "h")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRUCell(Module):
    def __init__(self, n_in: int, hidden: int, eps: float = LN_EPS):
        super().__init__()
        self.n_in, self.hidden, self.eps = n_in, hidden, eps
        P = self.params
        for g in _GATES:
            P[f"W{g}"] = np.zeros((hidden, n_in))
            P[f"U{g}"] = np.zeros((hidden, hidden))
            P[f"b{g}"] = np.zeros(hidden)
            for src in "WU":
                P[f"ln{src}{g}_scale"] = np.ones(hidden)
                P[f"ln{src}{g}_offset"] = np.zeros(hidden)

    def reset(self, rng):
        P = self.params
        for g in _GATES:
            P[f"W{g}"][...] = rng.normal(0.0, glorot_std(self.n_in, self.hidden), P[f"W{g}"].shape)
            P[f"U{g}"][...] = rng.normal(0.0, glorot_std(self.hidden, self.hidden), P[f"U{g}"].shape)
            P[f"b{g}"][...] = 0.0
            for src in "WU":
                P[f"ln{src}{g}_scale"][...] = 1.0
                P[f"ln{src}{g}_offset"][...] = 0.0

    def _ln(self, v, name):
        P = self.params
        return layernorm_forward(v, P[f"ln{name}_scale"], P[f"ln{name}_offset"], self.eps)

    def forward(self, x, h):
        P = self.params
        if x.shape[-1] != self.n_in or h.shape[-1] != self.hidden:
            raise ShapeMismatch(f"GRU expects ({self.n_in}, {self.hidden}) features, "
                                f"got ({x.shape[-1]}, {h.shape[-1]})")
        lz_x, cz_x = self._ln(x @ P["Wz"].T, "Wz")
        lz_h, cz_h = self._ln(h @ P["Uz"].T, "Uz")
        z = sigmoid(lz_x + lz_h + P["bz"])
        lr_x, cr_x = self._ln(x @ P["Wr"].T, "Wr")
        lr_h, cr_h = self._ln(h @ P["Ur"].T, "Ur")
        r = sigmoid(lr_x + lr_h + P["br"])
        rh = r * h
        lh_x, ch_x = self._ln(x @ P["Wh"].T, "Wh")
        lh_h, ch_h = self._ln(rh @ P["Uh"].T, "Uh")
        hh = np.tanh(lh_x + lh_h + P["bh"])
        h_next = (1.0 - z) * h + z * hh
        cache = (x, h, z, r, rh, hh, cz_x, cz_h, cr_x, cr_h, ch_x, ch_h)
        return h_next, cache

    def backward(self, cache, gh_next):
        """Return ``(gx, gh_prev, grads)``."""
        P = self.params
        x, h, z, r, rh, hh, cz_x, cz_h, cr_x, cr_h, ch_x, ch_h = cache
        grads = {}
        x2 = x.reshape(-1, self.n_in)
        gh = gh_next * (1.0 - z)
        g_ah = gh_next * z * (1.0 - hh * hh)
        g_az = gh_next * (hh - h) * z * (1.0 - z)

        def through(name, cache_ln, g_a, inp, mat):
            g_pre, gs, go = layernorm_backward(cache_ln, g_a, P[f"ln{name}_scale"])
            grads[f"ln{name}_scale"] = gs
            grads[f"ln{name}_offset"] = go
            grads[name] = g_pre.reshape(-1, self.hidden).T @ inp.reshape(-1, inp.shape[-1])
            return g_pre @ P[mat]

        gx = through("Wh", ch_x, g_ah, x2, "Wh").reshape(x.shape)
        g_rh = through("Uh", ch_h, g_ah, rh, "Uh")
        grads["bh"] = g_ah.reshape(-1, self.hidden).sum(axis=0)
        gh = gh + g_rh * r
        g_ar = g_rh * h * r * (1.0 - r)

        gx = gx + through("Wr", cr_x, g_ar, x2, "Wr").reshape(x.shape)
        gh = gh + through("Ur", cr_h, g_ar, h, "Ur")
        grads["br"] = g_ar.reshape(-1, self.hidden).sum(axis=0)

        gx = gx + through("Wz", cz_x, g_az, x2, "Wz").reshape(x.shape)
        gh = gh + through("Uz", cz_h, g_az, h, "Uz")
        grads["bz"] = g_az.reshape(-1, self.hidden).sum(axis=0)
        return gx, gh, grads


def gru_forward(cell: GRUCell, x, h_prev):
    return cell.forward(x, h_prev)


def gru_backward(cell: GRUCell, cache, gh_next):
    return cell.backward(cache, gh_next)
