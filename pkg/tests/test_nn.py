import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralfit.errors import BadConfig, ConfigHashMismatch, FormatError, ShapeMismatch
from neuralfit.nn import (MLP, AdamState, Checkpoint, GRUCell, LayerNorm, Linear, ResMLP, adam_step, dropout,
                          glorot_std, gru_backward, gru_forward, init_weights, layernorm_backward,
                          layernorm_forward, linear_backward, linear_forward, load_checkpoint, save_checkpoint)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def fd_param_check(module, loss, h=1e-6, max_entries=40, rng=None):
    """Compare analytic parameter gradients against central differences on a sample of entries."""
    rng = rng or np.random.default_rng(0)
    _, grads = loss(module)
    worst = 0.0
    for name, p in module.named_params().items():
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        num = np.empty(len(picks))
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + h
            a = loss(module)[0]
            flat[i] = old - h
            b = loss(module)[0]
            flat[i] = old
            num[j] = (a - b) / (2 * h)
        ana = grads[name].reshape(-1)[picks]
        scale = max(np.max(np.abs(num)), 1e-3)
        worst = max(worst, np.max(np.abs(ana - num)) / scale)
    return worst


def test_linear_identity_and_zero_grad(rng):
    x = rng.normal(size=(4, 5))
    y, cache = linear_forward(x, np.eye(5), np.zeros(5))
    assert np.array_equal(y, x)
    gx, gW, gb = linear_backward(cache, np.zeros((4, 5)), np.eye(5))
    assert not gW.any() and not gb.any()
    with pytest.raises(ShapeMismatch):
        linear_forward(np.ones((2, 3)), np.eye(5), np.zeros(5))


def test_linear_and_mlp_gradients(rng):
    x = rng.normal(size=(6, 5))
    G = rng.normal(size=(6, 3))
    for net in (Linear(5, 3), MLP([5, 8, 7, 3]), MLP([5, 8, 3], norm=False), ResMLP(5, 8, 2, 3)):
        init_weights(net, 1)
        for mod in net.modules():      # move away from ReLU kinks and zero biases
            for k, v in mod.params.items():
                v += 0.1 * rng.normal(size=v.shape)

        def loss(m):
            y, c = m.forward(x)
            gx, grads = m.backward(c, G)
            return float(np.sum(y * G)), grads

        assert fd_param_check(net, loss) < 1e-6
        y, c = net.forward(x)
        gx, _ = net.backward(c, G)
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += 1e-6
            xm[i] -= 1e-6
            num[i] = (np.sum(net.forward(xp)[0] * G) - np.sum(net.forward(xm)[0] * G)) / 2e-6
        assert rel_err(gx, num) < 1e-6


def test_layernorm_examples(rng):
    y, _ = layernorm_forward(np.full(6, 3.0), np.ones(6), np.full(6, 0.25))
    assert np.allclose(y, 0.25, atol=1e-12)
    x = rng.normal(size=50)
    x = (x - x.mean()) / x.std()
    # with eps the normalized vector is scaled by 1/sqrt(1 + eps)
    y, _ = layernorm_forward(x, np.ones(50), np.zeros(50))
    assert np.max(np.abs(y - x / np.sqrt(1 + 1e-5))) < 1e-9
    assert np.max(np.abs(y * np.sqrt(1 + 1e-5) - x)) < 1e-9
    with pytest.raises(ShapeMismatch):
        layernorm_forward(np.ones((3, 1)), np.ones(1), np.zeros(1))
    with pytest.raises(BadConfig):
        LayerNorm(4, eps=0.0)


def test_layernorm_gradient(rng):
    x = rng.normal(size=(3, 7))
    s, o = rng.normal(size=7), rng.normal(size=7)
    G = rng.normal(size=(3, 7))
    y, c = layernorm_forward(x, s, o)
    gx, gs, go = layernorm_backward(c, G, s)
    from conftest import central_diff
    assert rel_err(gx, central_diff(lambda v: np.sum(layernorm_forward(v, s, o)[0] * G), x)) < 1e-6
    assert rel_err(gs, central_diff(lambda v: np.sum(layernorm_forward(x, v, o)[0] * G), s)) < 1e-6
    assert rel_err(go, central_diff(lambda v: np.sum(layernorm_forward(x, s, v)[0] * G), o)) < 1e-6


def test_gru_closed_forms(rng):
    cell = GRUCell(4, 6)
    for k, v in cell.params.items():
        v[...] = 0.0
    h = rng.normal(size=(3, 6))
    out, _ = gru_forward(cell, rng.normal(size=(3, 4)), h)
    assert np.allclose(out, 0.5 * h, atol=1e-15)
    out, _ = gru_forward(cell, np.zeros((1, 4)), np.zeros((1, 6)))
    assert not out.any()
    with pytest.raises(ShapeMismatch):
        gru_forward(cell, np.zeros((1, 5)), np.zeros((1, 6)))


def test_gru_gradients(rng):
    cell = GRUCell(4, 5)
    init_weights(cell, 3)
    for v in cell.params.values():
        v += 0.1 * rng.normal(size=v.shape)
    x = rng.normal(size=(3, 4))
    h = rng.normal(size=(3, 5))
    G = rng.normal(size=(3, 5))

    def loss(m):
        y, c = m.forward(x, h)
        _, _, grads = m.backward(c, G)
        return float(np.sum(y * G)), grads

    assert fd_param_check(cell, loss, max_entries=30) < 1e-6
    y, c = gru_forward(cell, x, h)
    gx, gh, _ = gru_backward(cell, c, G)
    from conftest import central_diff
    assert rel_err(gx, central_diff(lambda v: np.sum(cell.forward(v, h)[0] * G), x)) < 1e-6
    assert rel_err(gh, central_diff(lambda v: np.sum(cell.forward(x, v)[0] * G), h)) < 1e-6


def test_gru_unroll_gradient(rng):
    """Five unrolled steps of a two-layer stack, end to end."""
    cells = [GRUCell(3, 4), GRUCell(4, 4)]
    for i, c in enumerate(cells):
        init_weights(c, i)
    xs = rng.normal(size=(5, 2, 3))
    G = rng.normal(size=(2, 4))

    def run(xs_, h0):
        hs = [h0.copy(), h0.copy()]
        caches = []
        for t in range(5):
            inp = xs_[t]
            step = []
            for k, c in enumerate(cells):
                hs[k], ck = c.forward(inp, hs[k])
                step.append(ck)
                inp = hs[k]
            caches.append(step)
        return hs, caches

    h0 = rng.normal(size=(2, 4))
    hs, caches = run(xs, h0)
    # backward
    gx = np.zeros_like(xs)
    gh = [np.zeros((2, 4)), G.copy()]
    grads = [c.zero_grads() for c in cells]
    for t in range(4, -1, -1):
        g_up = np.zeros((2, 4))
        for k in (1, 0):
            gin, ghp, gr = cells[k].backward(caches[t][k], gh[k] + g_up)
            for n, v in gr.items():
                grads[k][n] += v
            gh[k] = ghp
            g_up = gin
        gx[t] = g_up
    from conftest import central_diff
    num = central_diff(lambda v: np.sum(run(v, h0)[0][1] * G), xs)
    assert rel_err(gx, num) < 1e-5
    W = cells[0].params["Uz"]
    num = central_diff(lambda v: (W.__setitem__(Ellipsis, v), np.sum(run(xs, h0)[0][1] * G))[1], W.copy())
    assert rel_err(grads[0]["Uz"], num) < 1e-5


def test_dropout(rng):
    x = rng.normal(size=1000)
    assert dropout(x, 0.0, True, rng)[0] is x
    assert dropout(x, 0.5, False, rng)[0] is x
    big = np.full(100000, 2.0)
    y, mask = dropout(big, 0.5, True, rng)
    assert abs(y.mean() - 2.0) < 0.02
    assert set(np.unique(y)) <= {0.0, 4.0}
    for p in (-0.1, 1.0):
        with pytest.raises(BadConfig):
            dropout(x, p, True, rng)


def test_adam_examples(rng):
    p = {"w": rng.normal(size=5)}
    before = p["w"].copy()
    st_ = AdamState(lr=0.1)
    adam_step(p, {"w": np.zeros(5)}, st_)
    assert np.array_equal(p["w"], before)
    st_ = AdamState(lr=0.1)
    g = rng.normal(size=5)
    adam_step(p, {"w": g}, st_)
    assert np.max(np.abs((before - p["w"]) - 0.1 * g / (np.abs(g) + 1e-8))) < 1e-12
    with pytest.raises(ShapeMismatch):
        adam_step(p, {"w": np.zeros(4)}, st_)
    with pytest.raises(BadConfig):
        AdamState(lr=-1)


def test_adam_convex_quadratic(rng):
    A = rng.normal(size=(6, 6))
    H = A @ A.T + np.eye(6)
    x = {"x": rng.normal(size=6)}
    loss0 = 0.5 * x["x"] @ H @ x["x"]
    st_ = AdamState(lr=0.1)
    for _ in range(100):
        adam_step(x, {"x": H @ x["x"]}, st_)
    assert 0.5 * x["x"] @ H @ x["x"] < loss0 / 100


def test_init_weights():
    a, b = MLP([10, 32, 20], out_gain=0.01), MLP([10, 32, 20], out_gain=0.01)
    init_weights(a, 7)
    init_weights(b, 7)
    for k, v in a.named_params().items():
        assert np.array_equal(v, b.named_params()[k])
    big = Linear(100, 100, gain=0.01)
    init_weights(big, 0)
    ratio = big.params["W"].std() / glorot_std(100, 100, 0.01)
    assert 0.8 < ratio < 1.2
    assert np.all(a.children["fc0"].params["W"] != 0)
    assert a.out_layer.params["W"].std() < 0.05 * a.children["fc0"].params["W"].std()


def test_checkpoint_roundtrip(tmp_path, rng):
    net = MLP([4, 6, 2])
    init_weights(net, 0)
    st_ = AdamState(lr=1e-3)
    adam_step(net.named_params(), {k: rng.normal(size=v.shape) for k, v in net.named_params().items()}, st_)
    ck = Checkpoint(net.named_params(), st_, {"config_hash": "abc", "step": 1}, {"mean": np.arange(3.0)})
    path = tmp_path / "c.mfit"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.meta["config_hash"] == "abc" and back.adam.step == 1
    for k, v in ck.params.items():
        assert np.array_equal(back.params[k], v)
        assert np.array_equal(back.adam.m[k], st_.m[k]) and np.array_equal(back.adam.v[k], st_.v[k])
    save_checkpoint(tmp_path / "d.mfit", back)
    assert (tmp_path / "d.mfit").read_bytes() == path.read_bytes()
    with pytest.warns(ConfigHashMismatch):
        load_checkpoint(path, config_hash="zzz")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path, config_hash="abc")
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_layernorm_moments_property(d, seed):
    x = np.random.default_rng(seed).normal(size=(3, d)) * 10
    y, _ = layernorm_forward(x, np.ones(d), np.zeros(d))
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)
    assert np.all(y.var(axis=-1) <= 1 + 1e-12)
