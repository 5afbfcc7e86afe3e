"""Learned iterative fitter.

An initializer regresses Theta_0 from the observations; a recurrent network
then proposes a step dTheta_n from ``[g_{n-1}; Theta_{n-1}; encode(D)]`` and a
small head predicts per-parameter weights (lambda, gamma) from the residuals
before and after that step.  The default update is

    Theta_n = Theta_{n-1} + lambda * dTheta_n - gamma * g_{n-1}

with gamma >= 0 through a softplus.  Training unrolls N steps and backprops the
per-step losses; g and the residual inputs of the weight head are constants.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .errors import BadConfig, DegenerateInput, NonFiniteState, ShapeMismatch
from .model import forward, pose_vjp
from .nn import (MLP, AdamState, GRUCell, Linear, Module, ResMLP, adam_step, dropout,
                 dropout_backward, init_weights, sigmoid)
from .nn.checkpoint import Checkpoint
from .residuals import Body2DObs, FaceObs, HMDObs, Task

UPDATE_RULES = ("lm-like", "convex", "normalized", "network-only")
NET_TYPES = ("gru", "resmlp")
IMAGE_CENTER = 256.0
IMAGE_SCALE = 256.0


# --------------------------------------------------------------------------
# Observation encoding


def encoding_map(task: str, n_joints: int = 0, n_landmarks: int = 0, n_shape: int = 0):
    """Documented index map of :func:`encode_observations` as ``((name, start, stop), ...)``."""
    if task == "hmd":
        sizes = [("headset", 12), ("left_wrist", 12), ("right_wrist", 12), ("left_fingertips", 15),
                 ("right_fingertips", 15), ("visible", 2), ("shape", n_shape)]
    elif task == "body2d":
        sizes = [("keypoints", 2 * n_joints), ("confidence", n_joints)]
    elif task == "face":
        sizes = [("landmarks", 2 * n_landmarks)]
    else:
        raise BadConfig(f"unknown task {task!r}")
    out, pos = [], 0
    for name, n in sizes:
        out.append((name, pos, pos + n))
        pos += n
    return tuple(out)


def encode_observations(obs) -> np.ndarray:
    """Flatten a batch of observations into fixed-length rows.

    HMD rows hold the headset and wrist [R | t] blocks, fingertips, visibility
    bits and the known shape; blocks of unseen hands are zero.  2D keypoints are
    centred and scaled by 256 px and zeroed where confidence is 0.  Face
    landmarks are mapped to normalized camera coordinates with the intrinsics.
    """
    if isinstance(obs, HMDObs):
        B = len(obs)
        if obs.wrists.shape != (B, 2, 3, 4) or obs.fingertips.shape != (B, 2, 5, 3):
            raise ShapeMismatch("HMD observation arrays have unexpected shapes")
        v = obs.visible.astype(np.float64)
        wr = obs.wrists * v[:, :, None, None]
        ft = obs.fingertips * v[:, :, None, None]
        return np.concatenate([obs.headset.reshape(B, 12), wr[:, 0].reshape(B, 12), wr[:, 1].reshape(B, 12),
                               ft[:, 0].reshape(B, 15), ft[:, 1].reshape(B, 15), v, obs.shape], axis=1)
    if isinstance(obs, Body2DObs):
        B, J = obs.confidence.shape
        if obs.keypoints.shape != (B, J, 2):
            raise ShapeMismatch("keypoints and confidences disagree")
        on = (obs.confidence > 0)[..., None]
        kp = np.where(on, (obs.keypoints - IMAGE_CENTER) / IMAGE_SCALE, 0.0)
        return np.concatenate([kp.reshape(B, -1), obs.confidence], axis=1)
    if isinstance(obs, FaceObs):
        K = obs.intrinsics
        lm = (obs.landmarks - K[:, None, 2:4]) / K[:, None, 0:2]
        return lm.reshape(len(lm), -1)
    raise ShapeMismatch(f"cannot encode {type(obs).__name__}")


def decode_hmd_encoding(enc, n_shape: int) -> HMDObs:
    """Inverse of the HMD encoding (unseen-hand blocks come back as zeros)."""
    enc = np.asarray(enc)
    B = len(enc)
    idx = {n: slice(a, b) for n, a, b in encoding_map("hmd", n_shape=n_shape)}
    if enc.shape[1] != idx["shape"].stop:
        raise ShapeMismatch("encoding width does not match the HMD map")
    wr = np.stack([enc[:, idx["left_wrist"]], enc[:, idx["right_wrist"]]], 1).reshape(B, 2, 3, 4)
    ft = np.stack([enc[:, idx["left_fingertips"]], enc[:, idx["right_fingertips"]]], 1).reshape(B, 2, 5, 3)
    return HMDObs(enc[:, idx["headset"]].reshape(B, 3, 4), wr, ft, enc[:, idx["visible"]].copy(),
                  enc[:, idx["shape"]].copy())


# --------------------------------------------------------------------------
# Configuration and networks


@dataclass
class FitterConfig:
    n_iters: int = 5
    net_type: str = "gru"
    gru_units: int = 1024
    gru_layers: int = 2
    mlp_units: int = 256
    resmlp_blocks: int = 2
    update_rule: str = "lm-like"
    weights_mode: str = "shared"
    lg_mode: str = "vector"
    dropout: float = 0.5
    norm: bool = True
    out_gain: float = 0.01
    lambda_init: float = 1.0
    gamma_init: float = 0.1

    def validate(self) -> None:
        if self.update_rule not in UPDATE_RULES:
            raise BadConfig(f"update_rule must be one of {UPDATE_RULES}")
        if self.net_type not in NET_TYPES:
            raise BadConfig(f"net_type must be one of {NET_TYPES}")
        if self.weights_mode not in ("shared", "per-step"):
            raise BadConfig("weights_mode must be 'shared' or 'per-step'")
        if self.lg_mode not in ("vector", "scalar"):
            raise BadConfig("lg_mode must be 'vector' or 'scalar'")
        if self.n_iters < 0 or self.gru_units < 1 or self.gru_layers < 1 or self.mlp_units < 1:
            raise BadConfig("network sizes must be positive and n_iters >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig("dropout must lie in [0, 1)")
        if self.gamma_init <= 0:
            raise BadConfig("gamma_init must be positive")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return float(y + np.log(-np.expm1(-y)))


class StepNet(Module):
    """The recurrent update network f: GRU stack (or residual MLP) plus a linear head."""

    def __init__(self, n_in: int, n_out: int, cfg: FitterConfig):
        super().__init__()
        self.kind = cfg.net_type
        if self.kind == "gru":
            self.hidden = [cfg.gru_units] * cfg.gru_layers
            for l in range(cfg.gru_layers):
                self.children[f"gru{l}"] = GRUCell(n_in if l == 0 else cfg.gru_units, cfg.gru_units)
            self.children["head"] = Linear(cfg.gru_units, n_out, cfg.out_gain)
        else:
            self.hidden = []
            self.children["res"] = ResMLP(n_in, cfg.mlp_units, cfg.resmlp_blocks, n_out, cfg.out_gain)


class LGHead(Module):
    """f_{lambda gamma}: an MLP from the two residual vectors to raw (lambda, gamma)."""

    def __init__(self, n_res: int, n_params: int, cfg: FitterConfig):
        super().__init__()
        self.n_out = n_params if cfg.lg_mode == "vector" else 1
        self.lambda_init, self.gamma_init = cfg.lambda_init, cfg.gamma_init
        self.children["mlp"] = MLP([2 * n_res, cfg.mlp_units, cfg.mlp_units, 2 * self.n_out], cfg.norm,
                                   cfg.out_gain)

    def reset(self, rng):
        pass

    def init_bias(self) -> None:
        b = self.children["mlp"].out_layer.params["b"]
        b[: self.n_out] = self.lambda_init
        b[self.n_out:] = softplus_inv(self.gamma_init)


class FitterNetworks(Module):
    """Initializer, hidden-state initializer, step network(s) and weight head(s).

    ``norm`` holds fixed feature statistics (not trained) estimated from the
    training split by :func:`fit_normalizers`.
    """

    def __init__(self, task: Task, cfg: FitterConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.task = task
        lay = task.layout
        self.P = P = lay.size
        self.E = E = self._enc_dim(task)
        self.R = task.n_residuals
        n_in = 2 * P + E
        n_copies = cfg.n_iters if cfg.weights_mode == "per-step" and cfg.n_iters > 0 else 1
        self.n_copies = n_copies
        self.children["init"] = MLP([E, cfg.mlp_units, cfg.mlp_units, P], cfg.norm, cfg.out_gain)
        hid = cfg.gru_units * cfg.gru_layers if cfg.net_type == "gru" else 0
        if hid:
            self.children["h0"] = MLP([E, cfg.mlp_units, cfg.mlp_units, hid], cfg.norm, cfg.out_gain)
        for k in range(n_copies):
            self.children[f"f{k}"] = StepNet(n_in, P, cfg)
            if cfg.update_rule != "network-only":
                self.children[f"lg{k}"] = LGHead(self.R, P, cfg)
        self.norm = {
            "enc_mean": np.zeros(E), "enc_std": np.ones(E),
            "theta_mean": lay.default(1)[0], "theta_std": np.ones(P),
            "g_scale": np.ones(P), "r_scale": np.ones(1),
        }
        self.seed = seed
        init_weights(self, seed)
        for k in range(n_copies):
            if f"lg{k}" in self.children:
                self.children[f"lg{k}"].init_bias()

    @staticmethod
    def _enc_dim(task: Task) -> int:
        m = task.model
        if task.name == "hmd":
            return encoding_map("hmd", n_shape=m.n_shape)[-1][2]
        if task.name == "body2d":
            return encoding_map("body2d", n_joints=m.n_joints)[-1][2]
        return encoding_map("face", n_landmarks=len(m.landmark_indices))[-1][2]

    def step_net(self, n: int) -> StepNet:
        return self.children[f"f{n if self.n_copies > 1 else 0}"]

    def lg_head(self, n: int) -> LGHead | None:
        return self.children.get(f"lg{n if self.n_copies > 1 else 0}")

    @property
    def gamma_precond(self) -> np.ndarray:
        return self.norm["theta_std"] / self.norm["g_scale"]

    def checkpoint(self, adam: AdamState | None = None, meta: dict | None = None) -> Checkpoint:
        info = {"task": self.task.name, "fitter": asdict(self.cfg), "seed": self.seed, **(meta or {})}
        return Checkpoint({k: v.copy() for k, v in self.named_params().items()}, adam, info,
                          {f"norm/{k}": v.copy() for k, v in self.norm.items()})

    @classmethod
    def from_checkpoint(cls, task: Task, ck: Checkpoint) -> "FitterNetworks":
        if ck.meta.get("task") != task.name:
            raise BadConfig(f"checkpoint is for task {ck.meta.get('task')!r}, not {task.name!r}")
        nets = cls(task, FitterConfig(**ck.meta["fitter"]), ck.meta.get("seed", 0))
        nets.load(ck.params)
        for k in nets.norm:
            nets.norm[k] = ck.extra[f"norm/{k}"].copy()
        return nets


def fit_normalizers(nets: FitterNetworks, theta, obs, max_rows: int = 2048) -> None:
    """Estimate input/output feature scales from a training split."""
    theta = np.asarray(theta)[:max_rows]
    obs = obs.take(np.arange(len(theta)))
    enc = encode_observations(obs)
    nets.norm["enc_mean"] = enc.mean(axis=0)
    nets.norm["enc_std"] = np.maximum(enc.std(axis=0), 1e-3)
    mu = theta.mean(axis=0)
    nets.norm["theta_mean"] = mu
    nets.norm["theta_std"] = np.maximum(theta.std(axis=0), 1e-3)
    pkt = nets.task.evaluate(np.broadcast_to(mu, theta.shape).copy(), obs)
    nets.norm["g_scale"] = np.maximum(np.sqrt(np.mean(pkt.g**2, axis=0)), 1e-8)
    n_on = max(float(pkt.mask.sum()), 1.0)
    nets.norm["r_scale"] = np.array([max(np.sqrt(np.sum(pkt.r**2) / n_on), 1e-8)])


# --------------------------------------------------------------------------
# Update rules


def update_rule_variant(kind: str, dtheta, g, lam_raw=None, gam_raw=None):
    """Combine the network step and the gradient step; returns ``(step, cache)``.

    lambda/gamma may be per-parameter (..., P) or scalar (..., 1).
    """
    dtheta = np.asarray(dtheta)
    if kind == "network-only":
        return dtheta.copy(), (kind,)
    g = np.asarray(g)
    gam = softplus(gam_raw)
    if kind == "lm-like":
        return lam_raw * dtheta - gam * g, (kind, dtheta, g, lam_raw, gam_raw, gam)
    lam = sigmoid(lam_raw)
    if kind == "convex":
        return lam * dtheta - (1.0 - lam) * gam * g, (kind, dtheta, g, lam, gam_raw, gam)
    if kind == "normalized":
        nd = np.linalg.norm(dtheta, axis=-1, keepdims=True)
        ng = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(nd < 1e-12) or np.any(ng < 1e-12):
            raise DegenerateInput("normalized update needs non-zero network step and gradient")
        u, v = dtheta / nd, -g / ng
        mix = lam * u + (1.0 - lam) * v
        return gam * mix, (kind, u, v, nd, lam, gam_raw, gam, mix)
    raise BadConfig(f"unknown update rule {kind!r}")


def _reduce_to(x, shape):
    return x if x.shape == shape else np.sum(x, axis=-1, keepdims=True)


def update_rule_vjp(cache, g_step):
    """Pull a step cotangent back to ``(g_dtheta, g_lam_raw, g_gam_raw)`` (g is constant)."""
    kind = cache[0]
    if kind == "network-only":
        return g_step, None, None
    if kind == "lm-like":
        _, d, g, lam_raw, gam_raw, gam = cache
        lam_raw = np.asarray(lam_raw)
        return (g_step * lam_raw, _reduce_to(g_step * d, lam_raw.shape),
                _reduce_to(-g_step * g * sigmoid(gam_raw), np.shape(gam_raw)))
    if kind == "convex":
        _, d, g, lam, gam_raw, gam = cache
        g_lam = _reduce_to(g_step * (d + gam * g) * lam * (1.0 - lam), lam.shape)
        g_gam = _reduce_to(-g_step * (1.0 - lam) * g * sigmoid(gam_raw), np.shape(gam_raw))
        return g_step * lam, g_lam, g_gam
    _, u, v, nd, lam, gam_raw, gam, mix = cache
    g_gam = _reduce_to(g_step * mix * sigmoid(gam_raw), np.shape(gam_raw))
    g_lam = _reduce_to(g_step * gam * (u - v) * lam * (1.0 - lam), lam.shape)
    gu = g_step * gam * lam
    g_d = (gu - u * np.sum(u * gu, axis=-1, keepdims=True)) / nd
    return g_d, g_lam, g_gam


# --------------------------------------------------------------------------
# Forward passes


@dataclass
class StepDiag:
    data_term: float
    g_norm: float
    lam_norm: float
    gam_norm: float
    dtheta_norm: float


@dataclass
class FitTrace:
    thetas: list                     # Theta_0 .. Theta_N, each (B, P)
    data_terms: list                 # per iteration, (B,)
    diagnostics: list = field(default_factory=list)
    caches: list | None = None

    def write_diagnostics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iter", "data_term", "g_norm", "lambda_norm", "gamma_norm", "dtheta_norm"])
            for n, d in enumerate(self.diagnostics, start=1):
                out.writerow([n, repr(d.data_term), repr(d.g_norm), repr(d.lam_norm), repr(d.gam_norm),
                              repr(d.dtheta_norm)])


def _features(nets: FitterNetworks, theta, g, enc_n):
    nm = nets.norm
    return np.concatenate([np.arcsinh(g / nm["g_scale"]), (theta - nm["theta_mean"]) / nm["theta_std"],
                           enc_n], axis=-1)


def _mean_norm(x) -> float:
    return float(np.mean(np.linalg.norm(np.atleast_2d(x), axis=-1)))


def _check_finite(*arrays, where="fitter step") -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFiniteState(f"non-finite values in {where}")


def initialize(nets: FitterNetworks, obs, training=False, rng=None):
    """Theta_0 and h_0 from the observations; returns (theta0, hs, enc_n, cache)."""
    nm = nets.norm
    enc_n = (encode_observations(obs) - nm["enc_mean"]) / nm["enc_std"]
    out, c_init = nets.children["init"].forward(enc_n)
    theta0 = nm["theta_mean"] + nm["theta_std"] * out
    hs, c_h0 = [], None
    if "h0" in nets.children:
        hcat, c_h0 = nets.children["h0"].forward(enc_n)
        H = nets.cfg.gru_units
        hs = [hcat[:, l * H:(l + 1) * H] for l in range(nets.cfg.gru_layers)]
    return theta0, hs, enc_n, (c_init, c_h0)


def fitter_step(nets: FitterNetworks, n: int, theta, hs, enc_n, obs, pkt=None,
                training: bool = False, rng=None, force: dict | None = None, r_ahead=None):
    """One update.  Returns ``(theta_next, hs_next, diag, cache)``.

    ``pkt`` is the residual packet at ``theta`` (computed if omitted) and
    ``r_ahead`` the look-ahead residual; passing recorded values replays the
    step with those inputs held fixed.  ``force`` may pin any of ``dtheta``,
    ``lam_raw``, ``gam_raw``.
    """
    task = nets.task
    if pkt is None:
        pkt = task.evaluate(theta, obs)
    g = pkt.g
    _check_finite(g, where="gradient input")
    x = _features(nets, theta, g, enc_n)
    f = nets.step_net(n)
    p_drop = nets.cfg.dropout if training else 0.0
    if f.kind == "gru":
        inp, hs_next, layer_caches = x, [], []
        for l, h in enumerate(hs):
            h_new, c = f.children[f"gru{l}"].forward(inp, h)
            out, mask = dropout(h_new, p_drop, training, rng)
            hs_next.append(h_new)
            layer_caches.append((c, mask))
            inp = out
        raw, c_head = f.children["head"].forward(inp)
        net_cache = (layer_caches, c_head)
    else:
        hs_next = []
        raw, net_cache = f.children["res"].forward(x)
    dtheta = nets.norm["theta_std"] * raw
    force = force or {}
    if "dtheta" in force:
        dtheta = np.broadcast_to(force["dtheta"], dtheta.shape).copy()

    kind = nets.cfg.update_rule
    lam_raw = gam_raw = None
    lg_cache = None
    gp = g * nets.gamma_precond
    if kind != "network-only":
        rs = nets.norm["r_scale"]
        if r_ahead is None:
            r_ahead, _, _ = task.residuals(theta + dtheta, obs)
        lg_in = np.concatenate([np.arcsinh(pkt.r / rs), np.arcsinh(r_ahead / rs)], axis=-1)
        head = nets.lg_head(n)
        out, lg_cache = head.children["mlp"].forward(lg_in)
        lam_raw, gam_raw = out[:, :head.n_out], out[:, head.n_out:]
        if "lam_raw" in force:
            lam_raw = np.broadcast_to(force["lam_raw"], lam_raw.shape).copy()
        if "gam_raw" in force:
            gam_raw = np.broadcast_to(force["gam_raw"], gam_raw.shape).copy()
    step, rule_cache = update_rule_variant(kind, dtheta, gp, lam_raw, gam_raw)
    theta_next = theta + step
    _check_finite(theta_next, *hs_next)
    diag = StepDiag(
        float(np.mean(pkt.data_term)), _mean_norm(g),
        _mean_norm(lam_raw) if lam_raw is not None else 1.0,
        _mean_norm(softplus(gam_raw)) if gam_raw is not None else 0.0,
        _mean_norm(dtheta))
    cache = (n, net_cache, lg_cache, rule_cache, "dtheta" in force, pkt, r_ahead)
    return theta_next, hs_next, diag, cache


def run_fitter(nets: FitterNetworks, obs, n_iters: int | None = None, training: bool = False,
               rng=None, keep_caches: bool = False, replay: FitTrace | None = None) -> FitTrace:
    """Initialize then apply ``n_iters`` (default: configured) update steps.

    With ``replay`` (a trace recorded with caches) the gradient and residual
    inputs of every step are taken from that trace instead of recomputed, which
    is the function the training gradients differentiate.
    """
    N = nets.cfg.n_iters if n_iters is None else n_iters
    if N < 0:
        raise BadConfig("n_iters must be >= 0")
    if N > nets.cfg.n_iters and nets.n_copies > 1:
        raise BadConfig("per-step weights cannot run more iterations than were trained")
    task = nets.task
    theta, hs, enc_n, c0 = initialize(nets, obs, training, rng)
    _check_finite(theta, where="initializer")
    trace = FitTrace([theta], [], [], [c0] if keep_caches else None)
    for n in range(N):
        r_ahead = None
        if replay is not None:
            pkt, r_ahead = replay.caches[n + 1][5:7]
        else:
            pkt = task.evaluate(theta, obs)
        trace.data_terms.append(pkt.data_term)
        theta, hs, diag, cache = fitter_step(nets, n, theta, hs, enc_n, obs, pkt, training, rng,
                                             r_ahead=r_ahead)
        trace.thetas.append(theta)
        trace.diagnostics.append(diag)
        if keep_caches:
            trace.caches.append(cache)
    trace.data_terms.append(task.data_term(theta, obs))
    return trace


def backward_fitter(nets: FitterNetworks, trace: FitTrace, g_thetas) -> dict:
    """Parameter gradients of sum_n <g_thetas[n], Theta_n> through the unrolled fitter."""
    grads = nets.zero_grads()
    N = len(trace.thetas) - 1
    nm = nets.norm
    P = nets.P
    gth = np.array(g_thetas[N], copy=True)
    carry = None
    for n in range(N - 1, -1, -1):
        idx, net_cache, lg_cache, rule_cache, forced = trace.caches[n + 1][:5]
        pre = f"f{idx if nets.n_copies > 1 else 0}/"
        g_d, g_lam, g_gam = update_rule_vjp(rule_cache, gth)
        if g_lam is not None:
            head = nets.lg_head(idx)
            g_out = np.concatenate([g_lam, g_gam], axis=-1)
            _, gl = head.children["mlp"].backward(lg_cache, g_out)
            hp = f"lg{idx if nets.n_copies > 1 else 0}/mlp/"
            for k, v in gl.items():
                grads[hp + k] += v
        g_raw = np.zeros_like(g_d) if forced else g_d * nm["theta_std"]
        f = nets.step_net(idx)
        if f.kind == "gru":
            layer_caches, c_head = net_cache
            g_in, gh = f.children["head"].backward(c_head, g_raw)
            for k, v in gh.items():
                grads[f"{pre}head/{k}"] += v
            L = len(layer_caches)
            if carry is None:
                carry = [np.zeros_like(g_in) for _ in range(L)]
            for l in range(L - 1, -1, -1):
                c, mask = layer_caches[l]
                g_state = carry[l] + dropout_backward(mask, g_in)
                g_in, carry[l], gc = f.children[f"gru{l}"].backward(c, g_state)
                for k, v in gc.items():
                    grads[f"{pre}gru{l}/{k}"] += v
            gx = g_in
        else:
            gx, gr = f.children["res"].backward(net_cache, g_raw)
            for k, v in gr.items():
                grads[f"{pre}res/{k}"] += v
        # theta_{n+1} = theta_n + step; theta_n also enters the features
        gth = gth + gx[:, P:2 * P] / nm["theta_std"] + g_thetas[n]
    c_init, c_h0 = trace.caches[0]
    _, gi = nets.children["init"].backward(c_init, gth * nm["theta_std"])
    for k, v in gi.items():
        grads[f"init/{k}"] += v
    if c_h0 is not None and carry is not None:
        _, gh0 = nets.children["h0"].backward(c_h0, np.concatenate(carry, axis=-1))
        for k, v in gh0.items():
            grads[f"h0/{k}"] += v
    return grads


# --------------------------------------------------------------------------
# Training loss


@dataclass
class TrainLossWeights:
    mesh: float = 1000.0
    edge: float = 1000.0
    transform: float = 100.0
    rotation: float = 1.0
    transl: float = 100.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise BadConfig("loss weights must be non-negative")


_INCIDENCE: dict = {}


def edge_incidence(model) -> sparse.csr_matrix:
    """(E, V) matrix D with (D M)_e = M_a - M_b for edge e = (a, b); cached per model."""
    key = id(model.edges)
    if key not in _INCIDENCE:
        e = model.edges
        rows = np.repeat(np.arange(len(e)), 2)
        vals = np.tile([1.0, -1.0], len(e))
        _INCIDENCE[key] = (model.edges, sparse.csr_matrix((vals, (rows, e.reshape(-1))),
                                                          shape=(len(e), model.n_verts)))
    return _INCIDENCE[key][1]


def _apply_vertex_op(D, verts):
    """Apply a (E, V) operator to (B, V, 3) vertex arrays."""
    B, V, _ = verts.shape
    out = D @ np.moveaxis(verts, 1, 0).reshape(V, B * 3)
    return np.moveaxis(out.reshape(-1, B, 3), 0, 1)


def _gt_state(task: Task, theta_gt, obs):
    pose, _ = task.pose(theta_gt, obs)
    return forward(task.model, pose)


def training_loss(task: Task, thetas, theta_gt, obs, weights: TrainLossWeights | None = None,
                  gradient: bool = True, gt_state=None):
    """Summed per-step L1 loss, averaged over the batch.

    Returns ``(loss, per-term dict, per-step parameter gradients or None)``.
    """
    w = weights or TrainLossWeights()
    model = task.model
    thetas = [np.atleast_2d(t) for t in thetas]
    K, (B, P) = len(thetas), thetas[0].shape
    theta_gt = np.atleast_2d(theta_gt)
    if theta_gt.shape != (B, P) or any(t.shape != (B, P) for t in thetas):
        raise ShapeMismatch("trajectory and ground truth parameter shapes differ")
    gt = gt_state or _gt_state(task, theta_gt, obs)
    stacked = np.concatenate(thetas)
    obs_k = obs.take(np.tile(np.arange(B), K))
    pose, cam = task.pose(stacked, obs_k)
    st = forward(model, pose)

    def rep(a):
        return np.concatenate([a] * K)

    dM = st.verts - rep(gt.verts)
    D = edge_incidence(model)
    dE = _apply_vertex_op(D, st.verts) - rep(_apply_vertex_op(D, gt.verts))
    dT = st.world - rep(gt.world)
    dR = st.Rloc - rep(gt.Rloc)
    dt = pose.transl - rep(gt.params.transl)
    terms = {"mesh": w.mesh * np.abs(dM).sum() / B, "edge": w.edge * np.abs(dE).sum() / B,
             "transform": w.transform * np.abs(dT).sum() / B, "rotation": w.rotation * np.abs(dR).sum() / B,
             "transl": w.transl * np.abs(dt).sum() / B}
    loss = float(sum(terms.values()))
    if not gradient:
        return loss, terms, None
    g_verts = np.sign(dM) * (w.mesh / B) + _apply_vertex_op(D.T.tocsr(), np.sign(dE) * (w.edge / B))
    gp = pose_vjp(model, st, g_verts=g_verts, g_world=np.sign(dT) * (w.transform / B),
                  g_rloc=np.sign(dR) * (w.rotation / B), g_transl=np.sign(dt) * (w.transl / B))
    g_cam = None
    if cam is not None:
        g_cam = (np.zeros(len(stacked)), np.zeros((len(stacked), 2)))
    g = task.layout.grad_pack(gp, g_cam).reshape(K, B, P)
    return loss, terms, list(g)


# --------------------------------------------------------------------------
# Training


@dataclass
class Schedule:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-4
    anneal_epoch: int = 200
    anneal_factor: float = 0.1
    val_every: int = 1

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or not 0 < self.anneal_factor <= 1:
            raise BadConfig("invalid training schedule")


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    history: list
    adam: AdamState
    best_epoch: int
    best_val: float
    best_params: dict

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in self.history:
                out.writerow([row.epoch, repr(row.train_loss), repr(row.val_loss), repr(row.lr)])


def batch_loss_and_grads(nets, theta_gt, obs, weights, rng, training=True):
    trace = run_fitter(nets, obs, training=training, rng=rng, keep_caches=True)
    loss, terms, g_thetas = training_loss(nets.task, trace.thetas, theta_gt, obs, weights)
    return loss, backward_fitter(nets, trace, g_thetas), trace


def evaluate_loss(nets, theta_gt, obs, weights=None, chunk: int = 256) -> float:
    total, n = 0.0, len(theta_gt)
    for a in range(0, n, chunk):
        idx = np.arange(a, min(n, a + chunk))
        o = obs.take(idx)
        trace = run_fitter(nets, o)
        loss, _, _ = training_loss(nets.task, trace.thetas, theta_gt[idx], o, weights, gradient=False)
        total += loss * len(idx)
    return total / max(n, 1)


def train(nets: FitterNetworks, train_set, val_set=None, schedule: Schedule | None = None, seed: int = 0,
          weights: TrainLossWeights | None = None, log=None) -> TrainResult:
    """Adam on the summed per-step loss; keeps (and finally restores) the best-validation weights.

    ``train_set``/``val_set`` are ``(theta, obs)`` pairs.
    """
    sch = schedule or Schedule()
    sch.validate()
    theta_tr, obs_tr = train_set
    rng = np.random.default_rng(seed)
    params = nets.named_params()
    adam = AdamState(lr=sch.lr)
    history = []
    best = (np.inf, -1, {k: v.copy() for k, v in params.items()})
    n = len(theta_tr)
    for epoch in range(sch.epochs):
        adam.lr = sch.lr * (sch.anneal_factor if epoch >= sch.anneal_epoch else 1.0)
        order = rng.permutation(n)
        losses = []
        for bi, a in enumerate(range(0, n, sch.batch_size)):
            idx = np.sort(order[a:a + sch.batch_size])
            try:
                loss, grads, _ = batch_loss_and_grads(nets, theta_tr[idx], obs_tr.take(idx), weights, rng)
            except (NonFiniteState, DegenerateInput) as exc:
                raise NonFiniteState(f"epoch {epoch} batch {bi}: {exc}", bi) from exc
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteState(f"non-finite loss or gradient at epoch {epoch} batch {bi}", bi)
            adam_step(params, grads, adam)
            losses.append(loss)
        val = np.nan
        if val_set is not None and ((epoch + 1) % sch.val_every == 0 or epoch == sch.epochs - 1):
            val = evaluate_loss(nets, val_set[0], val_set[1], weights)
        row = HistoryRow(epoch, float(np.mean(losses)), float(val), adam.lr)
        history.append(row)
        if log:
            log(row)
        score = val if val_set is not None else row.train_loss
        if np.isfinite(score) and score < best[0]:
            best = (score, epoch, {k: v.copy() for k, v in params.items()})
    nets.load(best[2])
    return TrainResult(history, adam, best[1], float(best[0]), best[2])
