"""Data terms, visibility and the hand-crafted priors of the classic baseline.

Three fitting tasks share one interface (:class:`Task`):

* ``body2d`` -- weak-perspective reprojection of posed joints onto 2D keypoints,
* ``hmd``    -- headset and wrist poses plus fingertip positions from a
  head-mounted device, with per-hand visibility,
* ``face``   -- perspective reprojection of mesh landmarks.

Residuals are ``observed - predicted`` and are stored already multiplied by
their 0/1 mask, so ``data_term = sum(r**2)`` and ``g = 2 J^T r``.
Jacobians come from the reverse pass in :mod:`neuralfit.model` fed with unit
cotangents, one per residual row.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import BadConfig, BadPrior, DegenerateInput, ShapeMismatch
from .geometry import (IDENTITY_6D, Intrinsics, MIN_DEPTH, RigidTransform, perspective_jacobian,
                       rot6d_to_matrix, rot6d_vjp)
from .errors import BehindCamera
from .model import KinematicModel, PoseParams, forward, pose_vjp

TASKS = ("body2d", "hmd", "face")
UP = np.array([0.0, 1.0, 0.0])


# --------------------------------------------------------------------------
# Parameter layouts


@dataclass(frozen=True)
class Layout:
    task: str
    n_joints: int
    n_shape: int
    n_expr: int
    blocks: tuple   # ((name, start, stop), ...)

    @property
    def size(self) -> int:
        return self.blocks[-1][2]

    def slice(self, name: str) -> slice:
        for n, a, b in self.blocks:
            if n == name:
                return slice(a, b)
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(n == name for n, _, _ in self.blocks)

    def unpack(self, theta, beta=None):
        """Split (B, P) parameters into model inputs and camera terms."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 2 or theta.shape[1] != self.size:
            raise ShapeMismatch(f"{self.task} parameters need shape (B, {self.size}), got {theta.shape}")
        B = theta.shape[0]
        r6 = theta[:, self.slice("rot")].reshape(B, self.n_joints, 6)
        transl = theta[:, self.slice("transl")]
        if self.has("beta"):
            beta = theta[:, self.slice("beta")]
        elif beta is None:
            beta = np.zeros((B, self.n_shape))
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (B, self.n_shape))
        psi = theta[:, self.slice("psi")] if self.has("psi") else np.zeros((B, self.n_expr))
        cam = None
        if self.has("scale"):
            cam = (theta[:, self.slice("scale")][:, 0], theta[:, self.slice("cam_t")])
        return PoseParams(r6, transl, beta, psi), cam

    def pack(self, pose: PoseParams, cam=None) -> np.ndarray:
        B = pose.r6.shape[0]
        out = np.zeros((B, self.size))
        out[:, self.slice("rot")] = pose.r6.reshape(B, -1)
        out[:, self.slice("transl")] = pose.transl
        if self.has("beta"):
            out[:, self.slice("beta")] = pose.beta
        if self.has("psi"):
            out[:, self.slice("psi")] = pose.psi
        if self.has("scale"):
            out[:, self.slice("scale")] = np.asarray(cam[0]).reshape(B, 1)
            out[:, self.slice("cam_t")] = cam[1]
        return out

    def grad_pack(self, g: PoseParams, g_cam=None) -> np.ndarray:
        """Pack a gradient :class:`PoseParams` (any leading axes) into layout order."""
        lead = g.transl.shape[:-1]
        out = np.zeros(lead + (self.size,))
        out[..., self.slice("rot")] = g.r6.reshape(lead + (-1,))
        out[..., self.slice("transl")] = g.transl
        if self.has("beta"):
            out[..., self.slice("beta")] = g.beta
        if self.has("psi"):
            out[..., self.slice("psi")] = g.psi
        if self.has("scale"):
            out[..., self.slice("scale")] = g_cam[0][..., None]
            out[..., self.slice("cam_t")] = g_cam[1]
        return out

    def default(self, batch: int = 1) -> np.ndarray:
        """Identity rotations, zero translation/coefficients, unit camera scale."""
        out = np.zeros((batch, self.size))
        out[:, self.slice("rot")] = np.tile(IDENTITY_6D, self.n_joints)
        if self.has("scale"):
            out[:, self.slice("scale")] = 1.0
        return out

    def joint_columns(self, joints) -> np.ndarray:
        """Column indices of the 6D rotation entries of the given joints."""
        start = self.slice("rot").start
        return np.concatenate([np.arange(start + 6 * j, start + 6 * j + 6) for j in joints])


def make_layout(task: str, n_joints: int, n_shape: int = 0, n_expr: int = 0) -> Layout:
    if task not in TASKS:
        raise BadConfig(f"unknown task {task!r}")
    sizes = [("rot", 6 * n_joints), ("transl", 3)]
    if task == "body2d":
        sizes += [("beta", n_shape), ("scale", 1), ("cam_t", 2)]
    elif task == "face":
        sizes += [("psi", n_expr), ("beta", n_shape)]
    blocks, pos = [], 0
    for name, n in sizes:
        blocks.append((name, pos, pos + n))
        pos += n
    return Layout(task, n_joints, n_shape, n_expr, tuple(blocks))


def layout_for(task: str, model: KinematicModel) -> Layout:
    return make_layout(task, model.n_joints, model.n_shape, model.n_expr)


# --------------------------------------------------------------------------
# Observations


class _Batch:
    """Mixin for batched observation dataclasses (leading axis = instance)."""

    def take(self, idx):
        idx = np.atleast_1d(np.asarray(idx))
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v[idx] if isinstance(v, np.ndarray) else v
        return replace(self, **kw)

    def __len__(self):
        return len(getattr(self, fields(self)[0].name))

    def arrays(self) -> dict:
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)}


@dataclass
class Body2DObs(_Batch):
    keypoints: np.ndarray    # (B, J, 2) pixels
    confidence: np.ndarray   # (B, J) in [0, 1]


@dataclass
class HMDObs(_Batch):
    headset: np.ndarray      # (B, 3, 4)
    wrists: np.ndarray       # (B, 2, 3, 4), left then right
    fingertips: np.ndarray   # (B, 2, 5, 3)
    visible: np.ndarray      # (B, 2) in {0, 1}
    shape: np.ndarray        # (B, n_shape) known body shape


@dataclass
class FaceObs(_Batch):
    landmarks: np.ndarray    # (B, P, 2) pixels
    intrinsics: np.ndarray   # (B, 4): fx, fy, cx, cy


OBS_TYPES = {"body2d": Body2DObs, "hmd": HMDObs, "face": FaceObs}


def concat_obs(items):
    cls = type(items[0])
    return cls(**{f.name: np.concatenate([getattr(o, f.name) for o in items]) for f in fields(cls)})


@dataclass
class ResidualPacket:
    r: np.ndarray                 # (B, R) masked residuals
    mask: np.ndarray              # (B, R)
    g: np.ndarray | None = None   # (B, P)
    J: np.ndarray | None = None   # (B, R, P)

    @property
    def data_term(self) -> np.ndarray:
        return np.sum(self.mask * self.r**2, axis=-1)


# --------------------------------------------------------------------------
# Visibility


def half_space_visibility(headset: RigidTransform, points) -> np.ndarray:
    """True where a world point lies strictly in front of the headset (z < 0)."""
    local = headset.inverse().apply(np.atleast_2d(points))
    return local[..., 2] < 0.0


# --------------------------------------------------------------------------
# Tasks


def _robust(r, delta):
    """Elementwise map whose square is twice the Huber penalty."""
    if delta is None:
        return r, None
    a = np.abs(r)
    big = a > delta
    out = np.where(big, np.sign(r) * np.sqrt(np.maximum(2 * delta * a - delta**2, 0.0)), r)
    scale = np.where(big, delta / np.where(big, np.abs(out), 1.0), 1.0)
    return out, scale


class Task:
    name = ""
    block_names: tuple = ()

    def __init__(self, model: KinematicModel, huber_delta: float | None = None):
        self.model = model
        self.layout = layout_for(self.name, model)
        self.huber_delta = huber_delta

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def n_residuals(self) -> int:
        return self.residual_blocks()[-1][2]

    def residual_blocks(self):
        raise NotImplementedError

    def _raw(self, theta, obs):
        """Return (raw residual (B,R), mask (B,R), ctx)."""
        raise NotImplementedError

    def _vjp(self, ctx, cot):
        """Pull (..., B, R) cotangents on raw residuals back to (..., B, P)."""
        raise NotImplementedError

    def residuals(self, theta, obs):
        raw, mask, ctx = self._raw(np.atleast_2d(theta), obs)
        r, scale = _robust(raw, self.huber_delta)
        return mask * r, mask, (ctx, scale)

    def vjp(self, ctx, mask, cot):
        inner, scale = ctx
        cot = cot * mask
        if scale is not None:
            cot = cot * scale
        return self._vjp(inner, cot)

    def evaluate(self, theta, obs, gradient: bool = True, jacobian: bool = False) -> ResidualPacket:
        r, mask, ctx = self.residuals(theta, obs)
        pkt = ResidualPacket(r, mask)
        if jacobian:
            eye = np.eye(r.shape[1])[:, None, :] * np.ones((1, r.shape[0], 1))
            Jt = self.vjp(ctx, mask, eye)                # (R, B, P)
            pkt.J = np.transpose(Jt, (1, 0, 2))
            pkt.g = 2.0 * np.einsum("brp,br->bp", pkt.J, mask * r)
        elif gradient:
            pkt.g = self.vjp(ctx, mask, 2.0 * mask * r)
        return pkt

    def data_term(self, theta, obs) -> np.ndarray:
        r, mask, _ = self.residuals(theta, obs)
        return np.sum(mask * r**2, axis=-1)

    def pose(self, theta, obs):
        return self.layout.unpack(np.atleast_2d(theta), self._fixed_beta(obs))

    def _fixed_beta(self, obs):
        return None


class Body2DTask(Task):
    """Weak-perspective reprojection of the posed joints."""
    name = "body2d"

    def residual_blocks(self):
        J = self.model.n_joints
        return (("keypoints", 0, 2 * J),)

    def _raw(self, theta, obs: Body2DObs):
        pose, (s, ct) = self.layout.unpack(theta)
        if obs.keypoints.shape != (theta.shape[0], self.model.n_joints, 2):
            raise ShapeMismatch("keypoint array does not match the joint count")
        st = forward(self.model, pose, skin=False)
        proj = s[:, None, None] * st.t[..., :2] + ct[:, None, :]
        conf = obs.confidence
        raw = (conf[..., None] * (obs.keypoints - proj)).reshape(len(theta), -1)
        mask = np.repeat((conf > 0).astype(np.float64), 2, axis=1)
        return raw, mask, (st, s, conf)

    def _vjp(self, ctx, cot):
        st, s, conf = ctx
        B, J = conf.shape
        c = cot.reshape(cot.shape[:-1] + (J, 2))
        gproj = -conf[..., None] * c
        g_s = np.einsum("...bjk,bjk->...b", gproj, st.t[..., :2])
        g_ct = gproj.sum(axis=-2)
        g_world = np.zeros(cot.shape[:-1] + (J, 3, 4))
        g_world[..., :2, 3] = s[:, None, None] * gproj
        gp = pose_vjp(self.model, st, g_world=g_world)
        return self.layout.grad_pack(gp, (g_s, g_ct))


class HMDTask(Task):
    """Headset, wrist and fingertip discrepancies with per-hand visibility."""
    name = "hmd"

    def __init__(self, model: KinematicModel, calib: RigidTransform | None = None,
                 huber_delta: float | None = None):
        super().__init__(model, huber_delta)
        if model.head_joint < 0 or len(model.wrist_joints) != 2 or len(model.fingertip_indices) != 10:
            raise BadConfig("HMD task needs a body model with head, two wrists and ten fingertips")
        self.calib = calib if calib is not None else default_calibration()

    def residual_blocks(self):
        return (("headset", 0, 12), ("left_wrist", 12, 24), ("right_wrist", 24, 36),
                ("left_fingertips", 36, 51), ("right_fingertips", 51, 66))

    def _fixed_beta(self, obs):
        return obs.shape

    def headset_pose(self, st) -> np.ndarray:
        """(B, 3, 4) headset transforms: head joint followed by the calibration offset."""
        hj = self.model.head_joint
        R = st.R[:, hj] @ self.calib.R
        t = np.einsum("bij,j->bi", st.R[:, hj], self.calib.t) + st.t[:, hj]
        return np.concatenate([R, t[..., None]], axis=-1)

    def _raw(self, theta, obs: HMDObs):
        pose, _ = self.layout.unpack(theta, obs.shape)
        B = len(theta)
        st = forward(self.model, pose, self.model.fingertip_indices)
        head = self.headset_pose(st)
        wr = st.world[:, list(self.model.wrist_joints)]
        tips = st.verts.reshape(B, 2, 5, 3)
        raw = np.concatenate([
            (obs.headset - head).reshape(B, 12),
            (obs.wrists - wr).reshape(B, 24),
            (obs.fingertips - tips).reshape(B, 30),
        ], axis=1)
        vis = np.asarray(obs.visible, dtype=np.float64)
        mask = np.concatenate([np.ones((B, 12)), np.repeat(vis, 12, axis=1), np.repeat(vis, 15, axis=1)], axis=1)
        return raw, mask, st

    def _vjp(self, st, cot):
        lead = cot.shape[:-1]
        J = self.model.n_joints
        c_head = -cot[..., 0:12].reshape(lead + (3, 4))
        c_wr = -cot[..., 12:36].reshape(lead + (2, 3, 4))
        c_tips = -cot[..., 36:66].reshape(lead + (10, 3))
        g_world = np.zeros(lead + (J, 3, 4))
        hj = self.model.head_joint
        cR, ct = c_head[..., :3], c_head[..., 3]
        g_world[..., hj, :, :3] += cR @ self.calib.R.T + ct[..., :, None] * self.calib.t[None, :]
        g_world[..., hj, :, 3] += ct
        for k, wj in enumerate(self.model.wrist_joints):
            g_world[..., wj, :, :] += c_wr[..., k, :, :]
        gp = pose_vjp(self.model, st, g_verts=c_tips, g_world=g_world)
        return self.layout.grad_pack(gp)


class FaceTask(Task):
    """Perspective reprojection of mesh landmarks."""
    name = "face"

    def residual_blocks(self):
        return (("landmarks", 0, 2 * len(self.model.landmark_indices)),)

    def _raw(self, theta, obs: FaceObs):
        pose, _ = self.layout.unpack(theta)
        st = forward(self.model, pose, self.model.landmark_indices)
        P = st.verts
        z = P[..., 2]
        if np.any(z <= MIN_DEPTH):
            raise BehindCamera("landmark at or behind the camera")
        fx, fy, cx, cy = (obs.intrinsics[:, k, None] for k in range(4))
        proj = np.stack([fx * P[..., 0] / z + cx, fy * P[..., 1] / z + cy], axis=-1)
        raw = (obs.landmarks - proj).reshape(len(theta), -1)
        return raw, np.ones_like(raw), (st, obs.intrinsics)

    def _vjp(self, ctx, cot):
        st, intr = ctx
        P = st.verts
        x, y, z = P[..., 0], P[..., 1], P[..., 2]
        fx, fy = intr[:, 0, None], intr[:, 1, None]
        c = -cot.reshape(cot.shape[:-1] + (P.shape[1], 2))
        gv = np.stack([
            c[..., 0] * fx / z,
            c[..., 1] * fy / z,
            -(c[..., 0] * fx * x + c[..., 1] * fy * y) / z**2,
        ], axis=-1)
        gp = pose_vjp(self.model, st, g_verts=gv)
        return self.layout.grad_pack(gp)


def default_calibration() -> RigidTransform:
    """Headset 10 cm in front of the head joint (the body faces -z)."""
    return RigidTransform(np.eye(3), np.array([0.0, 0.0, -0.10]))


def make_task(name: str, model: KinematicModel, **kw) -> Task:
    if name == "body2d":
        return Body2DTask(model, **kw)
    if name == "hmd":
        return HMDTask(model, **kw)
    if name == "face":
        return FaceTask(model, **kw)
    raise BadConfig(f"unknown task {name!r}")


def body2d_residuals(task: Body2DTask, theta, obs) -> ResidualPacket:
    return task.evaluate(theta, obs)


def hmd_residuals(task: HMDTask, theta, obs) -> ResidualPacket:
    return task.evaluate(theta, obs)


def face_residuals(task: FaceTask, theta, obs) -> ResidualPacket:
    return task.evaluate(theta, obs)


def jacobian(task: Task, theta, obs) -> ResidualPacket:
    return task.evaluate(theta, obs, jacobian=True)


def describe_layout(task: Task) -> list:
    """Rows of (kind, name, start, stop) for parameters and residuals."""
    rows = [("param", n, a, b) for n, a, b in task.layout.blocks]
    rows += [("residual", n, a, b) for n, a, b in task.residual_blocks()]
    return rows


# --------------------------------------------------------------------------
# Priors


@dataclass
class GMM:
    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, d)
    covs: np.ndarray      # (K, d, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(len(self.weights), self.means.shape[1], -1)
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise BadPrior("GMM weights must be positive and sum to 1")
        try:
            self.chol = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError:
            raise BadPrior("GMM covariance is not positive-definite") from None
        d = self.means.shape[1]
        logdet = 2.0 * np.sum(np.log(np.diagonal(self.chol, axis1=1, axis2=2)), axis=1)
        # -log(w_j N(mu_j)) at the mean of each component
        self.offsets = -np.log(self.weights) + 0.5 * (d * np.log(2 * np.pi) + logdet)
        self.chol_inv = np.linalg.inv(self.chol)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_nll(self, x) -> np.ndarray:
        """-log(w_j N(x; mu_j, S_j)) for every component; (..., d) -> (..., K)."""
        diff = np.asarray(x)[..., None, :] - self.means
        z = np.einsum("kij,...kj->...ki", self.chol_inv, diff)
        return 0.5 * np.sum(z**2, axis=-1) + self.offsets


def gmm_prior(theta, gmm: GMM):
    """Value and gradient of ``-min_j log(w_j N(theta; mu_j, S_j))`` (single vector)."""
    theta = np.asarray(theta, dtype=np.float64)
    nll = gmm.component_nll(theta)
    j = int(np.argmin(nll))
    prec = gmm.chol_inv[j].T @ gmm.chol_inv[j]
    return float(nll[j]), prec @ (theta - gmm.means[j])


def gmm_residual(theta, gmm: GMM):
    """Least-squares form: value = ||rho||^2 + const; returns (rho, d rho/d theta, const)."""
    nll = gmm.component_nll(theta)
    j = int(np.argmin(nll))
    Linv = gmm.chol_inv[j] / np.sqrt(2.0)
    return Linv @ (theta - gmm.means[j]), Linv, float(gmm.offsets[j])


def fit_gmm_em(samples, n_components: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-8,
               reg_covar: float = 1e-6):
    """EM with k-means initialisation.  Returns ``(gmm, log_likelihood_history)``."""
    from scipy.cluster.vq import kmeans2
    from scipy.special import logsumexp

    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or n_components < 1 or len(X) < n_components:
        raise BadConfig("need a (n, d) sample array with n >= n_components >= 1")
    n, d = X.shape
    if n_components == 1:
        labels = np.zeros(n, dtype=int)
    else:
        _, labels = kmeans2(X, n_components, minit="++", seed=np.random.default_rng(seed))
    resp = np.zeros((n, n_components))
    resp[np.arange(n), labels] = 1.0
    resp[:, resp.sum(axis=0) == 0] = 1.0 / n

    history = []
    for _ in range(max_iter):
        # M step
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = resp.T @ X / nk[:, None]
        covs = np.empty((n_components, d, d))
        for k in range(n_components):
            diff = X - means[k]
            covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + reg_covar * np.eye(d)
        gmm = GMM(weights / weights.sum(), means, covs)
        # E step
        logp = -gmm.component_nll(X)
        ll = logsumexp(logp, axis=1)
        history.append(float(ll.mean()))
        resp = np.exp(logp - ll[:, None])
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol * max(1.0, abs(history[-2])):
            break
    return gmm, history


def _root_row(theta, layout: Layout):
    r6 = np.atleast_2d(theta)[:, layout.slice("rot")][:, :6]
    return r6, rot6d_to_matrix(r6)


def gravity_loss(theta, layout: Layout):
    """One minus the cosine between row 1 of the root rotation and +y.

    Returns (value (B,), gradient (B, P)).
    """
    theta = np.atleast_2d(theta)
    r6, R = _root_row(theta, layout)
    row = R[:, 1, :]
    norm = np.linalg.norm(row, axis=-1)
    if np.any(norm < 1e-12):
        raise DegenerateInput("gravity axis has zero length")
    cos = row @ UP / norm
    grow = -(UP / norm[:, None] - (row @ UP)[:, None] * row / norm[:, None] ** 3)
    gR = np.zeros(R.shape)
    gR[:, 1, :] = grow
    grad = np.zeros_like(theta)
    s = layout.slice("rot")
    grad[:, s.start:s.start + 6] = rot6d_vjp(r6, gR)
    return 1.0 - cos, grad


def gravity_residual(theta, layout: Layout):
    """Least-squares form: ||rho||^2 = 1 - cos for orthonormal rows.  Single instance."""
    theta = np.asarray(theta, dtype=np.float64)
    r6, R = _root_row(theta, layout)
    rho = (R[0, 1, :] - UP) / np.sqrt(2.0)
    cot = np.zeros((3, 1, 3, 3))
    for k in range(3):
        cot[k, 0, 1, k] = 1.0 / np.sqrt(2.0)
    Jr = np.zeros((3, len(theta)))
    s = layout.slice("rot")
    Jr[:, s.start:s.start + 6] = rot6d_vjp(r6, cot)[:, 0]
    return rho, Jr


def temporal_residual(task: Task, thetas, obs=None):
    """Stacked differences of world transforms between consecutive frames.

    ``thetas`` is (T, P).  Returns ``(rho ((T-1)*J*12,), d rho / d thetas (., T*P))``.
    """
    thetas = np.atleast_2d(thetas)
    T, P = thetas.shape
    beta = task._fixed_beta(obs) if obs is not None else None
    if beta is not None and len(beta) != T:
        beta = np.broadcast_to(beta[:1], (T, beta.shape[1]))
    pose, _ = task.layout.unpack(thetas, beta)
    st = forward(task.model, pose, skin=False)
    W = st.world.reshape(T, -1)
    rho = (W[1:] - W[:-1]).reshape(-1)
    m = W.shape[1]
    J = task.model.n_joints
    # d W_t / d theta_t for every frame via unit cotangents
    cot = np.eye(m).reshape(m, 1, J, 3, 4) * np.ones((1, T, 1, 1, 1))
    gp = pose_vjp(task.model, st, g_world=cot)
    dW = task.layout.grad_pack(gp, _zero_cam(task, (m, T)))   # (m, T, P)
    jac = np.zeros(((T - 1) * m, T * P))
    for t in range(T - 1):
        rows = slice(t * m, (t + 1) * m)
        jac[rows, (t + 1) * P:(t + 2) * P] = dW[:, t + 1]
        jac[rows, t * P:(t + 1) * P] = -dW[:, t]
    return rho, jac


def _zero_cam(task, lead):
    if task.layout.has("scale"):
        return np.zeros(lead), np.zeros(lead + (2,))
    return None


def temporal_loss(task: Task, thetas, obs=None):
    """Sum over frames and joints of squared Frobenius differences of world transforms.

    Returns ``(value, gradient (T, P))``.
    """
    rho, jac = temporal_residual(task, thetas, obs)
    thetas = np.atleast_2d(thetas)
    return float(rho @ rho), (2.0 * jac.T @ rho).reshape(thetas.shape)
