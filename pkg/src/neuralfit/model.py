"""Parametric skinned model: rest joints, kinematic chain, LBS, blendshapes.

The evaluation path is batched (leading axis B) and comes with a hand-written
reverse-mode pass (:func:`pose_vjp`) that pulls cotangents on vertices, world
transforms and local rotations back to the pose, translation, shape and
expression parameters.  Jacobians in :mod:`neuralfit.residuals` are built from
the same pass by feeding unit cotangents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import container
from .errors import BadConfig, FormatError, ShapeMismatch
from .geometry import IDENTITY_6D, rot6d_to_matrix, rot6d_vjp

ROOT = -1


@dataclass(frozen=True, eq=False)
class KinematicModel:
    kind: str
    template: np.ndarray            # (V, 3)
    parents: np.ndarray             # (J,), parents[0] == ROOT
    joint_mean: np.ndarray          # (J, 3)
    joint_basis: np.ndarray         # (J, 3, n_shape)
    skinning: np.ndarray            # (V, J)
    shape_basis: np.ndarray         # (V, 3, n_shape)
    expr_basis: np.ndarray          # (V, 3, n_expr)
    landmark_indices: np.ndarray
    edges: np.ndarray               # (E, 2)
    fingertip_indices: np.ndarray = field(default_factory=lambda: np.zeros((0,), np.int64))
    head_joint: int = -1
    wrist_joints: tuple = ()
    parts: dict = field(default_factory=dict)
    joint_names: tuple = ()
    info: dict = field(default_factory=dict)   # provenance (e.g. config hash); not part of the digest

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_verts(self) -> int:
        return len(self.template)

    @property
    def n_shape(self) -> int:
        return self.joint_basis.shape[-1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[-1]

    def validate(self) -> None:
        J, V = self.n_joints, self.n_verts
        if self.parents[0] != ROOT:
            raise BadConfig("joint 0 must be the root")
        if any(not (0 <= self.parents[j] < j) for j in range(1, J)):
            raise BadConfig("parents must be topologically ordered")
        w = self.skinning
        if w.shape != (V, J) or np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise BadConfig("skinning rows must be non-negative and sum to 1")
        for name, idx, bound in (
            ("landmark_indices", self.landmark_indices, V),
            ("fingertip_indices", self.fingertip_indices, V),
            ("edges", self.edges, V),
        ):
            if idx.size and (idx.min() < 0 or idx.max() >= bound):
                raise BadConfig(f"{name} out of range")
        for j in (self.head_joint, *self.wrist_joints):
            if j != -1 and not 0 <= j < J:
                raise BadConfig("joint index out of range")
        for name, idx in self.parts.items():
            if idx.size and (idx.min() < 0 or idx.max() >= V):
                raise BadConfig(f"part {name!r} out of range")


# --------------------------------------------------------------------------
# Evaluation


@dataclass
class PoseParams:
    """Batched model inputs; every field has leading batch axis B."""
    r6: np.ndarray       # (B, J, 6)
    transl: np.ndarray   # (B, 3)
    beta: np.ndarray     # (B, n_shape)
    psi: np.ndarray      # (B, n_expr)


def rest_pose_params(model: KinematicModel, batch: int = 1) -> PoseParams:
    return PoseParams(
        r6=np.tile(IDENTITY_6D, (batch, model.n_joints, 1)),
        transl=np.zeros((batch, 3)),
        beta=np.zeros((batch, model.n_shape)),
        psi=np.zeros((batch, model.n_expr)),
    )


def rest_joints(model: KinematicModel, beta) -> np.ndarray:
    """Joint locations for shape ``beta``; (n_shape,) -> (J,3) or (B,n_shape) -> (B,J,3)."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-1] != model.n_shape:
        raise ShapeMismatch(f"beta has {beta.shape[-1]} entries, model expects {model.n_shape}")
    return model.joint_mean + np.einsum("jck,...k->...jc", model.joint_basis, beta)


@dataclass
class Posed:
    """Forward state kept for the reverse pass."""
    params: PoseParams
    Rloc: np.ndarray      # (B, J, 3, 3)
    joints: np.ndarray    # (B, J, 3) rest joints
    offsets: np.ndarray   # (B, J, 3)
    R: np.ndarray         # (B, J, 3, 3) world rotations
    t: np.ndarray         # (B, J, 3) world positions
    vidx: np.ndarray | None = None
    shaped: np.ndarray | None = None   # (B, Vs, 3)
    blend: np.ndarray | None = None    # (B, Vs, 3, 4)
    verts: np.ndarray | None = None    # (B, Vs, 3)

    @property
    def world(self) -> np.ndarray:
        """(B, J, 3, 4) world transforms [R | t]."""
        return np.concatenate([self.R, self.t[..., None]], axis=-1)


def _check(model: KinematicModel, p: PoseParams) -> None:
    J = model.n_joints
    B = p.r6.shape[0]
    if p.r6.shape != (B, J, 6) or p.transl.shape != (B, 3):
        raise ShapeMismatch(f"pose shapes {p.r6.shape}/{p.transl.shape} do not match J={J}")
    if p.beta.shape != (B, model.n_shape) or p.psi.shape != (B, model.n_expr):
        raise ShapeMismatch("shape/expression coefficient count mismatch")


def forward(model: KinematicModel, p: PoseParams, vidx=None, skin: bool = True) -> Posed:
    """Run the kinematic chain and (optionally) skin the vertices ``vidx``.

    ``vidx=None`` with ``skin=True`` skins every vertex.
    """
    _check(model, p)
    Rloc = rot6d_to_matrix(p.r6)
    joints = rest_joints(model, p.beta)
    par = model.parents
    offsets = joints - joints[:, np.maximum(par, 0)]
    offsets[:, 0] = joints[:, 0] + p.transl
    B, J = joints.shape[:2]
    R = np.empty((B, J, 3, 3))
    t = np.empty((B, J, 3))
    R[:, 0] = Rloc[:, 0]
    t[:, 0] = offsets[:, 0]
    for j in range(1, J):
        pj = par[j]
        R[:, j] = R[:, pj] @ Rloc[:, j]
        t[:, j] = np.einsum("bik,bk->bi", R[:, pj], offsets[:, j]) + t[:, pj]
    st = Posed(p, Rloc, joints, offsets, R, t)
    if skin:
        _skin(model, st, vidx)
    return st


def _skin(model: KinematicModel, st: Posed, vidx) -> None:
    p = st.params
    if vidx is None:
        vidx = np.arange(model.n_verts)
    vidx = np.asarray(vidx, dtype=np.int64)
    shaped = (
        model.template[vidx]
        + _basis_apply(model.shape_basis[vidx], p.beta)
        + _basis_apply(model.expr_basis[vidx], p.psi)
    )
    B, J = st.R.shape[:2]
    A = np.empty((B, J, 3, 4))
    A[..., :3] = st.R
    A[..., 3] = st.t - np.einsum("bjik,bjk->bji", st.R, st.joints)
    blend = np.matmul(model.skinning[vidx], A.reshape(B, J, 12)).reshape(B, len(vidx), 3, 4)
    st.vidx = vidx
    st.shaped = shaped
    st.blend = blend
    st.verts = np.sum(blend[..., :3] * shaped[..., None, :], axis=-1) + blend[..., 3]


def _basis_apply(basis, coef):
    """(V, 3, K) basis times (B, K) coefficients -> (B, V, 3)."""
    V, _, K = basis.shape
    if K == 0:
        return np.zeros((len(coef), V, 3))
    return (coef @ basis.reshape(V * 3, K).T).reshape(len(coef), V, 3)


def _basis_pull(basis, g):
    """Adjoint of :func:`_basis_apply` for cotangents (..., V, 3) -> (..., K)."""
    V, _, K = basis.shape
    return g.reshape(g.shape[:-2] + (V * 3,)) @ basis.reshape(V * 3, K)


def pose_vjp(model: KinematicModel, st: Posed, g_verts=None, g_world=None, g_rloc=None,
             g_transl=None):
    """Reverse pass.

    Cotangents may carry extra leading axes ahead of the batch axis, e.g.
    ``g_verts`` of shape (K, B, Vs, 3).  Returns a :class:`PoseParams` of
    gradients with the same leading axes.
    """
    p = st.params
    B, J = st.t.shape[:2]
    lead = None
    for g, tail in ((g_verts, 2), (g_world, 3), (g_rloc, 3), (g_transl, 1)):
        if g is not None:
            lead = g.shape[: g.ndim - tail]
            break
    if lead is None:
        raise ValueError("pose_vjp needs at least one cotangent")
    gR = np.zeros(lead + (J, 3, 3))
    gt = np.zeros(lead + (J, 3))
    gRloc = np.zeros(lead + (J, 3, 3))
    gjoints = np.zeros(lead + (J, 3))
    gbeta = np.zeros(lead + (p.beta.shape[-1],))
    gpsi = np.zeros(lead + (p.psi.shape[-1],))

    if g_verts is not None:
        vidx = st.vidx
        w = model.skinning[vidx]
        # blend = sum_j w_vj A_j ; verts = blend_R shaped + blend_t
        gblend_R = g_verts[..., :, None] * st.shaped[..., None, :]
        gshaped = np.sum(st.blend[..., :3] * g_verts[..., :, None], axis=-2)
        V = len(vidx)
        wT = np.ascontiguousarray(w.T)
        gA_R = np.matmul(wT, gblend_R.reshape(gblend_R.shape[:-3] + (V, 9))).reshape(lead + (J, 3, 3))
        gA_t = np.matmul(wT, g_verts)
        # A_R = R ; A_t = t - R joints
        gR += gA_R - gA_t[..., :, None] * st.joints[..., None, :]
        gt += gA_t
        gjoints -= np.einsum("...bjik,...bji->...bjk", st.R, gA_t)
        gbeta += _basis_pull(model.shape_basis[vidx], gshaped)
        gpsi += _basis_pull(model.expr_basis[vidx], gshaped)

    if g_world is not None:
        gR += g_world[..., :3]
        gt += g_world[..., 3]
    if g_rloc is not None:
        gRloc += g_rloc

    par = model.parents
    goff = np.zeros(lead + (J, 3))
    Rt = np.swapaxes(st.R, -1, -2)
    for j in range(J - 1, 0, -1):
        pj = par[j]
        gRj, gtj = gR[..., j, :, :], gt[..., j, :]
        gR[..., pj, :, :] += gRj @ np.swapaxes(st.Rloc[:, j], -1, -2) \
            + gtj[..., :, None] * st.offsets[:, j, None, :]
        gRloc[..., j, :, :] += Rt[:, pj] @ gRj
        goff[..., j, :] = np.einsum("bki,...bk->...bi", st.R[:, pj], gtj)
        gt[..., pj, :] += gtj
    gRloc[..., 0, :, :] += gR[..., 0, :, :]
    goff[..., 0, :] = gt[..., 0, :]

    gjoints += goff
    _scatter_parent(gjoints, goff, par)
    gtransl = goff[..., 0, :].copy()
    if g_transl is not None:
        gtransl += g_transl
    gbeta += np.einsum("jck,...bjc->...bk", model.joint_basis, gjoints)
    gr6 = rot6d_vjp(p.r6, gRloc)
    return PoseParams(gr6, gtransl, gbeta, gpsi)


def _scatter_parent(gjoints, goff, par) -> None:
    for j in range(1, len(par)):
        gjoints[..., par[j], :] -= goff[..., j, :]


def lbs_vertices(model: KinematicModel, p: PoseParams, vidx=None) -> np.ndarray:
    return forward(model, p, vidx).verts


def landmarks(model: KinematicModel, p: PoseParams) -> np.ndarray:
    return forward(model, p, model.landmark_indices).verts


def world_transforms(model: KinematicModel, p: PoseParams) -> np.ndarray:
    return forward(model, p, skin=False).world


def apply_root(model: KinematicModel, p: PoseParams, R0, t0) -> PoseParams:
    """Parameters whose posed mesh equals the original mesh moved by (R0, t0)."""
    Rroot = rot6d_to_matrix(p.r6[:, 0])
    new_root = np.asarray(R0) @ Rroot
    j0 = rest_joints(model, p.beta)[:, 0]
    transl = (j0 + p.transl) @ np.asarray(R0).T + t0 - j0
    r6 = p.r6.copy()
    r6[:, 0] = np.concatenate([new_root[..., :, 0], new_root[..., :, 1]], axis=-1)
    return PoseParams(r6, transl, p.beta.copy(), p.psi.copy())


# --------------------------------------------------------------------------
# Synthetic models


@dataclass(frozen=True)
class SynthConfig:
    kind: str                       # "body" | "face" | "chain"
    parents: tuple
    joints: tuple                   # rest joint positions, meters
    n_verts: int
    n_shape: int
    n_expr: int = 0
    n_landmarks: int = 0
    radius: float = 0.05
    leaf_ends: tuple = ()           # one end point per joint (None = derive)
    joint_names: tuple = ()

    def validate(self) -> None:
        J = len(self.parents)
        if J < 1 or len(self.joints) != J:
            raise BadConfig("parents and joints must have equal, positive length")
        if self.parents[0] != ROOT or any(not 0 <= self.parents[j] < j for j in range(1, J)):
            raise BadConfig("parents must be topologically ordered with a single root")
        if self.n_verts < 2 * J:
            raise BadConfig("need at least two vertices per joint")
        if self.n_shape < 0 or self.n_expr < 0:
            raise BadConfig("basis sizes must be non-negative")
        if not 0 <= self.n_landmarks <= self.n_verts:
            raise BadConfig("landmark count out of range")


BODY_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)


def body_config(n_verts: int = 800, n_shape: int = 8) -> SynthConfig:
    """16-joint humanoid facing -z, y up, feet resting on y = 0."""
    parents = (ROOT, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14)
    joints = (
        (0.0, 0.95, 0.0), (0.0, 1.20, 0.0), (0.0, 1.48, 0.0), (0.0, 1.60, 0.0),
        (0.17, 1.43, 0.0), (0.44, 1.43, 0.0), (0.70, 1.43, 0.0),
        (-0.17, 1.43, 0.0), (-0.44, 1.43, 0.0), (-0.70, 1.43, 0.0),
        (0.09, 0.88, 0.0), (0.09, 0.50, 0.0), (0.09, 0.10, 0.0),
        (-0.09, 0.88, 0.0), (-0.09, 0.50, 0.0), (-0.09, 0.10, 0.0),
    )
    ends = [None] * 16
    ends[3] = (0.0, 1.80, 0.0)
    ends[6] = (0.88, 1.43, 0.0)
    ends[9] = (-0.88, 1.43, 0.0)
    ends[12] = (0.09, 0.05, -0.16)
    ends[15] = (-0.09, 0.05, -0.16)
    return SynthConfig("body", parents, joints, n_verts, n_shape, radius=0.05,
                       leaf_ends=tuple(ends), joint_names=BODY_NAMES)


def face_config(n_verts: int = 600, n_shape: int = 16, n_expr: int = 16,
                n_landmarks: int = 64) -> SynthConfig:
    """Neck, head and two eyes; the face looks down -z."""
    parents = (ROOT, 0, 1, 1)
    joints = ((0.0, -0.10, 0.0), (0.0, 0.0, 0.0), (0.032, 0.03, -0.07), (-0.032, 0.03, -0.07))
    return SynthConfig("face", parents, joints, n_verts, n_shape, n_expr, n_landmarks,
                       radius=0.012, joint_names=("neck", "head", "l_eye", "r_eye"))


def chain_config(n_joints: int = 2, n_verts: int = 8, n_shape: int = 2) -> SynthConfig:
    parents = (ROOT,) + tuple(range(n_joints - 1))
    joints = tuple((0.3 * j, 0.0, 0.0) for j in range(n_joints))
    return SynthConfig("chain", parents, joints, n_verts, n_shape, radius=0.05)


def _segment_distance(P, a, b):
    ab = b - a
    u = np.clip(((P - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(P - (a + u[:, None] * ab), axis=1)


def _split_counts(weights, total):
    raw = np.asarray(weights, dtype=np.float64)
    raw = raw / raw.sum() * total
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts


def _bone_segments(cfg: SynthConfig, joints):
    J = len(cfg.parents)
    children = [[c for c in range(J) if cfg.parents[c] == j] for j in range(J)]
    ends = []
    for j in range(J):
        end = cfg.leaf_ends[j] if cfg.leaf_ends and cfg.leaf_ends[j] is not None else None
        if end is not None:
            ends.append(np.asarray(end, dtype=np.float64))
        elif children[j]:
            ends.append(joints[children[j]].mean(axis=0))
        else:
            pj = cfg.parents[j]
            d = joints[j] - joints[pj] if pj >= 0 else np.array([0.0, 0.1, 0.0])
            ends.append(joints[j] + 0.5 * d)
        if np.linalg.norm(ends[-1] - joints[j]) < 1e-6:
            ends[-1] = joints[j] + np.array([0.0, 0.05, 0.0])
    return np.stack(ends)


def _farthest_points(P, k, start):
    chosen = [start]
    d = np.linalg.norm(P - P[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(P - P[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


def synth_model(cfg: SynthConfig, seed: int = 0) -> KinematicModel:
    """Deterministic capsule-limb stand-in for a production body or face model."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    J = len(cfg.parents)
    joints = np.asarray(cfg.joints, dtype=np.float64)
    ends = _bone_segments(cfg, joints)
    lengths = np.linalg.norm(ends - joints, axis=1)

    if cfg.kind == "face":
        verts, owner = _face_surface(cfg, joints, rng)
    else:
        counts = np.maximum(_split_counts(lengths + cfg.radius, cfg.n_verts - 2 * J), 0) + 2
        verts, owner = [], []
        for j in range(J):
            a, b = joints[j], ends[j]
            axis = (b - a) / np.linalg.norm(b - a)
            helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            e1 = np.cross(axis, helper)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(axis, e1)
            n = counts[j]
            u = (np.arange(n) + rng.uniform(0.2, 0.8, n)) / n
            phi = rng.uniform(0, 2 * np.pi, n)
            rad = cfg.radius * (0.8 + 0.2 * rng.uniform(size=n))
            pts = a + np.outer(u, b - a) + rad[:, None] * (np.outer(np.cos(phi), e1) + np.outer(np.sin(phi), e2))
            verts.append(pts)
            owner.extend([j] * n)
        verts = np.concatenate(verts)
        owner = np.asarray(owner)

    V = len(verts)
    dist = np.stack([_segment_distance(verts, joints[j], ends[j]) for j in range(J)], axis=1)
    sigma = max(cfg.radius, 1e-3) * 1.5
    logits = -(dist / sigma) ** 2
    logits[np.arange(V), owner] += 2.0
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w[w < 1e-4] = 0.0
    w /= w.sum(axis=1, keepdims=True)

    # shape modes: per-joint local scalings about the joints, blended by skinning
    shape_basis = np.zeros((V, 3, cfg.n_shape))
    for k in range(cfg.n_shape):
        scales = rng.normal(0.0, 0.04, size=(J, 3))
        disp = np.zeros((V, 3))
        for j in range(J):
            disp += w[:, j:j + 1] * scales[j] * (verts - joints[j])
        shape_basis[:, :, k] = disp
    regressor = w.T / w.sum(axis=0)[:, None]
    # joints move with the surrounding surface; relative joint motion matches the mesh
    joint_basis = np.einsum("jv,vck->jck", regressor, shape_basis)

    expr_basis = np.zeros((V, 3, cfg.n_expr))
    if cfg.n_expr:
        front = verts[:, 2] < 0
        pool = np.flatnonzero(front) if front.any() else np.arange(V)
        for k in range(cfg.n_expr):
            c = verts[rng.choice(pool)]
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            fall = np.exp(-np.sum((verts - c) ** 2, axis=1) / (2 * 0.025**2))
            expr_basis[:, :, k] = 0.01 * fall[:, None] * direction

    if cfg.n_landmarks:
        front = np.flatnonzero(verts[:, 2] < -0.02) if cfg.kind == "face" else np.arange(V)
        if len(front) < cfg.n_landmarks:
            front = np.argsort(verts[:, 2])[: max(cfg.n_landmarks, 1)]
        start = int(np.argmin(verts[front, 2]))
        landmarks_idx = np.sort(front[_farthest_points(verts[front], cfg.n_landmarks, start)])
    else:
        landmarks_idx = np.zeros((0,), np.int64)

    tree = cKDTree(verts)
    _, nbr = tree.query(verts, k=min(5, V))
    pairs = {(min(i, int(n)), max(i, int(n))) for i in range(V) for n in nbr[i, 1:] if n != i}
    edges = np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)

    names = cfg.joint_names or tuple(f"joint{j}" for j in range(J))
    head = names.index("head") if "head" in names else -1
    wrists = tuple(names.index(n) for n in ("l_wrist", "r_wrist") if n in names)
    fingertips = np.zeros((0,), np.int64)
    parts = {}
    dominant = np.argmax(w, axis=1)
    if head >= 0:
        parts["head"] = np.flatnonzero(dominant == head)
    for side, wj in zip(("left_hand", "right_hand"), wrists):
        parts[side] = np.flatnonzero(dominant == wj)
    if wrists:
        tips = []
        for wj in wrists:
            cand = np.flatnonzero(owner == wj)
            reach = np.linalg.norm(verts[cand] - joints[wj], axis=1)
            far = cand[np.argsort(-reach, kind="stable")[: max(12, 5)]]
            tips.append(np.sort(far[_farthest_points(verts[far], 5, 0)]))
        fingertips = np.concatenate(tips)

    model = KinematicModel(
        kind=cfg.kind,
        template=verts,
        parents=np.asarray(cfg.parents, dtype=np.int64),
        joint_mean=joints + 0.0,
        joint_basis=joint_basis,
        skinning=w,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        landmark_indices=landmarks_idx,
        edges=edges,
        fingertip_indices=fingertips,
        head_joint=head,
        wrist_joints=wrists,
        parts=parts,
        joint_names=tuple(names),
    )
    model.validate()
    return model


def _face_surface(cfg: SynthConfig, joints, rng):
    """Ellipsoidal head, neck cylinder and two eyeballs."""
    n_eye = max(2, cfg.n_verts // 30)
    n_neck = max(2, cfg.n_verts // 8)
    n_head = cfg.n_verts - n_neck - 2 * n_eye
    # golden-spiral samples give an even, deterministic covering of the ellipsoid
    k = np.arange(n_head) + 0.5
    polar = np.arccos(1 - 2 * k / n_head)
    azim = np.pi * (1 + 5**0.5) * k + rng.uniform(0, 1e-3, n_head)
    unit = np.stack([np.sin(polar) * np.cos(azim), np.cos(polar), np.sin(polar) * np.sin(azim)], axis=1)
    head = joints[1] + np.array([0.0, 0.02, 0.0]) + unit * np.array([0.075, 0.11, 0.095])
    # a nose bump keeps landmark depth varied
    head[:, 2] -= 0.02 * np.exp(-np.sum((unit - [0, -0.1, -1]) ** 2, axis=1) / 0.05)
    u = (np.arange(n_neck) + 0.5) / n_neck
    phi = rng.uniform(0, 2 * np.pi, n_neck)
    neck = joints[0] + np.stack([0.05 * np.cos(phi), -0.05 + 0.1 * u, 0.05 * np.sin(phi)], axis=1)
    eyes = []
    for e in (2, 3):
        v = rng.normal(size=(n_eye, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        eyes.append(joints[e] + cfg.radius * v)
    verts = np.concatenate([head, neck] + eyes)
    owner = np.concatenate([np.full(n_head, 1), np.full(n_neck, 0), np.full(n_eye, 2), np.full(n_eye, 3)])
    return verts, owner


# --------------------------------------------------------------------------
# Persistence

_ARRAY_FIELDS = ("template", "parents", "joint_mean", "joint_basis", "skinning", "shape_basis",
                 "expr_basis", "landmark_indices", "edges", "fingertip_indices")


def model_arrays(model: KinematicModel, with_info: bool = True) -> dict:
    arrays = {name: getattr(model, name) for name in _ARRAY_FIELDS}
    for name in sorted(model.parts):
        arrays[f"part/{name}"] = np.asarray(model.parts[name], dtype=np.int64)
    arrays["meta"] = container.pack_meta({
        "type": "model",
        "kind": model.kind,
        "head_joint": model.head_joint,
        "wrist_joints": list(model.wrist_joints),
        "joint_names": list(model.joint_names),
        **({"info": dict(model.info)} if with_info and model.info else {}),
    })
    return arrays


def model_from_arrays(arrays: dict) -> KinematicModel:
    try:
        meta = container.unpack_meta(arrays["meta"])
        if meta.get("type") != "model":
            raise FormatError("container does not hold a model")
        fields = {name: arrays[name] for name in _ARRAY_FIELDS}
    except KeyError as exc:
        raise FormatError(f"model container missing {exc}") from None
    parts = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("part/")}
    model = KinematicModel(kind=meta["kind"], head_joint=meta["head_joint"],
                           wrist_joints=tuple(meta["wrist_joints"]), parts=parts,
                           joint_names=tuple(meta["joint_names"]), info=dict(meta.get("info", {})), **fields)
    model.validate()
    return model


def save_model(model: KinematicModel, path) -> None:
    container.write(path, model_arrays(model))


def load_model(path) -> KinematicModel:
    return model_from_arrays(container.read(path))


def model_digest(model: KinematicModel) -> str:
    import hashlib
    return hashlib.sha256(container.encode(model_arrays(model, with_info=False))).hexdigest()[:16]


def describe(model: KinematicModel) -> str:
    return json.dumps({"kind": model.kind, "joints": model.n_joints, "verts": model.n_verts,
                       "shape": model.n_shape, "expr": model.n_expr,
                       "landmarks": int(len(model.landmark_indices))})
