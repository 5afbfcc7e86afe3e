"""Synthetic datasets for the three fitting tasks.

Every record draws from its own generator seeded with
``SeedSequence([master_seed, record_index])`` so records can be produced in any
order (or in parallel) and still come out bit-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import container
from .errors import BadConfig, FormatError
from .geometry import Intrinsics, RigidTransform, axis_angle_to_matrix, matrix_to_rot6d
from .model import KinematicModel, PoseParams, forward
from .residuals import (OBS_TYPES, Body2DObs, FaceObs, HMDObs, default_calibration,
                        half_space_visibility, layout_for)

SPLITS = ("train", "val", "test")

# per-joint Euler (xyz, radians) limits as (lo, hi) pairs
BODY_LIMITS = {
    "pelvis": ((-0.15, 0.15), (-0.5, 0.5), (-0.1, 0.1)),
    "spine": ((-0.3, 0.3), (-0.3, 0.3), (-0.2, 0.2)),
    "neck": ((-0.3, 0.3), (-0.4, 0.4), (-0.2, 0.2)),
    "head": ((-0.4, 0.4), (-0.6, 0.6), (-0.3, 0.3)),
    "l_shoulder": ((-0.6, 0.6), (-0.3, 1.4), (-1.0, 0.8)),
    "l_elbow": ((-0.3, 0.3), (0.0, 1.5), (-0.3, 0.3)),
    "l_wrist": ((-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5)),
    "r_shoulder": ((-0.6, 0.6), (-1.4, 0.3), (-0.8, 1.0)),
    "r_elbow": ((-0.3, 0.3), (-1.5, 0.0), (-0.3, 0.3)),
    "r_wrist": ((-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5)),
    "l_hip": ((-0.4, 0.3), (-0.2, 0.2), (-0.2, 0.2)),
    "l_knee": ((0.0, 0.8), (0.0, 0.0), (0.0, 0.0)),
    "l_ankle": ((-0.2, 0.2), (-0.1, 0.1), (-0.1, 0.1)),
    "r_hip": ((-0.4, 0.3), (-0.2, 0.2), (-0.2, 0.2)),
    "r_knee": ((0.0, 0.8), (0.0, 0.0), (0.0, 0.0)),
    "r_ankle": ((-0.2, 0.2), (-0.1, 0.1), (-0.1, 0.1)),
}

FACE_LIMITS = {
    "neck": ((-0.2, 0.2), (-0.3, 0.3), (-0.1, 0.1)),
    "head": ((-0.3, 0.3), (-0.5, 0.5), (-0.2, 0.2)),
    "l_eye": ((-0.3, 0.3), (-0.4, 0.4), (0.0, 0.0)),
    "r_eye": ((-0.3, 0.3), (-0.4, 0.4), (0.0, 0.0)),
}


@dataclass
class PoseRange:
    """Sampling ranges; ``limits`` maps joint name -> ((lo, hi) x 3 Euler axes)."""
    limits: dict = field(default_factory=dict)
    transl_box: tuple = ((-0.5, 0.5), (0.0, 0.0), (-0.5, 0.5))
    shape_sigma: float = 1.0
    expr_sigma: float = 0.0
    ground: bool = True   # lift the mesh so its lowest vertex rests on y = 0

    def joint_limits(self, model: KinematicModel) -> np.ndarray:
        lim = np.zeros((model.n_joints, 3, 2))
        for j, name in enumerate(model.joint_names):
            if name in self.limits:
                lim[j] = np.asarray(self.limits[name], dtype=np.float64)
        if np.any(lim[..., 0] > lim[..., 1]):
            raise BadConfig("angle limit with lo > hi")
        if np.any(np.abs(lim[:, 1, :]) >= np.pi / 2):
            raise BadConfig("middle Euler axis limits must stay inside (-pi/2, pi/2)")
        return lim


def body_range() -> PoseRange:
    return PoseRange(limits=BODY_LIMITS)


def face_range() -> PoseRange:
    return PoseRange(limits=FACE_LIMITS, transl_box=((-0.05, 0.05), (-0.05, 0.05), (0.5, 0.7)),
                     shape_sigma=1.0, expr_sigma=1.0, ground=False)


def record_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def record_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def sample_pose(model: KinematicModel, prange: PoseRange, rng: np.random.Generator) -> PoseParams:
    """One random pose (batch of 1) inside the configured limits.

    Ground placement is applied by :func:`place_on_ground` once vertices exist.
    """
    lim = prange.joint_limits(model)
    angles = rng.uniform(lim[..., 0], lim[..., 1])
    R = Rotation.from_euler("xyz", angles).as_matrix()
    box = np.asarray(prange.transl_box, dtype=np.float64)
    transl = rng.uniform(box[:, 0], box[:, 1])
    beta = prange.shape_sigma * rng.normal(size=model.n_shape)
    psi = prange.expr_sigma * rng.normal(size=model.n_expr)
    return PoseParams(matrix_to_rot6d(R)[None], transl[None], beta[None], psi[None])


def place_on_ground(model: KinematicModel, pose: PoseParams, chunk: int = 512) -> PoseParams:
    """Shift root translation in y so each instance's lowest vertex sits at y = 0."""
    transl = pose.transl.copy()
    B = len(transl)
    for a in range(0, B, chunk):
        sl = slice(a, a + chunk)
        p = PoseParams(pose.r6[sl], pose.transl[sl], pose.beta[sl], pose.psi[sl])
        v = forward(model, p).verts
        transl[sl, 1] -= v[..., 1].min(axis=1)
    return PoseParams(pose.r6, transl, pose.beta, pose.psi)


def _stack(poses) -> PoseParams:
    return PoseParams(*(np.concatenate([getattr(p, f) for p in poses]) for f in ("r6", "transl", "beta", "psi")))


def _noisy_rotation(R, sigma, rng):
    if sigma <= 0:
        return R
    return R @ axis_angle_to_matrix(sigma * rng.normal(size=R.shape[:-2] + (3,)))


# --------------------------------------------------------------------------
# Record construction (batched; every row uses its own generator)


def make_hmd_records(model, pose: PoseParams, rngs, calib: RigidTransform | None = None,
                     visibility: str = "half", pos_sigma: float = 0.005, rot_sigma: float = 0.01) -> HMDObs:
    if visibility not in ("full", "half"):
        raise BadConfig(f"visibility must be 'full' or 'half', got {visibility!r}")
    calib = calib or default_calibration()
    B = len(pose.transl)
    st = forward(model, pose, model.fingertip_indices)
    hj = model.head_joint
    Rh = st.R[:, hj] @ calib.R
    th = np.einsum("bij,j->bi", st.R[:, hj], calib.t) + st.t[:, hj]
    wr = list(model.wrist_joints)
    Rw, tw = st.R[:, wr], st.t[:, wr]
    tips = st.verts.reshape(B, 2, 5, 3)
    vis = np.ones((B, 2))
    if visibility == "half":
        for b in range(B):
            head = RigidTransform(Rh[b], th[b])
            for k in range(2):
                pts = np.concatenate([tw[b, k][None], tips[b, k]])
                vis[b, k] = float(np.all(half_space_visibility(head, pts)))
    headset = np.empty((B, 3, 4))
    wrists = np.empty((B, 2, 3, 4))
    ftips = np.empty((B, 2, 5, 3))
    for b, rng in enumerate(rngs):
        headset[b, :, :3] = _noisy_rotation(Rh[b], rot_sigma, rng)
        headset[b, :, 3] = th[b] + pos_sigma * rng.normal(size=3)
        wrists[b, :, :, :3] = _noisy_rotation(Rw[b], rot_sigma, rng)
        wrists[b, :, :, 3] = tw[b] + pos_sigma * rng.normal(size=(2, 3))
        ftips[b] = tips[b] + pos_sigma * rng.normal(size=(2, 5, 3))
    # unobserved hands carry no signal
    wrists *= vis[:, :, None, None]
    ftips *= vis[:, :, None, None]
    return HMDObs(headset, wrists, ftips, vis, pose.beta.copy())


def make_hmd_record(model, theta_pose: PoseParams, calib, visibility, noise, rng):
    pos_sigma, rot_sigma = noise if isinstance(noise, tuple) else (noise, noise)
    return make_hmd_records(model, theta_pose, [rng], calib, visibility, pos_sigma, rot_sigma)


def sample_camera(rng, root_xy) -> tuple:
    s = rng.uniform(180.0, 220.0)
    t = np.array([256.0, 256.0]) - s * np.asarray(root_xy) + rng.normal(0, 10.0, size=2)
    return s, t


def make_body2d_records(model, pose: PoseParams, cams, rngs, sigma: float = 1.0,
                        dropout: float = 0.0) -> Body2DObs:
    if not 0.0 <= dropout <= 1.0:
        raise BadConfig("dropout rate must be in [0, 1]")
    st = forward(model, pose, skin=False)
    B, J = st.t.shape[:2]
    s = np.array([c[0] for c in cams])
    t = np.stack([c[1] for c in cams])
    kp = s[:, None, None] * st.t[..., :2] + t[:, None, :]
    conf = np.ones((B, J))
    for b, rng in enumerate(rngs):
        kp[b] += sigma * rng.normal(size=(J, 2))
        conf[b] = (rng.uniform(size=J) >= dropout).astype(np.float64)
    return Body2DObs(kp, conf)


def make_body2d_record(model, pose, cam, sigma, dropout, rng):
    return make_body2d_records(model, pose, [cam], [rng], sigma, dropout)


def make_face_records(model, pose: PoseParams, rngs, K: Intrinsics | None = None,
                      sigma: float = 1.0) -> FaceObs:
    K = K or Intrinsics()
    P = forward(model, pose, model.landmark_indices).verts
    z = P[..., 2]
    lm = np.stack([K.fx * P[..., 0] / z + K.cx, K.fy * P[..., 1] / z + K.cy], axis=-1)
    for b, rng in enumerate(rngs):
        lm[b] += sigma * rng.normal(size=lm.shape[1:])
    intr = np.tile([K.fx, K.fy, K.cx, K.cy], (len(lm), 1)).astype(np.float64)
    return FaceObs(lm, intr)


def make_face_record(model, pose, K, rng, sigma: float = 1.0):
    return make_face_records(model, pose, [rng], K, sigma)


# --------------------------------------------------------------------------
# Datasets


@dataclass
class DataConfig:
    task: str = "hmd"
    counts: tuple = (20000, 2000, 2000)
    seed: int = 0
    visibility: str = "half"
    noise_px: float = 1.0
    noise_pos: float = 0.005
    noise_rot: float = 0.01
    keypoint_dropout: float = 0.0
    split_ratio: float | None = None   # e.g. 0.8 -> floor(0.8 n) train, rest test

    def total(self) -> int:
        return int(sum(self.counts))


def ratio_split(n: int, ratio: float = 0.8) -> np.ndarray:
    n_train = int(np.floor(ratio * n))
    return np.array([0] * n_train + [2] * (n - n_train), dtype=np.int64)


@dataclass
class Dataset:
    task: str
    theta: np.ndarray         # (n, P) ground-truth parameters
    obs: object               # batched observation dataclass
    split: np.ndarray         # (n,) 0 train / 1 val / 2 test
    seeds: np.ndarray         # (n,) per-record seed provenance
    record_ids: np.ndarray    # (n,)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.theta)

    def subset(self, which) -> "Dataset":
        if isinstance(which, str):
            idx = np.flatnonzero(self.split == SPLITS.index(which))
        else:
            idx = np.asarray(which)
        return Dataset(self.task, self.theta[idx], self.obs.take(idx), self.split[idx], self.seeds[idx],
                       self.record_ids[idx], dict(self.meta))


def synth_dataset(model: KinematicModel, cfg: DataConfig, prange: PoseRange | None = None,
                  chunk: int = 1024) -> Dataset:
    task = cfg.task
    if task not in OBS_TYPES:
        raise BadConfig(f"unknown task {task!r}")
    if prange is None:
        prange = face_range() if task == "face" else body_range()
    n = cfg.total()
    if cfg.split_ratio is not None:
        split = ratio_split(n, cfg.split_ratio)
    else:
        split = np.concatenate([np.full(c, k, dtype=np.int64) for k, c in enumerate(cfg.counts)])
    layout = layout_for(task, model)
    thetas, obs_parts = [], []
    for a in range(0, n, chunk):
        ids = range(a, min(n, a + chunk))
        rngs = [record_rng(cfg.seed, i) for i in ids]
        pose = _stack([sample_pose(model, prange, rng) for rng in rngs])
        if prange.ground:
            pose = place_on_ground(model, pose)
        if task == "hmd":
            obs = make_hmd_records(model, pose, rngs, None, cfg.visibility, cfg.noise_pos, cfg.noise_rot)
            theta = layout.pack(pose)
        elif task == "body2d":
            st = forward(model, pose, skin=False)
            cams = [sample_camera(rng, st.t[b, 0, :2]) for b, rng in enumerate(rngs)]
            obs = make_body2d_records(model, pose, cams, rngs, cfg.noise_px, cfg.keypoint_dropout)
            theta = layout.pack(pose, (np.array([c[0] for c in cams]), np.stack([c[1] for c in cams])))
        else:
            obs = make_face_records(model, pose, rngs, None, cfg.noise_px)
            theta = layout.pack(pose)
        thetas.append(theta)
        obs_parts.append(obs)
    from .residuals import concat_obs
    seeds = np.array([record_seed(cfg.seed, i) for i in range(n)], dtype=np.int64)
    return Dataset(task, np.concatenate(thetas), concat_obs(obs_parts), split, seeds,
                   np.arange(n, dtype=np.int64), {"task": task, "seed": cfg.seed})


def record_hash(theta_row) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta_row, dtype="<f8").tobytes()).hexdigest()


def dataset_arrays(ds: Dataset) -> dict:
    arrays = {"meta": container.pack_meta({"type": "dataset", "task": ds.task, **ds.meta}),
              "index": np.stack([ds.record_ids, np.arange(len(ds)), ds.split, ds.seeds], axis=1),
              "theta": ds.theta}
    for name, arr in ds.obs.arrays().items():
        arrays[f"obs/{name}"] = arr
    return arrays


def write_dataset(ds: Dataset, path) -> None:
    container.write(path, dataset_arrays(ds))


def dataset_from_arrays(arrays: dict) -> Dataset:
    try:
        meta = container.unpack_meta(arrays["meta"])
        index = arrays["index"]
        theta = arrays["theta"]
    except KeyError as exc:
        raise FormatError(f"dataset container missing {exc}") from None
    if meta.get("type") != "dataset":
        raise FormatError("container does not hold a dataset")
    task = meta["task"]
    if index.ndim != 2 or index.shape[1] != 4 or len(index) != len(theta):
        raise FormatError("dataset index does not match record count")
    obs_cls = OBS_TYPES[task]
    obs = obs_cls(**{k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("obs/")})
    # rows are addressed through the index so stored order does not matter
    order = np.argsort(index[:, 0], kind="stable")
    rows = index[order, 1]
    meta = {k: v for k, v in meta.items() if k != "type"}
    meta.pop("task", None)
    return Dataset(task, theta[rows], obs.take(rows), index[order, 2], index[order, 3], index[order, 0], meta)


def read_dataset(path) -> Dataset:
    return dataset_from_arrays(container.read(path))
