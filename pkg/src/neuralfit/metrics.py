"""Evaluation metrics.  Inputs are in meters; every metric is reported in millimeters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, ShapeMismatch
from .geometry import procrustes_align
from .model import KinematicModel, forward

MM = 1000.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeMismatch(f"point sets differ in shape: {a.shape} vs {b.shape}")
    return a, b


def mean_distance(X, Y) -> np.ndarray:
    """Mean Euclidean distance over the second-to-last axis, in mm."""
    X, Y = _pair(X, Y)
    return MM * np.mean(np.linalg.norm(X - Y, axis=-1), axis=-1)


def v2v(M_hat, M, subset=None) -> np.ndarray:
    """Mean per-vertex error; ``subset`` selects vertex indices."""
    if subset is not None:
        M_hat, M = np.asarray(M_hat)[..., subset, :], np.asarray(M)[..., subset, :]
    return mean_distance(M_hat, M)


def mpjpe(J_hat, J) -> np.ndarray:
    return mean_distance(J_hat, J)


def mplpe(P_hat, P) -> np.ndarray:
    return mean_distance(P_hat, P)


def _align_mean_distance(X_hat, X, iters: int = 100, tol: float = 1e-15):
    """Similarity alignment of ``X_hat`` that minimises the mean Euclidean distance to ``X``.

    Iteratively reweighted Procrustes from the least-squares alignment; each
    reweighted solve minimises a majoriser of the distance sum, so the cost
    never increases.  The identity is kept if it is still better.
    """
    raw = np.mean(np.linalg.norm(X_hat - X, axis=-1))
    try:
        best = procrustes_align(X_hat, X)[3]
    except DegenerateInput:
        return X_hat
    best_cost = np.mean(np.linalg.norm(best - X, axis=-1))
    for _ in range(iters):
        d = np.linalg.norm(best - X, axis=-1)
        cand = procrustes_align(X_hat, X, 1.0 / np.maximum(d, 1e-12))[3]
        cost = np.mean(np.linalg.norm(cand - X, axis=-1))
        if cost < best_cost:
            done = best_cost - cost <= tol * best_cost
            best, best_cost = cand, cost
            if done:
                break
        else:
            break
    return X_hat if raw < best_cost else best


def pa(metric, X_hat, X, subset=None):
    """``metric`` after similarity-aligning each estimate to its ground truth.

    Alignment uses the same point set the metric is evaluated on and minimises
    the mean distance itself, so the aligned value never exceeds the raw one.
    """
    X_hat, X = _pair(X_hat, X)
    if subset is not None:
        X_hat, X = X_hat[..., subset, :], X[..., subset, :]
    if X.ndim == 2:
        return metric(_align_mean_distance(X_hat, X), X)
    flat_hat = X_hat.reshape((-1,) + X.shape[-2:])
    flat = X.reshape(flat_hat.shape)
    aligned = np.stack([_align_mean_distance(a, b) for a, b in zip(flat_hat, flat)])
    return metric(aligned, flat).reshape(X.shape[:-2])


def ground_penetration(M) -> np.ndarray:
    """Mean depth below the y = 0 plane over vertices under it (0 if none), in mm."""
    M = np.asarray(M, dtype=np.float64)
    y = M[..., 1]
    below = y < 0
    n = below.sum(axis=-1)
    depth = np.where(below, -y, 0.0).sum(axis=-1)
    return MM * np.where(n > 0, depth / np.maximum(n, 1), 0.0)


# --------------------------------------------------------------------------
# Reports


BODY_METRICS = ("v2v", "pa_v2v", "mpjpe", "pa_mpjpe", "ground", "v2v_head", "v2v_left_hand",
                "v2v_right_hand")
FACE_METRICS = ("v2v", "pa_v2v", "mplpe", "pa_mplpe")


def _part(model: KinematicModel, name: str):
    return model.parts.get(name)


def instance_metrics(task, theta_hat, theta_gt, obs, include_pa: bool = True) -> dict:
    """Per-instance metric arrays for a batch of estimates."""
    model = task.model
    est = forward(model, task.pose(theta_hat, obs)[0])
    gt = forward(model, task.pose(theta_gt, obs)[0])
    out = {"v2v": v2v(est.verts, gt.verts)}
    if include_pa:
        out["pa_v2v"] = pa(mean_distance, est.verts, gt.verts)
    if task.name == "face":
        lm = model.landmark_indices
        out["mplpe"] = mplpe(est.verts[:, lm], gt.verts[:, lm])
        if include_pa:
            out["pa_mplpe"] = pa(mean_distance, est.verts[:, lm], gt.verts[:, lm])
        return out
    out["mpjpe"] = mpjpe(est.t, gt.t)
    if include_pa:
        out["pa_mpjpe"] = pa(mean_distance, est.t, gt.t)
    out["ground"] = ground_penetration(est.verts)
    for name, key in (("head", "v2v_head"), ("left_hand", "v2v_left_hand"), ("right_hand", "v2v_right_hand")):
        idx = _part(model, name)
        if idx is not None and len(idx):
            out[key] = v2v(est.verts, gt.verts, idx)
    return out


@dataclass
class EvalReport:
    record_ids: np.ndarray
    values: dict                       # metric -> (n,) per-instance values
    curves: dict = field(default_factory=dict)   # metric -> (N+1,) per-iteration means
    meta: dict = field(default_factory=dict)

    @property
    def means(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.values.items()}

    def write_csv(self, path) -> None:
        keys = list(self.values)
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["record", *keys])
            for i, rid in enumerate(self.record_ids):
                out.writerow([int(rid), *(f"{self.values[k][i]:.9g}" for k in keys)])
            out.writerow(["mean", *(f"{self.means[k]:.9g}" for k in keys)])

    def write_curves(self, path) -> None:
        write_curve_csv(path, self.curves)


def curve_aggregate(per_iter: list) -> dict:
    """Mean of each metric at each iteration.

    ``per_iter[n]`` maps metric names to per-instance arrays at iteration n.
    """
    if not per_iter:
        return {}
    keys = list(per_iter[0])
    return {k: np.array([float(np.mean(it[k])) for it in per_iter]) for k in keys}


def write_curve_csv(path, curves: dict) -> None:
    keys = list(curves)
    n = len(next(iter(curves.values()))) if curves else 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iter", *keys])
        for i in range(n):
            out.writerow([i, *(f"{curves[k][i]:.9g}" for k in keys)])


def read_curve_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    head, body = rows[0], rows[1:]
    return {k: np.array([float(r[j]) for r in body]) for j, k in enumerate(head) if k != "iter"}


def evaluate_trajectory(task, thetas, theta_gt, obs, data_terms=None, record_ids=None,
                        include_pa: bool = True, meta=None) -> EvalReport:
    """Final-iterate report plus per-iteration curves for a trajectory Theta_0..Theta_N."""
    per_iter = []
    for n, th in enumerate(thetas):
        m = instance_metrics(task, th, theta_gt, obs, include_pa=include_pa and n == len(thetas) - 1)
        if data_terms is not None:
            m["data_term"] = np.asarray(data_terms[n])
        per_iter.append(m)
    final = per_iter[-1]
    curves = curve_aggregate([{k: v for k, v in it.items() if not k.startswith("pa_")} for it in per_iter])
    ids = np.arange(len(theta_gt)) if record_ids is None else np.asarray(record_ids)
    return EvalReport(ids, final, curves, dict(meta or {}))
