"""Classic fitting baseline: damped Gauss-Newton (LM), gradient descent and the
hand-tuned prior energy it minimises.

Sign convention: residuals are ``observed - predicted`` with Jacobian
``J = dr/dtheta``; :func:`lm_step` solves ``(J^T J + damping diag(J^T J)) d = J^T r``
and the caller applies ``theta <- theta - d``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import BadConfig, SingularSystem
from .geometry import IDENTITY_6D, axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix
from .residuals import (GMM, Task, gmm_residual, gravity_residual, temporal_residual)


@dataclass
class LMOptions:
    max_iters: int = 100
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    min_diag: float = 1e-8
    relative_floor: float = 1e-2
    convergence_tol: float = 1e-10
    abs_tol: float = 1e-24
    max_damping: float = 1e16

    def __post_init__(self):
        if min(self.max_iters, self.initial_damping, self.damping_up, self.damping_down,
               self.min_diag, self.convergence_tol) <= 0:
            raise BadConfig("LM options must be positive")
        if self.damping_up < 1.0 or self.damping_down < 1.0:
            raise BadConfig("damping factors must be >= 1")


def lm_step(J, r, damping: float, min_diag: float = 1e-8, relative_floor: float = 0.0) -> np.ndarray:
    """Solve the diagonally damped normal equations for one LM increment.

    The damping diagonal is clamped below by ``max(min_diag, relative_floor *
    max(diag))`` so weakly observed coordinates still receive damping.
    """
    J = np.asarray(J, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if damping < 0:
        raise BadConfig("damping must be non-negative")
    A = J.T @ J
    diag = np.diagonal(A).copy()
    floor = max(min_diag, relative_floor * (diag.max() if diag.size else 0.0))
    diag = np.maximum(diag, floor)
    A[np.diag_indices_from(A)] += damping * diag
    try:
        c = cho_factor(A, lower=True, check_finite=False)
    except LinAlgError:
        raise SingularSystem("damped normal matrix is not positive-definite") from None
    dx = cho_solve(c, J.T @ r, check_finite=False)
    if not np.all(np.isfinite(dx)):
        raise SingularSystem("LM solve produced non-finite values")
    return dx


# --------------------------------------------------------------------------
# Baseline energy


@dataclass
class BaselineWeights:
    data: float = 1.0
    gravity: float = 1.0
    gmm: float = 0.1
    temporal: float = 1.0
    face_reg: dict = field(default_factory=lambda: {"rot": 1.0, "transl": 0.0, "psi": 1.0, "beta": 1.0})


@dataclass
class Priors:
    gmm: GMM | None = None
    weights: BaselineWeights = field(default_factory=BaselineWeights)


def prior_joints(task: Task) -> np.ndarray:
    """Columns the pose GMM acts on: 6D rotations of every non-root joint."""
    return task.layout.joint_columns(range(1, task.model.n_joints))


class BaselineObjective:
    """Stacked least-squares residuals for a sequence of T frames.

    Body tasks: data + gravity + GMM pose prior (+ temporal when T > 1).
    Face task: data + per-group weighted squared parameter norm (rotations are
    measured from the identity encoding).
    """

    def __init__(self, task: Task, obs, priors: Priors | None = None):
        self.task = task
        self.obs = obs
        self.priors = priors or Priors()
        self.T = len(obs)
        self.P = task.n_params
        w = self.priors.weights
        body = task.name in ("body2d", "hmd")
        self.use_gravity = body and w.gravity > 0
        self.use_gmm = body and w.gmm > 0 and self.priors.gmm is not None
        self.use_temporal = body and w.temporal > 0 and self.T > 1
        self.use_face_reg = task.name == "face" and any(v > 0 for v in w.face_reg.values())
        if self.use_gmm:
            self.gmm_cols = prior_joints(task)
            if len(self.gmm_cols) != self.priors.gmm.dim:
                raise BadConfig(f"GMM dimension {self.priors.gmm.dim} != {len(self.gmm_cols)} pose entries")
        if self.use_face_reg:
            lay = task.layout
            self.reg_w = np.zeros(self.P)
            self.reg_center = np.zeros(self.P)
            for name, _, _ in lay.blocks:
                self.reg_w[lay.slice(name)] = w.face_reg.get(name, 0.0)
            self.reg_center[lay.slice("rot")] = np.tile(IDENTITY_6D, lay.n_joints)

    def split(self, x):
        return np.asarray(x, dtype=np.float64).reshape(self.T, self.P)

    def residuals(self, x, jacobian: bool = True):
        """Return (r, J or None, constant, per-term energies)."""
        th = self.split(x)
        T, P = self.T, self.P
        w = self.priors.weights
        rows, jacs, terms, const = [], [], {}, 0.0

        pkt = self.task.evaluate(th, self.obs, gradient=False, jacobian=jacobian)
        sw = np.sqrt(w.data)
        rows.append(sw * pkt.r.reshape(-1))
        terms["data_term"] = float(np.sum(pkt.r**2))
        if jacobian:
            Jd = np.zeros((T, pkt.r.shape[1], T, P))
            for t in range(T):
                Jd[t, :, t] = pkt.J[t]
            jacs.append(sw * Jd.reshape(-1, T * P))

        if self.use_gravity:
            sw = np.sqrt(w.gravity)
            vals = []
            for t in range(T):
                rho, Jr = gravity_residual(th[t], self.task.layout)
                rows.append(sw * rho)
                vals.append(rho @ rho)
                if jacobian:
                    Jg = np.zeros((3, T * P))
                    Jg[:, t * P:(t + 1) * P] = sw * Jr
                    jacs.append(Jg)
            terms["gravity"] = float(np.sum(vals))
        if self.use_gmm:
            sw = np.sqrt(w.gmm)
            total = 0.0
            for t in range(T):
                rho, Jr, c = gmm_residual(th[t, self.gmm_cols], self.priors.gmm)
                rows.append(sw * rho)
                const += w.gmm * c
                total += rho @ rho + c
                if jacobian:
                    Jg = np.zeros((len(rho), T * P))
                    Jg[:, t * P + self.gmm_cols] = sw * Jr
                    jacs.append(Jg)
            terms["gmm"] = float(total)
        if self.use_temporal:
            sw = np.sqrt(w.temporal)
            rho, Jr = temporal_residual(self.task, th, self.obs)
            rows.append(sw * rho)
            terms["temporal"] = float(rho @ rho)
            if jacobian:
                jacs.append(sw * Jr)
        if self.use_face_reg:
            sw = np.sqrt(self.reg_w)
            rho = (th - self.reg_center) * sw
            rows.append(rho.reshape(-1))
            terms["face_reg"] = float(np.sum(rho**2))
            if jacobian:
                jacs.append(np.kron(np.eye(T), np.diag(sw)))

        r = np.concatenate(rows)
        J = np.concatenate(jacs) if jacobian else None
        return r, J, const, terms

    def energy(self, x):
        r, _, const, terms = self.residuals(x, jacobian=False)
        return float(r @ r + const), terms


def baseline_energy(task: Task, theta, obs, priors: Priors | None = None):
    """Weighted prior energy and its gradient for T stacked frames ``theta`` (T, P)."""
    obj = BaselineObjective(task, obs, priors)
    r, J, const, _ = obj.residuals(np.asarray(theta).reshape(-1))
    return float(r @ r + const), (2.0 * J.T @ r).reshape(np.shape(np.atleast_2d(theta)))


# --------------------------------------------------------------------------
# Solvers


@dataclass
class TrajectoryRow:
    iter: int
    energy: float
    terms: dict
    damping: float
    accepted: bool = True


@dataclass
class Trajectory:
    thetas: list
    rows: list

    @property
    def energies(self) -> np.ndarray:
        return np.array([row.energy for row in self.rows if row.accepted])

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]

    def write_csv(self, path) -> None:
        keys = sorted({k for row in self.rows for k in row.terms})
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iter", "energy", *keys, "damping", "accepted"])
            for row in self.rows:
                out.writerow([row.iter, repr(row.energy), *(repr(row.terms.get(k, 0.0)) for k in keys),
                              repr(row.damping), int(row.accepted)])


def perturb_rotations(task: Task, theta, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Right-multiply every joint rotation by a random rotation with axis-angle
    components ~ N(0, sigma); other parameters are left alone."""
    theta = np.array(theta, dtype=np.float64)
    B, J = theta.shape[0], task.layout.n_joints
    cols = task.layout.slice("rot")
    R = rot6d_to_matrix(theta[:, cols].reshape(B, J, 6))
    noise = axis_angle_to_matrix(sigma * rng.normal(size=(B, J, 3)))
    theta[:, cols] = matrix_to_rot6d(R @ noise).reshape(B, -1)
    return theta


def lm_fit(task: Task, theta0, obs, priors: Priors | None = None,
           opts: LMOptions | None = None) -> Trajectory:
    """Levenberg-Marquardt with multiplicative damping adaptation.

    One iteration is one accepted step; rejected trials inside it raise the
    damping, are retried, and are logged with ``accepted=False``.  Accepted
    energies never increase.
    """
    opts = opts or LMOptions()
    obj = BaselineObjective(task, obs, priors)
    x = np.asarray(theta0, dtype=np.float64).reshape(-1).copy()
    r, J, const, terms = obj.residuals(x)
    E = float(r @ r + const)
    damping = opts.initial_damping
    traj = Trajectory([obj.split(x).copy()], [TrajectoryRow(0, E, terms, damping)])
    for it in range(1, opts.max_iters + 1):
        if E - const <= opts.abs_tol:
            break
        accepted = False
        while not accepted:
            try:
                dx = lm_step(J, r, damping, opts.min_diag, opts.relative_floor)
                x_new = x - dx
                r_new, J_new, const_new, terms_new = obj.residuals(x_new)
                E_new = float(r_new @ r_new + const_new)
                accepted = bool(np.isfinite(E_new) and E_new < E)
            except (SingularSystem, ArithmeticError, ValueError):
                E_new, terms_new = np.inf, {}
            if not accepted:
                damping = max(damping, 1e-12) * opts.damping_up
                traj.rows.append(TrajectoryRow(it, E_new, terms_new, damping, accepted=False))
                if damping > opts.max_damping:
                    return traj
        drop = E - E_new
        x, r, J, const, terms, E = x_new, r_new, J_new, const_new, terms_new, E_new
        damping = max(damping / opts.damping_down, 1e-15)
        traj.thetas.append(obj.split(x).copy())
        traj.rows.append(TrajectoryRow(it, E, terms, damping))
        if drop <= opts.convergence_tol * max(abs(E + drop), 1e-300):
            break
    return traj


def gd_fit(task, theta0, obs, step: float, iters: int) -> Trajectory:
    """Plain gradient descent on the data term: theta <- theta - step * g."""
    th = np.atleast_2d(np.asarray(theta0, dtype=np.float64)).copy()
    thetas, rows = [th.copy()], []
    for k in range(iters + 1):
        pkt = task.evaluate(th, obs)
        E = float(np.sum(pkt.data_term))
        rows.append(TrajectoryRow(k, E, {"data_term": E}, 0.0))
        if k == iters:
            break
        th = th - step * pkt.g
        thetas.append(th.copy())
    return Trajectory(thetas, rows)
