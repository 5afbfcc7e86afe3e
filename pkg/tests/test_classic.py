import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralfit.classic import (BaselineWeights, LMOptions, Priors, baseline_energy, gd_fit, lm_fit, lm_step,
                               prior_joints)
from neuralfit.datagen import DataConfig, synth_dataset
from neuralfit.errors import BadConfig, SingularSystem
from neuralfit.residuals import fit_gmm_em, gmm_prior, gravity_loss, make_task, temporal_loss

DATA_ONLY = Priors(None, BaselineWeights(gravity=0, gmm=0, temporal=0, face_reg={}))


def test_lm_step_identity(rng):
    r = rng.normal(size=7)
    for lam in (0.0, 0.5, 3.0):
        assert np.max(np.abs(lm_step(np.eye(7), r, lam) - r / (1 + lam))) < 1e-14


def test_lm_step_least_squares(rng):
    A = rng.normal(size=(30, 6))
    b = rng.normal(size=30)
    theta = rng.normal(size=6)
    # r = obs - pred = b - A theta, so dr/dtheta = -A
    step = lm_step(-A, b - A @ theta, 0.0)
    ls = np.linalg.lstsq(A, b, rcond=None)[0]
    assert np.max(np.abs((theta - step) - ls)) / np.max(np.abs(ls)) < 1e-8


def test_lm_step_large_damping_limit(rng):
    J = rng.normal(size=(20, 5))
    r = rng.normal(size=20)
    lam = 1e9
    step = lm_step(J, r, lam)
    limit = (J.T @ r) / (lam * np.diag(J.T @ J))
    assert np.max(np.abs(step / limit - 1)) < 1e-6


def test_lm_step_errors():
    with pytest.raises(BadConfig):
        lm_step(np.eye(2), np.ones(2), -1.0)
    with pytest.raises(SingularSystem):
        lm_step(np.zeros((3, 2)), np.ones(3), 0.0)


def test_lm_options_validation():
    with pytest.raises(BadConfig):
        LMOptions(damping_up=0.5)
    with pytest.raises(BadConfig):
        LMOptions(initial_damping=0)


@pytest.fixture(scope="module")
def clean2d(body):
    return synth_dataset(body, DataConfig(task="body2d", counts=(0, 0, 8), seed=21, noise_px=0))


def test_lm_fit_from_ground_truth(tasks, clean2d):
    tr = lm_fit(tasks["body2d"], clean2d.theta[:1], clean2d.obs.take([0]), DATA_ONLY)
    assert len(tr.thetas) == 1 and tr.energies[-1] < 1e-12


def test_lm_fit_from_perturbation(tasks, clean2d, rng):
    task = tasks["body2d"]
    for b in range(4):
        th0 = clean2d.theta[b:b + 1] + 0.01 * rng.normal(size=(1, task.n_params))
        obs = clean2d.obs.take([b])
        tr = lm_fit(task, th0, obs, DATA_ONLY, LMOptions(max_iters=100))
        assert len(tr.thetas) <= 101
        rms = np.sqrt(task.data_term(tr.final, obs)[0] / task.n_residuals)
        assert rms < 1e-6
        assert np.all(np.diff(tr.energies) <= 0)


def test_lm_fit_rejections_raise_damping(tasks, clean2d):
    task = tasks["body2d"]
    th0 = task.layout.default(1)
    th0[0, task.layout.slice("scale")] = clean2d.theta[0, task.layout.slice("scale")]
    opts = LMOptions(initial_damping=1e-12, max_iters=30, relative_floor=0.0, min_diag=1e-12)
    tr = lm_fit(task, th0, clean2d.obs.take([0]), DATA_ONLY, opts)
    rejected = [row for row in tr.rows if not row.accepted]
    assert rejected
    for row in rejected:
        prev = [x for x in tr.rows if x.iter < row.iter or (x.iter == row.iter and x is not row)]
        assert row.damping > 0
    assert np.all(np.diff(tr.energies) <= 0)


def test_lm_fit_accepted_non_increasing_random(tasks, hmd_data, rng):
    task = tasks["hmd"]
    gmm, _ = fit_gmm_em(hmd_data.theta[:, prior_joints(task)], 2)
    pri = Priors(gmm)
    for b in range(3):
        th0 = hmd_data.theta[b:b + 1] + 0.2 * rng.normal(size=(1, task.n_params))
        tr = lm_fit(task, th0, hmd_data.obs.take([b]), pri, LMOptions(max_iters=15))
        assert np.all(np.diff(tr.energies) <= 0)


def test_baseline_energy_data_only(tasks, hmd_data, rng):
    task = tasks["hmd"]
    th = hmd_data.theta[:1] + 0.1 * rng.normal(size=(1, task.n_params))
    obs = hmd_data.obs.take([0])
    val, grad = baseline_energy(task, th, obs, DATA_ONLY)
    pkt = task.evaluate(th, obs)
    assert abs(val - pkt.data_term[0]) < 1e-12
    assert np.max(np.abs(grad - pkt.g)) < 1e-9


def test_baseline_energy_face_zero(tasks, face_data):
    task = tasks["face"]
    obs = face_data.obs.take([0])
    th = np.zeros((1, task.n_params))
    th[0, task.layout.slice("rot")] = task.layout.default(1)[0, task.layout.slice("rot")]
    th[0, task.layout.slice("transl")] = face_data.theta[0, task.layout.slice("transl")]
    val, _ = baseline_energy(task, th, obs, Priors())
    assert abs(val - task.data_term(th, obs)[0]) < 1e-9


def test_baseline_energy_term_sum_oracle(tasks, hmd_data, rng):
    task = tasks["hmd"]
    cols = prior_joints(task)
    gmm, _ = fit_gmm_em(hmd_data.theta[:, cols], 3)
    w = BaselineWeights(gravity=0.7, gmm=0.2, temporal=1.5)
    th = hmd_data.theta[:3] + 0.1 * rng.normal(size=(3, task.n_params))
    obs = hmd_data.obs.take([0, 1, 2])
    obs.shape = np.repeat(obs.shape[:1], 3, axis=0)
    val, grad = baseline_energy(task, th, obs, Priors(gmm, w))
    data = task.evaluate(th, obs)
    gv, gg = gravity_loss(th, task.layout)
    tv, tg = temporal_loss(task, th, obs)
    pv = [gmm_prior(t[cols], gmm) for t in th]
    oracle = data.data_term.sum() + w.gravity * gv.sum() + w.gmm * sum(p[0] for p in pv) + w.temporal * tv
    assert abs(val - oracle) < 1e-8 * abs(oracle)
    g_or = data.g + w.gravity * gg + w.temporal * tg
    for t in range(3):
        g_or[t, cols] += w.gmm * pv[t][1]
    assert np.max(np.abs(grad - g_or)) < 1e-8 * np.max(np.abs(g_or))


class _LineTask:
    """r = b - a theta in one dimension."""

    def __init__(self, a, b):
        self.a, self.b = a, b

    def evaluate(self, th, obs):
        from neuralfit.residuals import ResidualPacket
        r = self.b - self.a * th
        return ResidualPacket(r, np.ones_like(r), g=-2 * self.a * r)


def test_gd_quadratic_convergence():
    a, b, step = 2.0, 3.0, 0.05          # curvature 2 a^2 = 8 > 0, step < 1/8
    tr = gd_fit(_LineTask(a, b), np.array([[0.0]]), None, step, 100)
    err = np.array([abs(t[0, 0] - b / a) for t in tr.thetas])
    assert np.allclose(err[1:31] / err[:30], 1 - 2 * a * a * step, atol=1e-9)
    assert err[-1] < 1e-9


def test_gd_step_zero_and_loop_oracle(tasks, hmd_data, rng):
    task = tasks["hmd"]
    obs = hmd_data.obs.take([0, 1])
    th0 = hmd_data.theta[:2] + 0.1 * rng.normal(size=(2, task.n_params))
    tr = gd_fit(task, th0, obs, 0.0, 5)
    assert all(np.array_equal(t, th0) for t in tr.thetas)
    tr = gd_fit(task, th0, obs, 1e-3, 5)
    th = th0.copy()
    for k in range(5):
        th = th - 1e-3 * task.evaluate(th, obs).g
        assert np.array_equal(th, tr.thetas[k + 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(0.0, 1e3), st.integers(0, 2**31 - 1))
def test_lm_step_solves_normal_system_property(n, lam, seed):
    r = np.random.default_rng(seed)
    J = r.normal(size=(n + 3, n))
    res = r.normal(size=n + 3)
    d = lm_step(J, res, lam)
    A = J.T @ J
    lhs = (A + lam * np.diag(np.maximum(np.diag(A), 1e-8))) @ d
    assert np.max(np.abs(lhs - J.T @ res)) < 1e-8 * max(1, np.max(np.abs(J.T @ res)))


def test_trajectory_csv(tmp_path, tasks, clean2d, rng):
    task = tasks["body2d"]
    tr = lm_fit(task, clean2d.theta[:1] + 0.01, clean2d.obs.take([0]), DATA_ONLY, LMOptions(max_iters=3))
    path = tmp_path / "t.csv"
    tr.write_csv(path)
    head = path.read_text().splitlines()[0].split(",")
    assert head[:3] == ["iter", "energy", "data_term"] and "damping" in head
