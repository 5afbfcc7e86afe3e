import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralfit.errors import ShapeMismatch
from neuralfit.geometry import axis_angle_to_matrix
from neuralfit.metrics import (EvalReport, curve_aggregate, evaluate_trajectory, ground_penetration,
                               instance_metrics, mean_distance, mpjpe, mplpe, pa, read_curve_csv, v2v,
                               write_curve_csv)


def loop_mean_distance(X, Y):
    return 1000 * sum(np.sqrt(sum((a - b) ** 2 for a, b in zip(x, y))) for x, y in zip(X, Y)) / len(X)


def similarity(rng, X):
    return rng.uniform(0.5, 2) * X @ axis_angle_to_matrix(rng.normal(size=3)).T + rng.normal(size=3)


def test_v2v_examples(rng):
    M = rng.normal(size=(30, 3))
    assert v2v(M, M) == 0
    assert abs(v2v(M + [0.003, 0, 0], M) - 3.0) < 1e-9
    Mh = M + 0.01 * rng.normal(size=M.shape)
    assert abs(v2v(Mh, M) - loop_mean_distance(Mh, M)) < 1e-9
    sub = np.array([1, 5, 7])
    assert abs(v2v(Mh, M, sub) - loop_mean_distance(Mh[sub], M[sub])) < 1e-9
    with pytest.raises(ShapeMismatch):
        v2v(M[:3], M)


def test_mpjpe_mplpe_examples(rng):
    J = rng.normal(size=(10, 3))
    assert mpjpe(J, J) == 0
    K = J.copy()
    K[4, 2] += 0.005
    assert abs(mpjpe(K, J) - 0.5) < 1e-9
    off = np.array([0.003, 0.004, 0.0])
    assert abs(mplpe(J + off, J) - 5.0) < 1e-9
    Jh = J + 0.02 * rng.normal(size=J.shape)
    assert abs(mpjpe(Jh, J) - loop_mean_distance(Jh, J)) < 1e-9
    assert abs(mplpe(Jh, J) - loop_mean_distance(Jh, J)) < 1e-9


def test_pa_examples(rng):
    X = rng.normal(size=(20, 3))
    assert pa(mean_distance, similarity(rng, X), X) < 1e-9
    for _ in range(50):
        Xh = X + 0.1 * rng.normal(size=X.shape)
        raw, aligned = mean_distance(Xh, X), pa(mean_distance, Xh, X)
        assert aligned <= raw + 1e-9
        assert abs(pa(mean_distance, similarity(rng, Xh), X) - aligned) < 1e-9


def test_pa_batched(rng):
    X = rng.normal(size=(4, 20, 3))
    Xh = X + 0.1 * rng.normal(size=X.shape)
    got = pa(mean_distance, Xh, X)
    assert got.shape == (4,)
    for b in range(4):
        assert abs(got[b] - pa(mean_distance, Xh[b], X[b])) < 1e-12


def test_ground_penetration(rng):
    M = rng.uniform(0, 1, size=(50, 3))
    assert ground_penetration(M) == 0
    M[7, 1] = -0.005
    assert abs(ground_penetration(M) - 5.0) < 1e-9
    R = rng.normal(size=(200, 3))
    below = R[:, 1] < 0
    assert abs(ground_penetration(R) - 1000 * np.mean(-R[below, 1])) < 1e-9
    extra = np.concatenate([R, rng.uniform(0.1, 1, size=(30, 3))])
    assert abs(ground_penetration(extra) - ground_penetration(R)) < 1e-12


def test_curve_aggregate(tmp_path):
    one = curve_aggregate([{"m": np.array([1.0])}, {"m": np.array([2.0])}])
    assert np.array_equal(one["m"], [1.0, 2.0])
    two = curve_aggregate([{"m": np.array([1.0, 3.0])}, {"m": np.array([2.0, 6.0])}])
    assert np.array_equal(two["m"], [2.0, 4.0])
    rng = np.random.default_rng(0)
    per = [{"m": rng.normal(size=100)} for _ in range(4)]
    agg = curve_aggregate(per)
    for n, it in enumerate(per):
        running = 0.0
        for k, v in enumerate(it["m"]):
            running += (v - running) / (k + 1)
        assert abs(agg["m"][n] - running) < 1e-12
    path = tmp_path / "c.csv"
    write_curve_csv(path, agg)
    text = path.read_text()
    path.write_text("# config_hash: abc\n" + text)
    back = read_curve_csv(path)
    assert np.allclose(back["m"], agg["m"], rtol=1e-8)


def test_instance_metrics_and_report(tasks, hmd_data, face_data, tmp_path, rng):
    task = tasks["hmd"]
    gt, obs = hmd_data.theta[:4], hmd_data.obs.take(np.arange(4))
    est = gt + 0.05 * rng.normal(size=gt.shape)
    m = instance_metrics(task, est, gt, obs)
    assert {"v2v", "pa_v2v", "mpjpe", "pa_mpjpe", "ground", "v2v_head", "v2v_left_hand",
            "v2v_right_hand"} <= set(m)
    assert np.all(m["pa_v2v"] <= m["v2v"] + 1e-9) and np.all(m["pa_mpjpe"] <= m["mpjpe"] + 1e-9)
    z = instance_metrics(task, gt, gt, obs)
    assert all(np.all(v == 0) or k == "ground" for k, v in z.items() if not k.startswith("pa_"))
    rep = evaluate_trajectory(task, [gt + 0.1, est, gt], gt, obs, data_terms=[np.ones(4), np.ones(4), np.zeros(4)])
    assert rep.curves["v2v"][-1] == 0 and rep.curves["data_term"][0] == 1
    rep.write_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("record,") and rows[-1].startswith("mean,") and len(rows) == 6
    fm = instance_metrics(tasks["face"], face_data.theta[:2], face_data.theta[:2], face_data.obs.take([0, 1]))
    assert set(fm) == {"v2v", "pa_v2v", "mplpe", "pa_mplpe"}


def test_part_subsets_disjoint(body):
    parts = [set(v.tolist()) for v in body.parts.values()]
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            assert not parts[i] & parts[j]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 30))
def test_metric_permutation_and_pa_property(seed, n):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 3))
    Xh = X + 0.2 * r.normal(size=X.shape)
    perm = r.permutation(n)
    assert abs(mean_distance(Xh[perm], X[perm]) - mean_distance(Xh, X)) < 1e-9
    assert abs(ground_penetration(X[perm]) - ground_penetration(X)) < 1e-9
    assert pa(mean_distance, Xh, X) <= mean_distance(Xh, X) + 1e-9
