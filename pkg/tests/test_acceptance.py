"""Acceptance criteria 1-9.  Each test records one pass/fail line (see conftest).

Criteria 3-5 train the learned fitter on the synthetic HMD task for 3 seeds and
both update rules.  That takes roughly 40 minutes on one CPU core, so results
are cached in ``.acceptance_cache/`` keyed by the run config and a digest of the
package sources; delete the directory to force a fresh run.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import test_fitter
import test_geometry
import test_model
import test_nn
import test_residuals
from neuralfit import container
from neuralfit.classic import BaselineWeights, LMOptions, Priors, lm_fit, lm_step, perturb_rotations
from neuralfit.cli import main as cli_main
from neuralfit.config import RunConfig, set_value
from neuralfit.datagen import DataConfig, synth_dataset
from neuralfit.experiments import build_dataset, build_model, evaluate_fit, fit_dataset, replace_config, train_fitter
from neuralfit.fitter import UPDATE_RULES, FitterConfig, FitterNetworks, fit_normalizers, fitter_step, initialize
from neuralfit.geometry import axis_angle_to_matrix, procrustes_align
from neuralfit.metrics import ground_penetration, mean_distance, pa, write_curve_csv
from neuralfit.model import chain_config, forward, synth_model
from neuralfit.residuals import make_task

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".acceptance_cache"
SEEDS = (0, 1, 2)
RULES = ("lm-like", "network-only")
DATA_ONLY = Priors(None, BaselineWeights(gravity=0, gmm=0, temporal=0, face_reg={}))

# desk-scale training budget shared by every trained cell
BUDGET = {
    "run.task": "hmd", "run.visibility": "half", "run.seed": "0", "data.counts": "20000,2000,2000",
    "fitter.gru_units": "128", "fitter.mlp_units": "128", "fitter.n_iters": "5",
    "train.epochs": "3", "train.anneal_epoch": "2", "train.batch_size": "64", "train.lr": "0.001",
}


# --------------------------------------------------------------------------
# 1. gradients


def test_c1_gradients(body, face, tasks, hmd_data, acceptance):
    t0 = time.perf_counter()
    rng = lambda: np.random.default_rng(1234)  # noqa: E731
    for name in ("hmd", "body2d", "face"):
        test_residuals.test_jacobian_finite_difference_100(name, body, face)
    test_geometry.test_rot6d_vjp_finite_difference(rng())
    test_model.test_pose_vjp_finite_difference(body, rng())
    test_nn.test_linear_and_mlp_gradients(rng())
    test_nn.test_layernorm_gradient(rng())
    test_nn.test_gru_gradients(rng())
    test_nn.test_gru_unroll_gradient(rng())
    for kind in UPDATE_RULES:
        for width in (5, 1):
            test_fitter.test_update_rule_vjp(kind, width, rng())
    for rule in UPDATE_RULES:
        for combo in (("gru", "shared", "vector"), ("resmlp", "per-step", "scalar")):
            test_fitter.test_unrolled_gradient_fd(rule, *combo, tasks, hmd_data)
    dt = time.perf_counter() - t0
    ok = dt < 120
    acceptance(1, ok, f"Jacobians (3 tasks x 100), layers and N=5 unrolled fitter within tolerance in {dt:.0f} s")
    assert ok


# --------------------------------------------------------------------------
# 2. LM exactness


def test_c2_lm_exactness(body, acceptance):
    rng = np.random.default_rng(2)
    A = rng.normal(size=(200, 50))
    b = rng.normal(size=200)
    theta = rng.normal(size=50)
    # r = obs - pred = b - A theta, J = -A
    d = lm_step(-A, b - A @ theta, 0.0)
    oracle = np.linalg.lstsq(A, b, rcond=None)[0]
    lin_err = np.max(np.abs(theta - d - oracle)) / np.max(np.abs(oracle))

    task = make_task("body2d", body)
    ds = synth_dataset(body, DataConfig(task="body2d", counts=(0, 0, 100), seed=31, noise_px=0.0))
    th0 = perturb_rotations(task, ds.theta, 0.1, np.random.default_rng(32))
    hits = 0
    for b_ in range(100):
        obs = ds.obs.take([b_])
        tr = lm_fit(task, th0[b_:b_ + 1], obs, DATA_ONLY, LMOptions(max_iters=100))
        rms = np.sqrt(task.data_term(tr.final, obs)[0] / task.n_residuals)
        hits += bool(rms < 1e-6 and len(tr.thetas) <= 101)
    ok = lin_err < 1e-8 and hits >= 95
    acceptance(2, ok, f"linear solve rel err {lin_err:.1e}; {hits}/100 body-2D fits reach RMS < 1e-6")
    assert ok


# --------------------------------------------------------------------------
# 3-5. trained learned fitter


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "neuralfit").rglob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _base_config() -> RunConfig:
    cfg = RunConfig()
    for k, v in BUDGET.items():
        set_value(cfg, k, v)
    return cfg.validate()


@pytest.fixture(scope="session")
def trained_runs():
    """{(rule, seed): {"mpjpe": [...], "data_term": [...]}} per-iteration test means."""
    CACHE.mkdir(exist_ok=True)
    base = _base_config()
    path = CACHE / f"runs-{base.hash}-{_source_digest()}.json"
    runs = json.loads(path.read_text()) if path.exists() else {}
    model = ds = None
    for rule in RULES:
        cell = replace_config(base, {"fitter.update_rule": rule})
        for seed in SEEDS:
            key = f"{rule}/{seed}"
            if key in runs:
                continue
            if ds is None:
                model = build_model(base)
                ds = build_dataset(model, base)
            task = make_task("hmd", model)
            t0 = time.perf_counter()
            nets, _ = train_fitter(task, ds, cell, seed)
            test = ds.subset("test")
            rep = evaluate_fit(task, test, fit_dataset(task, test, "learned", cell, nets), include_pa=False)
            runs[key] = {"config_hash": cell.hash, "seconds": time.perf_counter() - t0,
                         "mpjpe": rep.curves["mpjpe"].tolist(), "data_term": rep.curves["data_term"].tolist()}
            path.write_text(json.dumps(runs, indent=1))
    out = {}
    for rule in RULES:
        cell = replace_config(base, {"fitter.update_rule": rule})
        curves = {k: np.mean([runs[f"{rule}/{s}"][k] for s in SEEDS], axis=0) for k in ("mpjpe", "data_term")}
        csv_path = CACHE / f"curves-{rule}.csv"
        write_curve_csv(csv_path, curves)
        body = csv_path.read_text()
        csv_path.write_text(f"# config_hash: {cell.hash}\n{body}")
        out[rule] = curves
    return out


def test_c3_learned_fitter_efficacy(trained_runs, acceptance):
    m = trained_runs["lm-like"]["mpjpe"]
    drop = 1.0 - m[5] / m[0]
    ok = drop >= 0.30
    acceptance(3, ok, f"test MPJPE N=0 {m[0]:.2f} mm -> N=5 {m[5]:.2f} mm, reduction {100 * drop:.1f}% "
                      f"(need >= 30%, mean of {len(SEEDS)} seeds)")
    assert ok


def test_c4_update_rule_ablation(trained_runs, acceptance):
    a = trained_runs["lm-like"]["mpjpe"][-1]
    b = trained_runs["network-only"]["mpjpe"][-1]
    ok = a <= 1.02 * b
    flag = "" if ok else "  ORDERING INVERTED"
    (CACHE / "ablation.txt").write_text(f"lm-like {a:.4f} mm\nnetwork-only {b:.4f} mm\n{flag.strip()}\n")
    acceptance(4, ok, f"final MPJPE lm-like {a:.2f} mm vs network-only {b:.2f} mm (need <= x1.02){flag}")
    assert ok


def test_c5_per_iteration_convergence(trained_runs, acceptance):
    d = trained_runs["lm-like"]["data_term"]
    ok = bool(np.all(np.diff(d) < 0))
    acceptance(5, ok, "mean test data term per iteration " + " > ".join(f"{x:.4g}" for x in d)
               + f"  (curves-lm-like.csv)")
    assert ok


# --------------------------------------------------------------------------
# 6. visibility semantics


def test_c6_visibility(body, tasks, acceptance):
    task = tasks["hmd"]
    ds = synth_dataset(body, DataConfig(task="hmd", counts=(0, 0, 20), seed=41, visibility="full"))
    obs = ds.obs.take(np.arange(20))
    obs.visible = obs.visible.copy()
    obs.visible[:, 0] = 0.0
    th = ds.theta + 0.05 * np.random.default_rng(42).normal(size=ds.theta.shape)
    pkt = task.evaluate(th, obs)
    m = body
    left = [j for j, n in enumerate(m.joint_names) if n in ("l_shoulder", "l_elbow", "l_wrist")]
    g_zero = bool(np.all(pkt.g[:, task.layout.joint_columns(left)] == 0))
    moved = obs.take(np.arange(20))
    moved.wrists = moved.wrists.copy()
    moved.fingertips = moved.fingertips.copy()
    moved.wrists[:, 0] += 3.0
    moved.fingertips[:, 0] -= 5.0
    same = bool(np.array_equal(task.data_term(th, obs), task.data_term(th, moved)))
    ok = g_zero and same
    acceptance(6, ok, f"left-hand gradient columns exactly zero: {g_zero}; data term ignores left hand: {same}")
    assert ok


# --------------------------------------------------------------------------
# 7. runtime scaling


def _median_time(f, n=100):
    f()
    ts = []
    for _ in range(n):
        t = time.perf_counter()
        f()
        ts.append(time.perf_counter() - t)
    return float(np.median(ts))


def test_c7_runtime_scaling(acceptance):
    times = {}
    for J, S in ((15, 4), (82, 2)):
        model = synth_model(chain_config(J, 4 * J, S), 0)
        task = make_task("body2d", model)
        ds = synth_dataset(model, DataConfig(task="body2d", counts=(64, 0, 1), seed=3))
        nets = FitterNetworks(task, FitterConfig(), seed=0)
        fit_normalizers(nets, ds.theta, ds.obs)
        obs = ds.obs.take([64])
        th, hs, enc, _ = initialize(nets, obs)

        def lm():
            pkt = task.evaluate(th, obs, jacobian=True)
            lm_step(pkt.J[0], pkt.r[0], 1e-3)

        times[task.n_params] = (_median_time(lambda: fitter_step(nets, 0, th, hs, enc, obs)), _median_time(lm))
    assert sorted(times) == [100, 500]
    learned = times[500][0] / times[100][0]
    classic = times[500][1] / times[100][1]
    ok = learned < classic
    acceptance(7, ok, f"|theta| 100 -> 500 step time ratio: learned {learned:.2f}x "
                      f"({1e3 * times[100][0]:.1f} -> {1e3 * times[500][0]:.1f} ms), "
                      f"LM {classic:.2f}x ({1e3 * times[100][1]:.1f} -> {1e3 * times[500][1]:.1f} ms)")
    assert ok


# --------------------------------------------------------------------------
# 8. determinism and persistence

SMALL = ["--set", "model.n_verts=120", "--set", "fitter.gru_units=8", "--set", "fitter.mlp_units=8",
         "--set", "fitter.n_iters=3", "--set", "train.epochs=1", "--set", "train.batch_size=8", "--seed", "7"]


def _pipeline(d: Path):
    run = lambda *a: cli_main([str(x) for x in a] + SMALL)  # noqa: E731
    assert run("synth-model", "--out", d / "model.mfit") == 0
    assert run("synth-data", "--task", "hmd", "--model", d / "model.mfit", "--count", "32,8,8",
               "--out", d / "data.mfit") == 0
    assert run("train", "--task", "hmd", "--deterministic", "--model", d / "model.mfit", "--data", d / "data.mfit",
               "--out", d / "ckpt.mfit") == 0
    assert run("fit", "--task", "hmd", "--deterministic", "--model", d / "model.mfit", "--data", d / "data.mfit",
               "--checkpoint", d / "ckpt.mfit", "--out", d / "fit.mfit") == 0
    assert run("eval", "--task", "hmd", "--model", d / "model.mfit", "--data", d / "data.mfit",
               "--fit", d / "fit.mfit", "--out", d / "report.csv", "--curves", d / "curves.csv") == 0


def test_c8_determinism(tmp_path, acceptance):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b)
    files = ("model.mfit", "data.mfit", "ckpt.mfit", "fit.mfit", "report.csv", "curves.csv")
    same = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    rt = []
    for f in files:
        if f.endswith(".mfit"):
            container.write(tmp_path / "copy.mfit", container.read(a / f))
            rt.append((tmp_path / "copy.mfit").read_bytes() == (a / f).read_bytes())
    ok = len(same) == len(files) and all(rt)
    acceptance(8, ok, f"{len(same)}/{len(files)} artifacts byte-identical across two runs; "
                      f"{sum(rt)}/{len(rt)} containers round-trip bit-exactly")
    assert ok


# --------------------------------------------------------------------------
# 9. metric oracles


def test_c9_metric_oracles(body, acceptance):
    rng = np.random.default_rng(9)
    ds = synth_dataset(body, DataConfig(task="hmd", counts=(0, 0, 100), seed=91))
    task = make_task("hmd", body)
    gt = forward(body, task.pose(ds.theta, ds.obs)[0]).verts
    est = forward(body, task.pose(ds.theta + 0.1 * rng.normal(size=ds.theta.shape), ds.obs)[0]).verts
    raw, aligned = mean_distance(est, gt), pa(mean_distance, est, gt)
    pa_ok = bool(np.all(aligned <= raw))

    above = gt.copy()
    above[..., 1] += 1.0 - above[..., 1].min()
    ground_ok = bool(np.all(ground_penetration(above) == 0))

    worst = 0.0
    for _ in range(100):
        X = rng.normal(size=(50, 3))
        R = axis_angle_to_matrix(rng.normal(size=3))
        Y = np.exp(rng.normal()) * X @ R.T + rng.normal(size=3)
        worst = max(worst, np.max(np.abs(procrustes_align(X, Y)[3] - Y)))
    ok = pa_ok and ground_ok and worst < 1e-10
    acceptance(9, ok, f"PA <= raw on 100/100 instances: {pa_ok}; above-ground penetration 0: {ground_ok}; "
                      f"Procrustes residual {worst:.1e}")
    assert ok
