"""Pipeline pieces shared by the command line and the acceptance suite:
build model and data from a config, train, fit with any solver, evaluate, ablate."""

from __future__ import annotations

import csv
import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import container
from .classic import LMOptions, Priors, gd_fit, lm_fit, prior_joints
from .config import RunConfig, set_value
from .datagen import DataConfig, Dataset, synth_dataset
from .errors import BadConfig, FormatError
from .fitter import FitterNetworks, TrainResult, fit_normalizers, run_fitter, train
from .metrics import EvalReport, evaluate_trajectory
from .model import body_config, face_config, model_digest, synth_model
from .residuals import GMM, Task, fit_gmm_em, make_task


def build_model(cfg: RunConfig):
    m = cfg.model
    if cfg.run.task == "face":
        sc = face_config(m.n_verts, m.n_shape, m.n_expr, m.n_landmarks)
    else:
        sc = body_config(m.n_verts, m.n_shape)
    return synth_model(sc, m.seed)


def data_config(cfg: RunConfig) -> DataConfig:
    d = cfg.data
    return DataConfig(task=cfg.run.task, counts=tuple(d.counts), seed=cfg.run.seed, visibility=cfg.run.visibility,
                      noise_px=d.noise_px, noise_pos=d.noise_pos, noise_rot=d.noise_rot,
                      keypoint_dropout=d.keypoint_dropout, split_ratio=d.split_ratio or None)


def build_dataset(model, cfg: RunConfig) -> Dataset:
    ds = synth_dataset(model, data_config(cfg))
    ds.meta["config_hash"] = cfg.hash
    return ds


def make_fitter(task: Task, cfg: RunConfig, train_set: Dataset, seed: int | None = None) -> FitterNetworks:
    nets = FitterNetworks(task, replace(cfg.fitter), cfg.run.seed if seed is None else seed)
    fit_normalizers(nets, train_set.theta, train_set.obs)
    return nets


def train_fitter(task: Task, ds: Dataset, cfg: RunConfig, seed: int | None = None,
                 log=None) -> tuple[FitterNetworks, TrainResult]:
    seed = cfg.run.seed if seed is None else seed
    tr, va = ds.subset("train"), ds.subset("val")
    if len(tr) == 0:
        raise BadConfig("dataset has no training records")
    nets = make_fitter(task, cfg, tr, seed)
    val = (va.theta, va.obs) if len(va) else None
    result = train(nets, (tr.theta, tr.obs), val, replace(cfg.train), seed, cfg.loss, log)
    return nets, result


# --------------------------------------------------------------------------
# Fitting


@dataclass
class FitOutput:
    solver: str
    thetas: np.ndarray        # (K, B, P) iterates, shorter runs padded with their last iterate
    data_terms: np.ndarray    # (K, B)
    record_ids: np.ndarray
    meta: dict

    def arrays(self) -> dict:
        meta = {"type": "fit", "solver": self.solver, **self.meta}
        return {"meta": container.pack_meta(meta), "thetas": self.thetas, "data_terms": self.data_terms,
                "record_ids": self.record_ids}

    def write(self, path) -> None:
        container.write(path, self.arrays())

    @classmethod
    def read(cls, path) -> "FitOutput":
        arr = container.read(path)
        try:
            meta = container.unpack_meta(arr["meta"])
            if meta.pop("type") != "fit":
                raise FormatError("container does not hold fit results")
            return cls(meta.pop("solver"), arr["thetas"], arr["data_terms"], arr["record_ids"], meta)
        except KeyError as exc:
            raise FormatError(f"fit container missing {exc}") from None


def baseline_priors(task: Task, train_set: Dataset, cfg: RunConfig, n_components: int = 8) -> Priors:
    gmm = None
    if task.name in ("body2d", "hmd") and cfg.prior.gmm > 0 and len(train_set):
        cols = prior_joints(task)
        gmm, _ = fit_gmm_em(train_set.theta[:, cols], n_components, seed=cfg.run.seed)
    return Priors(gmm, replace(cfg.prior))


def _pad(rows, K):
    return [rows[min(k, len(rows) - 1)] for k in range(K)]


def _chunks(n, size):
    return [np.arange(a, min(n, a + size)) for a in range(0, n, size)]


def fit_dataset(task: Task, ds: Dataset, solver: str, cfg: RunConfig, nets: FitterNetworks | None = None,
                init=None, priors: Priors | None = None, workers: int = 1) -> FitOutput:
    """Fit every record of ``ds``.  ``init`` seeds the classic solvers: (P,) shared or (n, P) per record."""
    n = len(ds)
    if solver == "learned":
        if nets is None:
            raise BadConfig("learned solver needs a checkpoint")
        chunks = _chunks(n, 256)

        def one(idx):
            tr = run_fitter(nets, ds.obs.take(idx))
            return np.stack(tr.thetas), np.stack(tr.data_terms)

        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(one, chunks))
        thetas = np.concatenate([p[0] for p in parts], axis=1)
        dts = np.concatenate([p[1] for p in parts], axis=1)
        return FitOutput(solver, thetas, dts, ds.record_ids.copy(), {})
    if solver not in ("lm", "gd"):
        raise BadConfig(f"unknown solver {solver!r}")
    if init is None:
        init = task.layout.default(1)[0]
    init = np.asarray(init, dtype=np.float64)
    opts = replace(cfg.lm)

    def one_record(i):
        obs = ds.obs.take([i])
        th0 = init[i:i + 1] if init.ndim == 2 else init[None]
        if solver == "lm":
            tr = lm_fit(task, th0, obs, priors, opts)
            th = [t[0] for t in tr.thetas]
            dt = [float(task.data_term(t[None], obs)[0]) for t in th]
        else:
            tr = gd_fit(task, th0, obs, cfg.gd.step, cfg.gd.iters)
            th = [t[0] for t in tr.thetas]
            dt = list(tr.energies)
        return th, dt

    with ThreadPoolExecutor(max_workers=workers) as ex:
        runs = list(ex.map(one_record, range(n)))
    K = max(len(r[0]) for r in runs) if runs else 1
    thetas = np.stack([np.stack(_pad(r[0], K)) for r in runs], axis=1) if runs else np.zeros((1, 0, task.n_params))
    dts = np.stack([np.array(_pad(r[1], K)) for r in runs], axis=1) if runs else np.zeros((1, 0))
    return FitOutput(solver, thetas, dts, ds.record_ids.copy(), {})


def evaluate_fit(task: Task, ds: Dataset, fit: FitOutput, include_pa: bool = True) -> EvalReport:
    order = {int(r): i for i, r in enumerate(ds.record_ids)}
    try:
        rows = np.array([order[int(r)] for r in fit.record_ids], dtype=np.int64)
    except KeyError:
        raise BadConfig("fit results reference records missing from the dataset") from None
    sub = ds.subset(rows)
    return evaluate_trajectory(task, list(fit.thetas), sub.theta, sub.obs, list(fit.data_terms),
                               fit.record_ids, include_pa, {"solver": fit.solver})


# --------------------------------------------------------------------------
# Ablations


def parse_axes(spec: str) -> dict:
    """``"fitter.update_rule=lm-like,network-only;fitter.lg_mode=vector,scalar"`` -> dict."""
    axes = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise BadConfig(f"axis {part!r} must look like section.key=v1,v2")
        key, values = part.split("=", 1)
        key = key.strip()
        if "." not in key:
            key = f"fitter.{key}"
        axes[key] = [v.strip() for v in values.split(",") if v.strip()]
    if not axes:
        raise BadConfig("no ablation axes given")
    return axes


def ablate(cfg: RunConfig, model, ds: Dataset, axes: dict, out_dir, seeds=(0,), log=None) -> list:
    """Train and evaluate every cell of the cross-product of ``axes``; one report per cell and seed."""
    os.makedirs(out_dir, exist_ok=True)
    keys = list(axes)
    summary = []
    test = ds.subset("test")
    for values in itertools.product(*(axes[k] for k in keys)):
        cell = replace_config(cfg, dict(zip(keys, values)))
        task = make_task(cell.run.task, model)
        name = "__".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, values))
        per_seed = []
        for seed in seeds:
            nets, _ = train_fitter(task, ds, cell, seed)
            fit = fit_dataset(task, test, "learned", cell, nets)
            rep = evaluate_fit(task, test, fit)
            rep.meta.update({"config_hash": cell.hash, "seed": seed})
            path = os.path.join(out_dir, f"{name}__seed{seed}.csv")
            rep.write_csv(path)
            _stamp(path, cell.hash)
            per_seed.append(rep.means)
            if log:
                log(name, seed, rep.means)
        row = {"cell": name, **dict(zip(keys, values))}
        for k in per_seed[0]:
            row[k] = float(np.mean([m[k] for m in per_seed]))
        summary.append(row)
    cols = list(summary[0])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=cols)
        out.writeheader()
        for row in summary:
            out.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return summary


def _stamp(path, cfg_hash: str) -> None:
    with open(path) as fh:
        body = fh.read()
    with open(path, "w") as fh:
        fh.write(f"# config_hash: {cfg_hash}\n{body}")


def replace_config(cfg: RunConfig, overrides: dict) -> RunConfig:
    from .config import parse_config, render
    new = parse_config(render(cfg))
    for k, v in overrides.items():
        set_value(new, k, str(v))
    return new.validate()


def model_fingerprint(model) -> str:
    return model_digest(model)[:16]


__all__ = ["build_model", "build_dataset", "train_fitter", "fit_dataset", "evaluate_fit", "ablate",
           "FitOutput", "baseline_priors", "parse_axes", "replace_config", "GMM", "LMOptions"]
