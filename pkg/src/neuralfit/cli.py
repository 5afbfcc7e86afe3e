"""Command line entry point: ``neuralfit <command> [options]``.

Exit codes: 1 configuration or input errors, 2 I/O or file-format errors,
3 non-finite numerical state.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .config import RunConfig, default_config_text, load_config, set_value
from .datagen import read_dataset, write_dataset
from .errors import BadConfig, FitError, IoError
from .classic import perturb_rotations
from .experiments import (FitOutput, ablate, baseline_priors, build_dataset, build_model, evaluate_fit,
                          fit_dataset, parse_axes, train_fitter)
from .fitter import FitterNetworks
from .metrics import read_curve_csv
from .model import (body_config, chain_config, describe, face_config, load_model, model_digest, save_model,
                    synth_model)
from .nn import load_checkpoint, save_checkpoint
from .residuals import describe_layout, make_task


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def stamp_csv(path, cfg_hash: str) -> None:
    """Prefix a CSV file with a ``# config_hash`` comment line."""
    with open(path) as fh:
        body = fh.read()
    with open(path, "w") as fh:
        fh.write(f"# config_hash: {cfg_hash}\n{body}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise BadConfig(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value.strip())
    for flag, key in (("task", "run.task"), ("seed", "run.seed"), ("visibility", "run.visibility"),
                      ("workers", "run.workers"), ("solver", "run.solver")):
        value = getattr(args, flag, None)
        if value is not None:
            set_value(cfg, key, str(value))
    return cfg.validate()


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# Commands


def cmd_default_config(args) -> None:
    if not args.out:
        sys.stdout.write(default_config_text())
        return
    with open(args.out, "w") as fh:
        fh.write(default_config_text())


def cmd_synth_model(args) -> None:
    cfg = _config(args)
    if args.kind == "face":
        m = cfg.model
        sc = face_config(m.n_verts, m.n_shape, m.n_expr, m.n_landmarks)
    elif args.kind == "chain":
        sc = chain_config(args.joints, cfg.model.n_verts, cfg.model.n_shape)
    else:
        sc = body_config(cfg.model.n_verts, cfg.model.n_shape)
    model = synth_model(sc, cfg.model.seed if args.seed is None else args.seed)
    model.info["config_hash"] = cfg.hash
    save_model(model, args.out)
    print(describe(model))


def cmd_synth_data(args) -> None:
    cfg = _config(args)
    if args.count is not None:
        counts = [int(c) for c in args.count.split(",")]
        if len(counts) == 1:
            n = counts[0]
            counts = [n - 2 * (n // 10), n // 10, n // 10]
        set_value(cfg, "data.counts", ",".join(map(str, counts)))
    if args.noise is not None:
        for key in ("data.noise_px", "data.noise_pos", "data.noise_rot"):
            set_value(cfg, key, str(args.noise))
    cfg.validate()
    model = load_model(args.model)
    ds = build_dataset(model, cfg)
    ds.meta["model_digest"] = model_digest(model)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} {cfg.run.task} records to {args.out} (config {cfg.hash})")


def cmd_train(args) -> None:
    cfg = _config(args)
    model = load_model(args.model)
    ds = read_dataset(args.data)
    if ds.task != cfg.run.task:
        raise BadConfig(f"dataset task {ds.task!r} does not match config task {cfg.run.task!r}")
    task = make_task(ds.task, model)
    nets, result = train_fitter(task, ds, cfg, log=lambda r: _log(
        f"epoch {r.epoch}: train {r.train_loss:.6g} val {r.val_loss:.6g} lr {r.lr:g}"))
    ck = nets.checkpoint(result.adam, {"config_hash": cfg.hash, "model_digest": model_digest(model),
                                       "step": result.adam.step, "best_epoch": result.best_epoch})
    save_checkpoint(args.out, ck)
    if args.history:
        result.write_history(args.history)
        stamp_csv(args.history, cfg.hash)
    print(f"saved checkpoint {args.out} (best epoch {result.best_epoch}, val {result.best_val:.6g})")


def _nets(task, path, cfg_hash=None, force=False, model=None):
    ck = load_checkpoint(path, cfg_hash)
    if model is not None and ck.meta.get("model_digest") not in (None, model_digest(model)) and not force:
        raise BadConfig("checkpoint was trained on a different model (use --force to override)")
    return FitterNetworks.from_checkpoint(task, ck), ck


def cmd_fit(args) -> None:
    cfg = _config(args)
    model = load_model(args.model)
    ds = read_dataset(args.data)
    task = make_task(ds.task, model)
    sub = ds.subset(args.split) if args.split != "all" else ds
    if args.limit:
        sub = sub.subset(np.arange(min(args.limit, len(sub))))
    solver = cfg.run.solver
    nets, ck_hash = None, None
    if solver == "learned":
        if not args.checkpoint:
            raise BadConfig("--checkpoint is required for the learned solver")
        nets, ck = _nets(task, args.checkpoint, None, args.force, model)
        ck_hash = ck.meta.get("config_hash")
        if args.iters is not None:
            nets.cfg.n_iters = args.iters
    train = ds.subset("train")
    priors = init = None
    if solver in ("lm", "gd"):
        if args.init == "perturbed":
            init = perturb_rotations(task, sub.theta, args.init_noise, np.random.default_rng(cfg.run.seed))
        else:
            init = train.theta.mean(axis=0) if len(train) else None
        if solver == "lm" and args.no_prior:
            cfg.prior.gravity = cfg.prior.gmm = cfg.prior.temporal = 0.0
        priors = baseline_priors(task, train, cfg) if solver == "lm" else None
    fit = fit_dataset(task, sub, solver, cfg, nets, init, priors, cfg.run.workers)
    fit.meta.update({"config_hash": cfg.hash, "model_digest": model_digest(model),
                     "checkpoint_config_hash": ck_hash or ""})
    fit.write(args.out)
    final = fit.data_terms[-1]
    rms = float(np.sqrt(np.mean(final / task.n_residuals)))
    print(f"{solver}: {len(sub)} records, mean final data term {np.mean(final):.6g}, rms residual {rms:.6g}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    model = load_model(args.model)
    ds = read_dataset(args.data)
    fit = FitOutput.read(args.fit)
    if fit.meta.get("model_digest") not in (None, model_digest(model)) and not args.force:
        raise BadConfig("fit results were produced with a different model (use --force to override)")
    task = make_task(ds.task, model)
    rep = evaluate_fit(task, ds, fit)
    stamp = fit.meta.get("config_hash", cfg.hash)
    rep.write_csv(args.out)
    stamp_csv(args.out, stamp)
    if args.curves:
        rep.write_curves(args.curves)
        stamp_csv(args.curves, stamp)
    for k, v in rep.means.items():
        print(f"{k}: {v:.4f}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    model = load_model(args.model)
    ds = read_dataset(args.data)
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = ablate(cfg, model, ds, parse_axes(args.axes), args.out, seeds,
                     log=lambda name, seed, m: _log(f"{name} seed {seed}: " +
                                                    ", ".join(f"{k}={v:.3f}" for k, v in m.items())))
    stamp_csv(os.path.join(args.out, "summary.csv"), cfg.hash)
    for row in summary:
        print(row["cell"], " ".join(f"{k}={v:.3f}" for k, v in row.items() if isinstance(v, float)))


def _csv_hash(path) -> str | None:
    with open(path) as fh:
        first = fh.readline()
    return first.split(":", 1)[1].strip() if first.startswith("# config_hash:") else None


def cmd_plot_curves(args) -> None:
    rows, hashes = [], []
    for path in args.inputs:
        if not os.path.exists(path):
            raise IoError(f"no such file: {path}")
        h = _csv_hash(path)
        if h and h not in hashes:
            hashes.append(h)
        label = os.path.splitext(os.path.basename(path))[0]
        for metric, values in read_curve_csv(path).items():
            rows.extend((label, i, metric, v) for i, v in enumerate(values))
    with open(args.out, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["source", "iter", "metric", "value"])
        for label, i, metric, v in rows:
            out.writerow([label, i, metric, f"{v:.9g}"])
    stamp_csv(args.out, ",".join(hashes) or "none")


def cmd_describe_layout(args) -> None:
    cfg = _config(args)
    model = load_model(args.model) if args.model else build_model(cfg)
    task = make_task(cfg.run.task, model)
    for kind, name, a, b in describe_layout(task):
        print(f"{kind:<9s} {name:<24s} {a:5d} {b:5d}")


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuralfit", description="Classic and learned fitting of skinned parametric models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, task=True):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--deterministic", action="store_true", help="single-worker reproducible mode")
        if task:
            sp.add_argument("--task", choices=("body2d", "hmd", "face"))

    sp = sub.add_parser("default-config", help="print the default configuration")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_default_config)

    sp = sub.add_parser("synth-model", help="generate a synthetic skinned model")
    common(sp, task=False)
    sp.add_argument("--kind", choices=("body", "face", "chain"), default="body")
    sp.add_argument("--joints", type=int, default=2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_model)

    sp = sub.add_parser("synth-data", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--count", help="N or train,val,test")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--visibility", choices=("full", "half"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="train the learned fitter")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--history")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fit", help="fit a dataset split")
    common(sp)
    sp.add_argument("--solver", choices=("lm", "gd", "learned"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    sp.add_argument("--limit", type=int)
    sp.add_argument("--iters", type=int, help="learned solver iterations (default: trained N)")
    sp.add_argument("--no-prior", action="store_true", help="LM on the data term only")
    sp.add_argument("--init", choices=("mean", "perturbed"), default="mean",
                    help="classic solver start: training-set mean, or generator parameters with rotation noise")
    sp.add_argument("--init-noise", type=float, default=0.1, help="rotation noise (rad) for --init perturbed")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("eval", help="evaluate fit results")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--curves")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate a cross-product of config axes")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--axes", required=True, help='e.g. "update_rule=lm-like,network-only;lg_mode=vector,scalar"')
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot-curves", help="merge per-iteration CSVs into long format")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot_curves)

    sp = sub.add_parser("describe-layout", help="print the parameter layout of a task")
    common(sp)
    sp.add_argument("--model")
    sp.set_defaults(func=cmd_describe_layout)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "deterministic", False):
        args.workers = 1
    try:
        args.func(args)
    except FitError as exc:
        print(f"neuralfit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
