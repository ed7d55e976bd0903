"""Command-line front end: gen-data, train, eval, lattice-check, cg-bench.

Failures print one machine-readable line ``error: {json}`` on stderr and
exit nonzero (2 for configuration errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .cg import CGConfig, cg_run
from .config import ConfigError
from .data import DatasetError, estimate_log_priors, load_dataset
from .distrib import WorkerPool
from .lattice import LatticeError, parse_lattices
from .loss import LossConfig
from .model import (DivergenceError, ModelError, load_checkpoint, save_checkpoint,
                    share_counts)
from .optim import (TrainContext, Trainer, UpdateAborted, _curvature_callback,
                    _tokens, accumulate_gradient, evaluate_set)
from .synthetic import generate, write_synthetic

log = logging.getLogger("nghf")

METRIC_COLUMNS = [
    "epoch", "update", "optimizer", "train_loss", "cg_batch_loss", "valid_metric", "cg_iters",
    "chosen_m", "wall_ms_grad", "wall_ms_cg", "wall_ms_eval",
    # extra columns
    "train_loss_after", "baseline_loss", "train_mpe_acc", "stop_reason", "failed", "flags",
    "skipped_utts", "grad_norm", "step_norm", "ng_projection", "wall_ms_rforward",
    "wall_ms_ebp", "wall_ms_stats",
]
TIMING_COLUMNS = {c for c in METRIC_COLUMNS if c.startswith("wall_ms")}
TRACE_COLUMNS = ["epoch", "update", "iteration", "alpha", "beta", "res_norm", "qmodel",
                 "curvature", "eval_loss"]
EVAL_COLUMNS = ["checkpoint", "split", "utterances", "loss", "mpe_acc", "frame_err"]
BENCH_COLUMNS = ["system", "precision", "stabilize", "precondition", "damping", "iteration",
                 "res_norm", "qmodel", "oracle_err", "cos_neg_grad"]


class CLIError(RuntimeError):
    pass


def _fmt(val) -> str:
    if isinstance(val, (bool, np.bool_)):
        return "1" if val else "0"
    if isinstance(val, (float, np.floating)):
        return "" if math.isnan(val) else repr(float(val))
    if isinstance(val, (list, tuple)):
        return "|".join(str(v) for v in val)
    if val is None:
        return ""
    return str(val)


def _write_rows(fh, columns, rows, header=True):
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])


def _write_csv(path: Path, columns, rows, append=False):
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        _write_rows(fh, columns, rows, header=new)


def _out_dir(cfg) -> Path:
    if not cfg["out"]:
        raise ConfigError("no output directory: pass --out or set out in the config")
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from None
    return out


def _dtype(cfg):
    return np.float32 if cfg["precision"] == "f32" else np.float64


def _log_priors(ds, loss_cfg: LossConfig) -> np.ndarray:
    if loss_cfg.prior == "uniform":
        return np.full(ds.num_states, -math.log(ds.num_states))
    return ds.log_priors


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg) -> dict:
    out = _out_dir(cfg)
    scfg = cfgmod.synthetic_config(cfg)
    write_synthetic(scfg, out)
    (out / "config.resolved").write_text(cfgmod.format_config(cfg))
    return {"out": str(out), "num_states": scfg.num_states,
            "utterances": scfg.num_train + scfg.num_valid}


def train_run(cfg: dict) -> dict:
    """Train as configured; writes metrics, CG trace, checkpoints and the resolved config."""
    out = _out_dir(cfg)
    if not cfg["data_dir"]:
        raise ConfigError("data_dir is not set")
    ds = load_dataset(cfg["data_dir"])
    train = ds.split(cfg["train_split"])
    valid = ds.split(cfg["valid_split"])
    loss_cfg = cfgmod.loss_config(cfg)
    opt_cfg = cfgmod.optimizer_config(cfg)
    if cfg["init_checkpoint"]:
        model, params, _ = load_checkpoint(cfg["init_checkpoint"])
        if model.input_dim != ds.input_dim or model.output_dim != ds.num_states:
            raise ConfigError("init_checkpoint does not match the dataset dimensions")
    else:
        model = cfgmod.model_spec(cfg, ds.input_dim, ds.num_states)
        params = model.init_params(np.random.default_rng(cfg["seed"]), cfg["init_scale"])
    params = params.astype(_dtype(cfg))
    (out / "config.resolved").write_text(cfgmod.format_config(cfg))
    metrics_path, trace_path = out / "metrics.csv", out / "cg_trace.csv"
    _write_csv(metrics_path, METRIC_COLUMNS, [])
    _write_csv(trace_path, TRACE_COLUMNS, [])
    extra = {"loss": loss_cfg.kind, "kappa": loss_cfg.kappa, "prior": loss_cfg.prior}
    best = {"epoch": None, "valid_mpe_acc": -math.inf}
    summary = {"out": str(out), "epochs": [], "updates": 0}
    with WorkerPool(cfg["workers"]) as pool:
        ctx = TrainContext(model, loss_cfg, _log_priors(ds, loss_cfg), pool, heldout=valid)
        trainer = Trainer(ctx, params, opt_cfg, seed=cfg["seed"],
                          valid_every=cfg["valid_every"])
        init_eval = evaluate_set(ctx, trainer.params, valid)
        save_checkpoint(out / "epoch000.npz", model, trainer.params,
                        dict(extra, epoch=0, valid=init_eval))
        summary["initial_valid"] = init_eval
        for epoch in range(1, cfg["epochs"] + 1):
            try:
                reports = trainer.run_epoch(train, epoch)
            except (DivergenceError, UpdateAborted, FloatingPointError) as exc:
                raise CLIError(f"training diverged in epoch {epoch}: {exc}; last good "
                               f"checkpoint is epoch{epoch - 1:03d}.npz") from None
            rows, trace_rows = [], []
            for rep in reports:
                row = dict(vars(rep))
                if not cfg["timings"]:
                    for c in TIMING_COLUMNS:
                        row[c] = None
                rows.append(row)
                for rec in rep.trace:
                    trace_rows.append(dict(rec, epoch=rep.epoch, update=rep.update))
            _write_csv(metrics_path, METRIC_COLUMNS, rows, append=True)
            _write_csv(trace_path, TRACE_COLUMNS, trace_rows, append=True)
            ev = evaluate_set(ctx, trainer.params, valid)
            ckpt = out / f"epoch{epoch:03d}.npz"
            save_checkpoint(ckpt, model, trainer.params, dict(extra, epoch=epoch, valid=ev))
            summary["epochs"].append({"epoch": epoch, "valid": ev,
                                      "failed_updates": sum(r.failed for r in reports)})
            summary["updates"] += len(reports)
            if ev["mpe_acc"] > best["valid_mpe_acc"]:
                best = {"epoch": epoch, "valid_mpe_acc": ev["mpe_acc"]}
                shutil.copyfile(ckpt, out / "best.npz")
                (out / "best.json").write_text(json.dumps(best, indent=1) + "\n")
    summary["best"] = best
    return summary


def cmd_eval(args, cfg) -> dict:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CLIError(f"checkpoint {ckpt} does not exist")
    model, params, extra = load_checkpoint(ckpt)
    data_dir = args.data or cfg["data_dir"]
    if not data_dir:
        raise ConfigError("eval needs --data or data_dir")
    ds = load_dataset(data_dir)
    split = args.split or cfg["valid_split"]
    utts = ds.split(split)
    loss_cfg = LossConfig(extra.get("loss", cfg["loss"]), extra.get("kappa", cfg["kappa"]),
                          extra.get("prior", cfg["prior"]))
    with WorkerPool(cfg["workers"]) as pool:
        ctx = TrainContext(model, loss_cfg, _log_priors(ds, loss_cfg), pool)
        record = evaluate_set(ctx, params, utts)
    record = dict(record, checkpoint=str(ckpt), split=split)
    if cfg["out"]:
        _write_csv(_out_dir(cfg) / "eval.csv", EVAL_COLUMNS, [record], append=True)
    return record


def cmd_lattice_check(args) -> dict:
    if not args.files:
        raise ConfigError("lattice-check needs at least one lattice file")
    summary = []
    for name in args.files:
        path = Path(name)
        if not path.exists():
            raise CLIError(f"{path} does not exist")
        try:
            lats = parse_lattices(path.read_text(), args.num_states)
        except LatticeError as exc:
            exc.args = (f"{path}: {exc}",)
            raise
        for lat in lats:
            summary.append({"file": str(path), "utt": lat.utt_id, "nodes": len(lat.nodes),
                            "arcs": len(lat.arcs), "frames": lat.num_frames})
    for rec in summary:
        print(f"{rec['file']}\t{rec['utt']}\tnodes={rec['nodes']}\tarcs={rec['arcs']}"
              f"\tframes={rec['frames']}")
    return {"lattices": len(summary), "status": "ok"}


# --------------------------------------------------------------------------
# cg-bench


def _bench_rows(system, precision, stabilize, precond, damping, result, oracle=None, b=None):
    rows = []
    for cand, rec in zip(result.candidates, result.trace):
        row = {"system": system, "precision": precision, "stabilize": stabilize,
               "precondition": precond, "damping": damping, "iteration": rec["iteration"],
               "res_norm": rec["res_norm"], "qmodel": rec["qmodel"]}
        if oracle is not None:
            ref = oracle[cand.index - 1]
            row["oracle_err"] = float(np.linalg.norm(cand.delta - ref) / np.linalg.norm(ref))
        if b is not None:
            row["cos_neg_grad"] = float(cand.delta @ b / (np.linalg.norm(cand.delta)
                                                          * np.linalg.norm(b)))
        rows.append(row)
    return rows


def spd_with_spectrum(eigs, dim, rng) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    vals = np.resize(np.asarray(eigs, dtype=float), dim)
    return (Q * vals) @ Q.T


def cg_bench(cfg) -> list[dict]:
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    # constructed spectrum: 3 distinct eigenvalues
    A = spd_with_spectrum([1.0, 4.0, 16.0], 32, rng)
    b = rng.normal(size=32)
    res = cg_run(b, lambda v: A @ v, cfg=CGConfig(max_iters=8, stabilize=False,
                                                 precondition=False))
    rows += _bench_rows("spd_3eig", "f64", False, False, 0.0, res, b=b)
    # Tikhonov damping on an ill-conditioned system
    A = spd_with_spectrum(np.logspace(-3, 2, 32), 32, rng)
    b = rng.normal(size=32)
    for eta in (0.0, 1.0, 1e3):
        res = cg_run(b, lambda v: A @ v, cfg=CGConfig(max_iters=8, damping=eta,
                                                     stabilize=False, precondition=False))
        rows += _bench_rows("spd_illcond", "f64", False, False, eta, res, b=b)
    # a real model's GN curvature on a small synthetic batch
    scfg = cfgmod.synthetic_config(dict(cfg, num_train=8, num_valid=0))
    utts, _ = generate(scfg)
    model = cfgmod.model_spec(cfg, scfg.feat_dim, scfg.num_states)
    lp = estimate_log_priors([u.labels for u in utts], scfg.num_states)
    theta64 = model.init_params(np.random.default_rng(cfg["seed"]), cfg["init_scale"])
    counts = share_counts(model)
    with WorkerPool(1) as pool:
        ctx = TrainContext(model, cfgmod.loss_config(cfg), lp, pool)
        grad = accumulate_gradient(ctx, theta64, utts).grad
        # ill-scaled right-hand side: ||theta|| / ||b|| = 1e5
        b = -grad * (np.linalg.norm(theta64) * 1e-5 / np.linalg.norm(grad))
        products = {}
        for prec, dt in (("f64", np.float64), ("f32", np.float32)):
            theta = theta64.astype(dt)
            products[prec] = _curvature_callback(ctx, theta, utts, "gn", next(_tokens), {})
        oracle = [c.delta for c in cg_run(
            b, products["f64"], counts, CGConfig(max_iters=8, stabilize=False), theta64
        ).candidates]
        for prec in ("f64", "f32"):
            for stab in (False, True):
                res = cg_run(b, products[prec], counts, CGConfig(max_iters=8, stabilize=stab),
                             theta64)
                rows += _bench_rows("model_gn", prec, stab, True, 0.0, res,
                                    oracle=oracle[:len(res.candidates)], b=b)
    return rows


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="nghf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (overrides data_dir)")
    p.add_argument("--split")
    p = sub.add_parser("lattice-check", parents=[common], help="parse and validate lattices")
    p.add_argument("files", nargs="+")
    p.add_argument("--num-states", type=int)
    sub.add_parser("cg-bench", parents=[common], help="CG traces on SPD and model systems")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed, "workers": args.workers, "precision": args.precision,
                     "out": args.out}
        if getattr(args, "data", None):
            overrides["data_dir"] = args.data
        cfg = cfgmod.resolve(args.config, overrides)
        if args.command == "gen-data":
            result = cmd_gen_data(cfg)
        elif args.command == "train":
            result = train_run(cfg)
        elif args.command == "eval":
            result = cmd_eval(args, cfg)
        elif args.command == "lattice-check":
            result = cmd_lattice_check(args)
        else:
            rows = cg_bench(cfg)
            if cfg["out"]:
                path = _out_dir(cfg) / "cg_bench.csv"
                _write_csv(path, BENCH_COLUMNS, rows)
                (path.parent / "config.resolved").write_text(cfgmod.format_config(cfg))
            else:
                _write_rows(sys.stdout, BENCH_COLUMNS, rows)
                return 0
            result = {"rows": len(rows)}
    except ConfigError as exc:
        _error(args.command, exc)
        return 2
    except (CLIError, DatasetError, LatticeError, ModelError, OSError, ValueError) as exc:
        _error(args.command, exc)
        return 1
    print(json.dumps({"command": args.command, "status": "ok", "result": result},
                     default=str, sort_keys=True))
    return 0


def _error(command, exc):
    print("error: " + json.dumps({"command": command, "type": type(exc).__name__,
                                  "message": str(exc)}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
