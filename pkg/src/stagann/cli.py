"""Command-line entry point: synth, train, krige, eval, sweep, diagnose, gradcheck.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    CheckpointError, DataError, SplitPlan, SyntheticSpec, batch_windows, generate_synthetic,
    load_checkpoint, load_dataset_dir, make_split, make_windows, read_config, save_checkpoint,
    save_dataset,
)
from .evaluation import (
    confusion_probe, divergence_report, evaluate, missing_rate_sweep, okriging_report, write_rows,
)
from .model import STAGANN, ModelConfig, build_model
from .training import TrainConfig, fit, predict

log = logging.getLogger("stagann")

ABLATIONS = ("S", "S-location", "S-timestamp", "T", "T-phasegraph", "T-decouple", "A", "A10", "A50", "Revin")


class ConfigError(ValueError):
    pass


def apply_ablations(model_cfg: ModelConfig, train_cfg: TrainConfig, names) -> None:
    """Switch off components in place; names follow the ablation notation."""
    for name in names:
        if name == "S":
            model_cfg.use_d3mgm = False
        elif name == "S-location":
            model_cfg.use_location = False
        elif name == "S-timestamp":
            model_cfg.use_timestamp = False
        elif name == "T":
            model_cfg.use_dpm = False
        elif name == "T-phasegraph":
            model_cfg.phase_graph = "predefined"
        elif name == "T-decouple":
            model_cfg.dpm.decouple = False
        elif name == "A":
            train_cfg.adversarial = False
        elif name == "A10":
            train_cfg.adversarial_rounds = 10
        elif name == "A50":
            train_cfg.adversarial_rounds = train_cfg.epochs
        elif name == "Revin":
            model_cfg.use_revin = False
        else:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("STKG_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"STKG_SEED must be an integer, got {env!r}") from None


def _read_config(path, targets) -> None:
    try:
        read_config(path, targets)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if getattr(args, "epochs", None) is not None:
        train_cfg.epochs = args.epochs
        train_cfg.adversarial_rounds = min(train_cfg.adversarial_rounds, args.epochs)
    apply_ablations(model_cfg, train_cfg, getattr(args, "ablate", None) or [])
    if getattr(args, "config", None):
        # the file wins over flags
        _read_config(args.config, {"model": model_cfg, "dpm": model_cfg.dpm, "train": train_cfg})
    train_cfg.seed = args.seed
    return model_cfg, train_cfg


# -- saved runs ----------------------------------------------------------------

def save_run(model: STAGANN, split: SplitPlan, outdir: Path, extra: dict | None = None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, outdir / "model.stkg")
    meta = {"model": model.config.to_dict(), "split": split.to_dict(), **(extra or {})}
    (outdir / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_run(rundir) -> tuple[STAGANN, SplitPlan, dict]:
    rundir = Path(rundir)
    try:
        meta = json.loads((rundir / "model.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{rundir}: no model.json (not a training output directory)") from None
    model = STAGANN(ModelConfig.from_dict(meta["model"]))
    load_checkpoint(rundir / "model.stkg", model)
    return model, SplitPlan.from_dict(meta["split"]), meta


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed)
    for key in ("n", "t", "period", "max_shift", "k_neighbors", "noise_std", "shift_mode"):
        val = getattr(args, key)
        if val is not None:
            setattr(spec, key, val)
    if args.config:
        _read_config(args.config, {"synth": spec})
    ds, shifts = generate_synthetic(spec)
    out = Path(args.out)
    save_dataset(ds, out)
    with open(out / "shifts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "shift"])
        w.writerows(zip(ds.sensor_ids, shifts.tolist()))
    log.info("wrote %d sensors x %d steps to %s", ds.n_sensors, ds.n_steps, out)
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    ds = load_dataset_dir(args.data)
    split = make_split(ds, args.seed)
    model = build_model(model_cfg, args.seed, ds.coords is not None)
    out = Path(args.out)
    result = fit(model, ds, split, train_cfg, keep_checkpoints=args.keep_checkpoints)
    save_run(model, split, out, {"seed": args.seed, "ablations": args.ablate or [],
                                 "best_epoch": result.best_epoch, "train": vars(train_cfg)})
    write_rows(out / "history.csv", result.history)
    if args.keep_checkpoints:
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        for i, state in enumerate(result.checkpoints, start=1):
            save_checkpoint(state, ckdir / f"epoch_{i:03d}.stkg")
    log.info("best epoch %d, validation MAE %.4f", result.best_epoch,
             result.history[result.best_epoch - 1]["val_mae"])
    return 0


def cmd_krige(args) -> int:
    ds = load_dataset_dir(args.data)
    model, split, _ = load_run(args.model)
    L = model.config.length
    mu, sd = model.scaler_mean.data[0], model.scaler_std.data[0]
    windows = make_windows(ds, split, L, L, "eval", (mu, sd))
    pred = predict(model, batch_windows(windows, 64))  # (W, N, L)
    unknown = np.sort(split.unknown())
    series = np.concatenate(list(pred[:, unknown]), axis=-1)  # (U, W*L)
    stamps = ds.timestamps(split.time_boundary + np.arange(series.shape[1]))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [ds.sensor_ids[i] for i in unknown])
        for t, row in zip(stamps, series.T):
            w.writerow([str(t)] + [repr(float(v)) for v in row])
    log.info("kriged %d unknown sensors over %d steps", unknown.size, series.shape[1])
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset_dir(args.data)
    model, split, _ = load_run(args.model)
    rows = []
    for scope in ("validation", "test"):
        rep = evaluate(model, ds, split, scope)
        base = okriging_report(ds, split, model.config.length, scope)
        rows.append({"method": "model", **rep.as_row()})
        rows.append({"method": "okriging", **base.as_row()})
    for r in rows:
        print(f"{r['method']:9s} {r['scope']:10s} MAE {r['mae']:.4f}  RMSE {r['rmse']:.4f}  R2 {r['r2']:.4f}")
    if args.out:
        write_rows(args.out, rows)
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    model_cfg, train_cfg = _configs(args)
    ds = load_dataset_dir(args.data)

    def factory(seed):
        return build_model(ModelConfig.from_dict(model_cfg.to_dict()), seed, ds.coords is not None)

    def train(model, dataset, split, seed):
        cfg = TrainConfig(**{**vars(train_cfg), "seed": seed})
        fit(model, dataset, split, cfg)

    rows = missing_rate_sweep(ds, factory, train, args.known, args.z, args.seeds, args.out)
    for r in rows:
        print(f"{r['x']}K{r['y']}V{r['z']}U seed {r['seed']}: MAE {r['MAE']:.4f} RMSE {r['RMSE']:.4f}")
    return 0


def cmd_diagnose(args) -> int:
    ds = load_dataset_dir(args.data)
    model, split, _ = load_run(args.model)
    L = model.config.length
    mu, sd = model.scaler_mean.data[0], model.scaler_std.data[0]
    batches = batch_windows(make_windows(ds, split, L, L, "eval", (mu, sd)), 64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = divergence_report(model, batches)
    write_rows(out / "divergence.csv", [vars(rep)])
    print(f"d_hat {rep.d_hat:.4f} (bracket {rep.bracket:.4f}, bce {rep.bce:.4f}); {rep.note}")
    ckdir = Path(args.model) / "checkpoints"
    paths = sorted(ckdir.glob("epoch_*.stkg"))
    if not paths:
        raise DataError(f"{ckdir}: no per-epoch checkpoints (train with --keep-checkpoints)")
    states = [load_checkpoint(p) for p in paths]
    frozen = None
    if args.freeze_epoch:
        if not 1 <= args.freeze_epoch <= len(states):
            raise ConfigError(f"freeze epoch {args.freeze_epoch} outside 1..{len(states)}")
        frozen = {k: v for k, v in states[args.freeze_epoch - 1].items() if k.startswith("discriminator.")}
    rows = confusion_probe(model, states, batches, frozen, out / "confusion.csv")
    print(f"confusion probe: {len(rows)} checkpoints, BCE {rows[0]['bce']:.4f} -> {rows[-1]['bce']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import gradient_suite

    results = gradient_suite(range(args.seeds), include_model=not args.skip_model)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    failed = 0
    for name, err in worst.items():
        ok = err < args.tol
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:20s} {err:.3e}")
    print(f"{len(worst) - failed}/{len(worst)} cases below {args.tol:g} over {args.seeds} seeds")
    return 1 if failed else 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: $STKG_SEED or 0)")
    common.add_argument("--config", help="key=value config file; its values override flags")
    common.add_argument("--no-timestamps", action="store_true", help="omit timestamps from log lines")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stagann", description="Spatio-temporal kriging on sensor graphs.")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("-o", "--out", required=True, help="output directory")
    s.add_argument("--n", type=int)
    s.add_argument("--t", type=int)
    s.add_argument("--period", type=int)
    s.add_argument("--max-shift", dest="max_shift", type=int)
    s.add_argument("--k", dest="k_neighbors", type=int)
    s.add_argument("--noise", dest="noise_std", type=float)
    s.add_argument("--shift-mode", dest="shift_mode", choices=("banded", "spatial", "random"))
    s.set_defaults(func=cmd_synth)

    def model_flags(q):
        q.add_argument("--data", required=True, help="dataset directory (series.csv, adjacency.csv[, metadata.csv])")
        q.add_argument("--ablate", action="append", choices=ABLATIONS, help="remove a component (repeatable)")
        q.add_argument("--epochs", type=int)

    t = sub.add_parser("train", parents=[common], help="train a model and save checkpoints")
    model_flags(t)
    t.add_argument("-o", "--out", required=True, help="run directory")
    t.add_argument("--keep-checkpoints", action="store_true", help="also save one checkpoint per epoch")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("krige", parents=[common], help="infer unknown sensors with a trained model")
    k.add_argument("--data", required=True)
    k.add_argument("--model", required=True, help="run directory written by train")
    k.add_argument("-o", "--out", required=True, help="predictions CSV")
    k.set_defaults(func=cmd_krige)

    e = sub.add_parser("eval", parents=[common], help="metrics for a trained model and the OKriging baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("-o", "--out", help="metrics CSV")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", parents=[common], help="missing-rate sweep (xKyVzU)")
    model_flags(w)
    w.add_argument("--known", type=_int_list, default=[7, 4, 2, 1], help="known tenths, e.g. 7,4,2,1")
    w.add_argument("--z", type=int, default=2, help="test tenths")
    w.add_argument("--seeds", type=_int_list, default=[0])
    w.add_argument("-o", "--out", required=True, help="sweep CSV")
    w.set_defaults(func=cmd_sweep)

    d = sub.add_parser("diagnose", parents=[common], help="domain divergence and confusion probe")
    d.add_argument("--data", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--freeze-epoch", type=int, default=0, help="pin the discriminator of this epoch")
    d.add_argument("-o", "--out", required=True, help="output directory")
    d.set_defaults(func=cmd_diagnose)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--skip-model", action="store_true")
    g.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    fmt = "%(levelname)s %(name)s: %(message)s" if args.no_timestamps else "%(asctime)s %(levelname)s %(name)s: %(message)s"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format=fmt, force=True)
    try:
        args.seed = resolve_seed(args.seed)
        return args.func(args)
    except (DataError, CheckpointError) as exc:
        print(f"stagann: data error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"stagann: missing file: {exc.filename or exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"stagann: configuration error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
