"""Command-line harness.

Subcommands: ``train``, ``design``, ``simulate``, ``eval``, ``gradcheck`` and
``report``. Every run writes ``resolved_config.json`` and ``metrics.csv`` to
its output directory. Exit status is 0 on success, 1 on a usage error and 2
on a runtime or file-format error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from . import accounting, checkpoint, config, data, gradcheck, model, pipeline, report, training
from .errors import ConfigurationError, FormatError, InvalidArgument, NumericalFailure

logger = logging.getLogger("nanoconv")

THREADS_ENV = "NANOCONV_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out-dir", help="output directory (default runs/<command>)")
    common.add_argument("--threads", type=int, help=f"BLAS/FFT thread cap (also {THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    data_args = _Parser(add_help=False)
    data_args.add_argument("--data", help="CIFAR-10 binary batch directory (or set CIFAR10_DIR)")
    data_args.add_argument("--synthetic", action="store_true", help="use synthetic grating images instead")
    data_args.add_argument("--train-limit", type=int)
    data_args.add_argument("--test-limit", type=int)

    p = _Parser(prog="nanoconv", description="Spatially-varying optical convolution network harness.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    t = sub.add_parser("train", parents=[common, data_args], help="train a classifier in silico")
    t.add_argument("--variant", choices=("LKSV", "LKSI", "SKSV", "SKSI"))
    t.add_argument("--preset", help="model preset (cifar10, imagenet64, toy)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--freeze-optical", action="store_true", help="update only the electronic backend")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--features", help="simulated-feature file to train the backend on (with --freeze-optical)")

    d = sub.add_parser("design", parents=[common], help="inverse-design metalenses for a trained stem")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--channels", help="comma-separated stem channels (default all)")
    d.add_argument("--iterations", type=int)
    d.add_argument("--energy-weight", type=float)

    s = sub.add_parser("simulate", parents=[common, data_args], help="render optical features over a dataset")
    s.add_argument("--checkpoint", required=True, help="trained model (for the electronic comparison)")
    s.add_argument("--optics", required=True, help="design output (optics.ckpt)")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--noise-std", type=float)

    e = sub.add_parser("eval", parents=[common, data_args], help="accuracy and confusion matrix")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--features", help="simulated-feature file; bypasses the electronic stem")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    g.add_argument("--suite", action="append", choices=sorted(gradcheck.SUITES))

    r = sub.add_parser("report", parents=[common], help="tables, confusion matrices and galleries")
    r.add_argument("--checkpoint", help="trained model for kernel galleries")
    r.add_argument("--optics", help="design output for PSF galleries")
    r.add_argument("--run-dir", action="append", default=[], help="earlier run directories to collect")
    return p


# --------------------------------------------------------------------------
# Run plumbing
# --------------------------------------------------------------------------


@contextlib.contextmanager
def output_lock(out_dir: str):
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"output directory {out_dir} is in use (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            os.remove(path)


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _resolve(args) -> dict:
    cfg = config.load(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    elif cfg["threads"] is None and os.environ.get(THREADS_ENV):
        cfg["threads"] = int(os.environ[THREADS_ENV])
    if getattr(args, "data", None):
        cfg["data"]["path"] = args.data
    if getattr(args, "synthetic", False):
        cfg["data"]["synthetic"] = True
    for key in ("train_limit", "test_limit"):
        if getattr(args, key, None) is not None:
            cfg["data"][key] = getattr(args, key)
    cmd = args.command
    if cmd == "train":
        if args.variant:
            cfg["model"]["variant"] = args.variant
        if args.preset:
            cfg["model"]["preset"] = args.preset
        if args.epochs:
            cfg["train"]["epochs"] = args.epochs
        if args.freeze_optical:
            cfg["train"]["freeze_optical"] = True
    elif cmd == "design":
        if args.iterations is not None:
            cfg["design"]["iterations"] = args.iterations
        if args.energy_weight is not None:
            cfg["design"]["energy_weight"] = args.energy_weight
        if args.channels:
            cfg["design"]["channels"] = [int(c) for c in args.channels.split(",")]
    elif cmd == "simulate" and args.noise_std is not None:
        cfg["simulate"]["noise_std"] = args.noise_std
    return cfg


def _dataset(cfg: dict, split: str, mcfg: model.ModelConfig) -> data.Dataset:
    d = cfg["data"]
    limit = d["train_limit"] if split == "train" else d["test_limit"]
    if d["synthetic"]:
        seed = cfg["seed"] * 2 + (0 if split == "train" else 1)
        ds = data.synthetic_dataset(limit or 1000, mcfg.classes, mcfg.stem.height, seed=seed, split=split)
    else:
        path = data.find_cifar10(d["path"])
        if path is None:
            raise RuntimeError("no CIFAR-10 data: pass --data DIR, set CIFAR10_DIR, or use --synthetic")
        ds = data.load_cifar10(path, split, d["grayscale"], limit)
    if ds.images.shape[2:] != (mcfg.stem.height, mcfg.stem.width):
        raise InvalidArgument(f"dataset images {ds.images.shape[2:]} do not match the model input")
    return ds


def _load_model(path: str):
    params, meta = checkpoint.load_checkpoint(path, with_meta=True)
    try:
        m = meta["model"]
        mcfg = model.preset(m["preset"], m["variant"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint carries no model description") from exc
    return params, mcfg, meta


def _metrics(out_dir: str, values: dict) -> None:
    report.write_csv(os.path.join(out_dir, "metrics.csv"), [{"metric": k, "value": v} for k, v in values.items()],
                     ["metric", "value"])


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(args, cfg, out):
    mcfg = config.model_config(cfg)
    tcfg = config.train_config(cfg)
    params = None
    if args.init:
        params, init_cfg, _ = _load_model(args.init)
        if init_cfg != mcfg:
            mcfg = init_cfg
            cfg["model"] = checkpoint.load_checkpoint(args.init, with_meta=True)[1]["model"]
    feats = heldout_feats = None
    if args.features:
        if not tcfg.freeze_optical:
            raise InvalidArgument("--features requires --freeze-optical")
        fa = checkpoint.load_checkpoint(args.features)
        feats, labels = fa["features"], fa["labels"]
        images = np.zeros((len(labels), 1, mcfg.stem.height, mcfg.stem.width), np.float32)
        test = None
    else:
        train_ds = _dataset(cfg, "train", mcfg)
        images, labels = train_ds.images, train_ds.labels
        test = _dataset(cfg, "test", mcfg)
    heldout = (test.images, test.labels) if test is not None else None
    params, rep = training.train(mcfg, tcfg, images, labels, heldout=heldout, params=params, features=feats)
    checkpoint.save_checkpoint(params, os.path.join(out, "model.ckpt"), meta={"model": cfg["model"], "config": cfg})
    report.write_csv(os.path.join(out, "train_log.csv"), rep.rows())
    metrics = {"initial_loss": rep.initial_loss, "final_loss": rep.epoch_loss[-1], "final_ce": rep.epoch_ce[-1]}
    if test is not None:
        acc, cm = training.evaluate(params, mcfg, test.images, test.labels)
        report.write_confusion_csv(os.path.join(out, "confusion.csv"), cm)
        metrics["test_accuracy"] = acc
    del heldout_feats
    metrics.update({f"params_{k}": v for k, v in accounting.count_params(mcfg).items()})
    _metrics(out, metrics)
    return metrics


def cmd_design(args, cfg, out):
    params, mcfg, meta = _load_model(args.checkpoint)
    spec = config.optics_spec(cfg)
    spec.check_sampling()
    opts = config.design_options(cfg)
    result = pipeline.design_stem(params, mcfg, spec, opts, channels=cfg["design"]["channels"])
    checkpoint.save_checkpoint(result, os.path.join(out, "optics.ckpt"),
                               meta={"model": meta["model"], "optics": cfg["optics"], "design": cfg["design"]})
    rows = pipeline.design_rows(result)
    report.write_csv(os.path.join(out, "design.csv"), rows)
    designed = [r for r in rows if np.isfinite(r["mean_nrmse"])]
    metrics = {
        "lenses": len(rows),
        "mean_psf_nrmse": float(np.mean([r["mean_nrmse"] for r in designed])) if designed else float("nan"),
        "efficiency_before": float(np.mean([r["efficiency_before"] for r in designed])) if designed else float("nan"),
        "efficiency_after": float(np.mean([r["efficiency_after"] for r in designed])) if designed else float("nan"),
    }
    _metrics(out, metrics)
    return metrics


def _load_optics(path: str, mcfg):
    design, meta = checkpoint.load_checkpoint(path, with_meta=True)
    C = mcfg.stem.channels_out
    if design["psfs"].shape[0] != 2 * C:
        raise InvalidArgument(f"{path} holds {design['psfs'].shape[0]} lenses; simulating needs all {2 * C}")
    cfg = config.defaults()
    cfg["optics"] = meta.get("optics", cfg["optics"])
    return design, config.optics_spec(cfg)


def cmd_simulate(args, cfg, out):
    params, mcfg, _ = _load_model(args.checkpoint)
    design, spec = _load_optics(args.optics, mcfg)
    ds = _dataset(cfg, args.split, mcfg)
    optical = pipeline.simulate_features(design, ds.images, spec, cfg["simulate"]["noise_std"], cfg["seed"])
    electronic = training._batched_features(params, mcfg, ds.images)
    fn = pipeline.feature_nrmse(optical, electronic)
    checkpoint.save_checkpoint({"features": optical, "labels": ds.labels}, os.path.join(out, "features.ckpt"),
                               meta={"split": args.split, "optics": args.optics})
    report.write_csv(os.path.join(out, "feature_nrmse.csv"),
                     [{"channel": c, "nrmse": v} for c, v in enumerate(fn["per_channel"])])
    metrics = {"samples": len(ds), "feature_nrmse_mean": fn["mean"], "feature_nrmse_pooled": fn["pooled"]}
    _metrics(out, metrics)
    return metrics


def cmd_eval(args, cfg, out):
    params, mcfg, _ = _load_model(args.checkpoint)
    if args.features:
        fa = checkpoint.load_checkpoint(args.features)
        acc, cm = training.evaluate(params, mcfg, None, fa["labels"], features=fa["features"])
        n = len(fa["labels"])
    else:
        ds = _dataset(cfg, "test", mcfg)
        acc, cm = training.evaluate(params, mcfg, ds.images, ds.labels)
        n = len(ds)
    report.write_confusion_csv(os.path.join(out, "confusion.csv"), cm)
    report.plot_confusion(os.path.join(out, "confusion.png"), cm, f"accuracy {acc:.4f}")
    metrics = {"samples": n, "accuracy": acc}
    _metrics(out, metrics)
    return metrics


def cmd_gradcheck(args, cfg, out):
    rows = gradcheck.run_all(cfg["seed"], args.suite)
    report.write_csv(os.path.join(out, "gradcheck.csv"), rows)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']:<22s} rel_err={r['max_rel_error']:.2e} "
              f"tol={r['tolerance']:g}")
    metrics = {r["check"]: r["max_rel_error"] for r in rows}
    metrics["all_passed"] = all(r["passed"] for r in rows)
    _metrics(out, metrics)
    if not metrics["all_passed"]:
        raise NumericalFailure("one or more gradient checks failed")
    return metrics


def cmd_report(args, cfg, out):
    mcfg = config.model_config(cfg)
    table = accounting.ablation_table(mcfg)
    report.write_csv(os.path.join(out, "ablation.csv"), table)
    report.plot_ablation(os.path.join(out, "ablation.png"), table)
    lk = next(r for r in table if r["variant"] == mcfg.stem.variant)
    metrics = {"optical_mac_share": lk["mac_optical_share"], "optical_macs": lk["mac_optical"],
               "electronic_params": lk["params_electronic"]}
    if args.checkpoint:
        params, mcfg, _ = _load_model(args.checkpoint)
        spec = config.optics_spec(cfg)
        grid = pipeline.angle_grid(spec)
        kern = pipeline.anchor_kernels(params, mcfg, grid)
        report.write_pgm(os.path.join(out, "kernels.pgm"), report.tile(kern.reshape(-1, *kern.shape[2:]), cols=len(grid)))
    if args.optics:
        design = checkpoint.load_checkpoint(args.optics)
        psfs, targets = design["psfs"], design["targets"]
        flat = lambda a: a.reshape(-1, *a.shape[2:])
        report.write_pgm(os.path.join(out, "psf_gallery.pgm"), report.tile(flat(psfs), cols=psfs.shape[1]))
        report.write_pgm(os.path.join(out, "target_gallery.pgm"), report.tile(flat(targets), cols=targets.shape[1]))
        report.plot_kernel_pairs(os.path.join(out, "psf_vs_target.png"), flat(targets[:2]), flat(psfs[:2]))
        report.write_csv(os.path.join(out, "design.csv"), pipeline.design_rows(design))
    for i, run in enumerate(args.run_dir):
        cm_path = os.path.join(run, "confusion.csv")
        if os.path.exists(cm_path):
            rows = report.read_csv(cm_path)
            cm = np.array([[int(v) for k, v in r.items() if k != "true"] for r in rows])
            report.plot_confusion(os.path.join(out, f"confusion_{i}.png"), cm, os.path.basename(run.rstrip("/")))
        log = os.path.join(run, "train_log.csv")
        if os.path.exists(log):
            rows = report.read_csv(log)
            report.plot_curves(os.path.join(out, f"train_curve_{i}.png"),
                               {"loss": [float(r["loss"]) for r in rows]}, "epoch", "loss")
    _metrics(out, metrics)
    return metrics


COMMANDS = {"train": cmd_train, "design": cmd_design, "simulate": cmd_simulate, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        out = report.ensure_dir(args.out_dir or os.path.join("runs", args.command))
        with output_lock(out), _thread_limit(cfg["threads"]):
            config.dump(cfg, os.path.join(out, "resolved_config.json"))
            metrics = COMMANDS[args.command](args, cfg, out)
        for k, v in metrics.items():
            print(f"{k}: {v}")
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InvalidArgument, NumericalFailure, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
