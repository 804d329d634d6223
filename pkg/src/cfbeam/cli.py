"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting, channel, metrics
from . import io as cio
from . import pipeline as pl

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("cfbeam")


def _config(args) -> cio.ExperimentConfig:
    cfg = cio.load_config(args.config) if args.config else cio.ExperimentConfig()
    overrides = list(args.set or [])
    # explicit flags win over the file and over --set
    for flag, key in (("seed", "scenario.seed"), ("n_samples", "n_samples"), ("epochs", "train.epochs"),
                      ("codebook_size", "beamtraining.codebook_size"), ("out_dir", "output_dir"),
                      ("bits", "beamtraining.bits"), ("noise_dbw", "noise_dbw"), ("schemes", "schemes")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return cio.apply_overrides(cfg, overrides) if overrides else cfg


def _out(cfg, args) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg, args):
    if getattr(args, "dataset", None):
        return pl.dataset_from_container(args.dataset, cfg)
    return pl.make_dataset(cfg)


def _point(cfg, dataset, index):
    sweep = pl.resolve_sweep(cfg, dataset)
    return sweep[index % len(sweep)]


def _codebook(args):
    if not getattr(args, "codebook", None):
        return None
    tensors, _ = cio.load_container(args.codebook)
    return pl.codebook_from_tensors(tensors)


# ----------------------------------------------------------------- commands
def cmd_generate_channels(cfg, args):
    out = _out(cfg, args)
    ds = pl.make_dataset(cfg)
    path = Path(args.output) if args.output else out / "dataset.cfbf"
    cio.save_container(path, pl.dataset_tensors(ds), {"config_hash": cio.config_hash(cfg),
                                                      "seed": cfg.scenario.seed, "split": cfg.split})
    print(f"{path} {ds.channels.shape} mean SNR {channel.mean_snr_db(ds.channels, cfg.scenario.sigma2):.2f} dB")


def cmd_design_codebook(cfg, args):
    out = _out(cfg, args)
    ds = _dataset(cfg, args)
    point = _point(cfg, ds, args.point)
    cb = pl.make_codebook(cfg, ds, point.sigma2)
    path = Path(args.output) if args.output else out / "codebook.cfbf"
    cio.save_container(path, pl.codebook_tensors(cb), {"config_hash": cio.config_hash(cfg),
                                                       "seed": cfg.scenario.seed, "sizes": cb.sizes})
    print(f"{path} sizes {cb.sizes}")


def cmd_train(cfg, args):
    out = _out(cfg, args)
    if args.scheme not in pl.DNN_SCHEMES:
        raise cio.ConfigError(f"--scheme must be one of {sorted(pl.DNN_SCHEMES)}")
    ds = _dataset(cfg, args)
    point = _point(cfg, ds, args.point)
    codebook = _codebook(args)
    if pl.DNN_SCHEMES[args.scheme][1] == "hbf" and codebook is None:
        codebook = pl.make_codebook(cfg, ds, point.sigma2)
    fb = pl.measure(cfg, ds, pl.design_ssb(cfg, ds), point)
    model, result = pl.train_dnn(cfg, args.scheme, ds, fb, point.sigma2, codebook)
    chash = cio.config_hash(cfg)
    path = Path(args.output) if args.output else out / f"checkpoint_{args.scheme.lower()}_{point.index}.cfbf"
    pl.save_checkpoint(path, model, {"config_hash": chash, "seed": cfg.scenario.seed, "sigma2": point.sigma2,
                                     "best_epoch": result.best_epoch,
                                     "codebook": None if codebook is None else [i.tolist() for i in codebook.indices()]})
    result.write_curve(path.with_suffix(".curve.csv"), chash)
    print(f"{path} best epoch {result.best_epoch} test sum-rate {result.best_test_sum_rate:.4f}")


def cmd_evaluate(cfg, args):
    out = _out(cfg, args)
    ds = _dataset(cfg, args)
    model, meta = pl.load_checkpoint(args.checkpoint)
    codebook = _codebook(args)
    if codebook is None and meta.get("codebook"):
        codebook = beamtraining_from_lists(meta["codebook"])
    ssb = pl.design_ssb(cfg, ds)
    chash = cio.config_hash(cfg)
    path = Path(args.output) if args.output else out / "evaluate.csv"
    test = ds.test_indices
    with open(path, "w") as f:
        f.write("config_hash,noise_dBW,mean_sum_rate\n")
        for point in pl.resolve_sweep(cfg, ds):
            fb = pl.measure(cfg, ds, ssb, point)
            pre = pl.dnn_precoder(model, fb, test, codebook, cfg.scenario.p_max)
            rate = metrics.sum_rate(metrics.sinr_fdp(ds.channels[test], pre.digital(), point.sigma2)).mean()
            f.write(f"{chash},{point.noise_dbw!r},{rate!r}\n")
            print(f"{point.noise_dbw:9.3f} dBW  {rate:.4f}")


def beamtraining_from_lists(lists):
    from .beamtraining import AnalogCodebook

    return AnalogCodebook.from_indices([np.asarray(x, dtype=np.int64) for x in lists])


def cmd_compare(cfg, args):
    out = _out(cfg, args)
    ds = _dataset(cfg, args)
    test = ds.test_indices
    h = ds.channels[test]
    chash = cio.config_hash(cfg)
    schemes = [s for s in cfg.schemes if s in pl.BASELINES]
    path = Path(args.output) if args.output else out / "compare.csv"
    with open(path, "w") as f:
        f.write("config_hash,noise_dBW,scheme,mean_sum_rate\n")
        for point in pl.resolve_sweep(cfg, ds):
            cache: dict = {}
            for s in schemes:
                pre = pl.baseline_precoder(s, h, point.sigma2, cfg, cache)
                rate = metrics.sum_rate(metrics.sinr_fdp(h, pre.digital(), point.sigma2)).mean()
                f.write(f"{chash},{point.noise_dbw!r},{s},{rate!r}\n")
                print(f"{point.noise_dbw:9.3f} dBW  {s:14s} {rate:.4f}")


def cmd_complexity_report(cfg, args):
    out = _out(cfg, args)
    rows = pl.table_rows(cfg, l_iters=args.iterations)
    path = Path(args.output) if args.output else out / "complexity.csv"
    accounting.write_table_csv(path, rows, cio.config_hash(cfg))
    for scheme, up, down, rm, _ in rows:
        print(f"{scheme:14s} RM {'' if rm is None else f'{float(rm):.4g}'}")


def cmd_signaling_report(cfg, args):
    out = _out(cfg, args)
    sc = cfg.scenario
    path = Path(args.output) if args.output else out / "signaling.csv"
    with open(path, "w") as f:
        f.write("config_hash,scheme,signaling_up,signaling_down\n")
        for s in cfg.schemes:
            r = accounting.signaling(s, sc.M, sc.N_T, sc.N_RF, sc.N_U, sc.K)
            f.write(f"{cio.config_hash(cfg)},{s},{r.up_count},{r.down_count}\n")
            print(f"{s:14s} up {r.up_count:6d} down {r.down_count:6d}")


def cmd_run(cfg, args):
    result = pl.run_experiment(cfg)
    for (scheme, i), ev in sorted(result.evaluations.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"{result.sweep[i].noise_dbw:9.3f} dBW  {scheme:14s} {ev.mean_sum_rate:.4f}")
    print(f"results in {cfg.output_dir} (config {result.config_hash})")


COMMANDS = {
    "generate-channels": cmd_generate_channels,
    "design-codebook": cmd_design_codebook,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "complexity-report": cmd_complexity_report,
    "signaling-report": cmd_signaling_report,
    "run": cmd_run,
}


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _names(text):
    return [x.strip().upper() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfbeam", description="Cell-free beamforming experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out-dir", dest="out_dir")
        s.add_argument("-o", "--output", help="output file")
        s.add_argument("--noise-dbw", dest="noise_dbw", type=_floats, help="comma-separated noise levels (dBW)")
        s.add_argument("--schemes", type=_names, help="comma-separated scheme names")
        s.add_argument("--bits", type=int, help="RSSI quantizer resolution")
        if name in ("generate-channels", "run"):
            s.add_argument("--n-samples", dest="n_samples", type=int)
        if name in ("design-codebook", "train", "evaluate", "compare"):
            s.add_argument("--dataset", help="dataset container from generate-channels")
        if name in ("design-codebook", "train"):
            s.add_argument("--point", type=int, default=-1, help="sweep index of the design noise level")
        if name in ("design-codebook", "run"):
            s.add_argument("--codebook-size", dest="codebook_size", type=int)
        if name in ("train", "evaluate"):
            s.add_argument("--codebook", help="codebook container")
        if name in ("train", "run"):
            s.add_argument("--epochs", type=int)
        if name == "train":
            s.add_argument("--scheme", required=True)
        if name == "evaluate":
            s.add_argument("--checkpoint", required=True)
        if name == "complexity-report":
            s.add_argument("--iterations", type=int, default=18, help="PE-AltMin iteration count")
    return p


def _limit_threads():
    n = os.environ.get("CFBEAM_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
        del limiter
    except cio.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
