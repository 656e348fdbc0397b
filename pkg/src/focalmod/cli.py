"""``focalmod`` command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 a check failed.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradsuite
from .accounting import model_summary
from .backbone import Model, ModelConfig, build_model, preset
from .exceptions import FocalModError, TrainingDivergence
from .inspection import export_gating, export_kernels, export_modulator, load_image
from .kvfile import read_kv
from .trainer import TrainConfig, evaluate, gen_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2

log = logging.getLogger("focalmod")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _split_config(kv: dict[str, str]):
    """Split a run config into model, train and data sections.

    Keys are ``preset``, ``model.<field>``, ``train.<field>`` and
    ``data.<n_train|n_eval|classes|resolution|seed|eval_seed>``.
    """
    model_kv, train_kv, data_kv = {}, {}, {}
    name = kv.get("preset")
    for key, value in kv.items():
        if key == "preset":
            continue
        section, _, field = key.partition(".")
        target = {"model": model_kv, "train": train_kv, "data": data_kv}.get(section)
        if target is None or not field:
            raise UsageError(f"config key {key!r} must be 'preset' or start with model., train. or data.")
        target[field] = value
    if name is not None:
        base = preset(name).to_kv()
        base.update(model_kv)
        model_kv = base
    model_cfg = ModelConfig.from_kv(model_kv) if model_kv else preset("micro")
    return model_cfg, TrainConfig.from_kv(train_kv), data_kv


def _model_from_config(path) -> ModelConfig:
    if path is None:
        return preset("micro", dims=(8, 16))
    model_cfg, _, _ = _split_config(read_kv(path))
    return model_cfg


def cmd_gradcheck(args) -> int:
    reports = gradsuite.run_all(args.seed, _model_from_config(args.config))
    failed = 0
    for r in reports:
        ok = r.passed(gradsuite.TOLERANCE)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {r}")
    print(f"{len(reports) - failed}/{len(reports)} checks within {gradsuite.TOLERANCE:g}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_count(args) -> int:
    model = build_model(preset(args.preset), seed=None)
    report = model_summary(model, args.res)
    print(f"{args.preset} @ {args.res}x{args.res}")
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.preset}_{args.res}.csv").write_text(report.csv())
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg, data = _split_config(read_kv(args.config))
    seed = int(data.get("seed", args.seed))
    n_train = int(data.get("n_train", 600))
    n_eval = int(data.get("n_eval", 300))
    classes = int(data.get("classes", model_cfg.num_classes))
    res = int(data.get("resolution", 64))
    train_set = gen_dataset(seed, n_train, classes, res)
    eval_set = gen_dataset(int(data.get("eval_seed", seed + 1)), n_eval, classes, res) if n_eval else None
    model = build_model(model_cfg, seed=seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, rows = train(model, train_set, train_cfg, eval_dataset=eval_set, log_path=out / "metrics.csv")
    model.save(out / "model.fmt")
    tr_acc = evaluate(model, train_set)
    line = f"train_acc={tr_acc:.4f}"
    if eval_set is not None:
        line += f" eval_acc={evaluate(model, eval_set):.4f}"
    print(f"{line} steps={train_cfg.total_steps} seconds={time.perf_counter() - t0:.1f}")
    print(f"wrote {out / 'model.fmt'} and {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = Model.load(args.ckpt)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "kernels":
        art = export_kernels(model, out)
    else:
        if args.image is None:
            raise UsageError(f"inspect {args.what} needs --image")
        image = load_image(args.image)
        fn = export_modulator if args.what == "modulator" else export_gating
        art = fn(model, image, out)
    for f in art.files:
        print(f)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = build_model(preset(args.preset), seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.batch, args.res, args.res, model.config.in_chans))
    model.check_input(x)
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        model.forward(x)
        times.append(time.perf_counter() - t0)
    flops = model.flops(args.res, B=args.batch)["total"]
    best = min(times)
    print(f"{args.preset} batch={args.batch} res={args.res} best={best:.3f}s "
          f"flops={flops:,} rate={flops / best / 1e9:.2f} GFLOP/s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="focalmod", description="Focal modulation image backbones on numpy.")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--config", default=None, help="key=value file describing the model to check")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("count", help="parameter / FLOP / receptive-field table")
    c.add_argument("--preset", required=True)
    c.add_argument("--res", type=int, default=224)
    c.set_defaults(func=cmd_count)

    t = sub.add_parser("train", help="train on the synthetic shape dataset")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("inspect", help="export kernels, modulator or gating maps")
    i.add_argument("what", choices=["kernels", "modulator", "gating"])
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", default=None, help="PPM (P6) or FMT1 image")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="time a forward pass")
    b.add_argument("--preset", required=True)
    b.add_argument("--res", type=int, default=64)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--repeat", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def _threads() -> int:
    raw = os.environ.get("FOCALMOD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FOCALMOD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FOCALMOD_THREADS must be a positive integer, got {raw!r}")
    return n


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("focalmod: error: a subcommand is required", file=sys.stderr)
            return EXIT_USAGE
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"focalmod: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except FocalModError as exc:
        print(f"focalmod: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
