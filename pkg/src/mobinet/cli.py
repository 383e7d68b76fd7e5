"""Command-line entry point.

Subcommands: train, eval, ablate, flops, bench, export, inspect. Exit
codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage or
config error. Every artifact lands under --out.

MOBINET_THREADS caps BLAS parallelism (default 1 for determinism); it is
applied before numpy loads, so the heavy imports happen inside run().
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_cap():
    n = os.environ.get("MOBINET_THREADS", "1")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobinet",
        description="1-bit binary CNN toolkit: train, measure, and ship "
        "xnor-popcount networks.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="network/train config file (key = value lines)")
            p.add_argument(
                "--set",
                dest="overrides",
                action="append",
                default=[],
                metavar="KEY=VALUE",
                help="override a config key (repeatable)",
            )
        p.add_argument("--out", default="mobinet-out", help="output directory")
        p.add_argument("--seed", type=int, default=7, help="RNG seed")

    p = sub.add_parser("train", help="train a network on the configured dataset")
    common(p)
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--export", action="store_true", help="export 1-bit model at the end")

    p = sub.add_parser("eval", help="evaluate a model or checkpoint on the test split")
    common(p)
    p.add_argument("--model", required=True, help="model (.mobi) or checkpoint (.npz)")

    p = sub.add_parser("ablate", help="run the controlled comparison suites")
    common(p)
    p.add_argument(
        "--suite",
        default="all",
        choices=["skip", "blocks", "prelu", "kdep", "all"],
        help="which comparison to run",
    )
    p.add_argument("--epochs", type=int, help="override epoch count")

    p = sub.add_parser("flops", help="print the op/param/memory report")
    common(p)
    p.add_argument("--resolution", type=int, help="input resolution override")

    p = sub.add_parser("bench", help="wall-clock kernel benchmarks")
    common(p, config=False)
    p.add_argument("--kernel", default="binary_dense_conv",
                   help="kernel id (binary_dense_conv, float_conv, xnor_gemm, pack_rows)")
    p.add_argument("--sizes", default="64,128,256", help="comma list of channel counts")
    p.add_argument("--spatial", type=int, default=14, help="input H = W")
    p.add_argument("--reps", type=int, default=20, help="repetitions per size")

    p = sub.add_parser("export", help="export a checkpoint as a 1-bit model file")
    common(p)
    p.add_argument("--checkpoint", required=True, help="training checkpoint (.npz)")

    p = sub.add_parser("inspect", help="print a model file manifest")
    common(p, config=False)
    p.add_argument("--model", required=True, help="model file (.mobi)")
    return parser


def _load_configs(args):
    """(NetworkConfig, TrainConfig-ish dict) from file + --set overrides."""
    from .errors import ConfigError
    from .network import network_config_from_dict

    net_keys = {
        "variant", "k", "width_mult", "classes", "resolution", "channels",
        "wiring", "prelu", "stem_pool", "dtype", "schedule",
    }
    train_keys = {
        "epochs", "batch_size", "lr", "lr_decay_points", "decay_factor",
        "weight_decay", "dataset", "dataset_kind", "n_train", "n_test",
        "train_images", "train_labels", "test_images", "test_labels",
    }
    values = {}
    if getattr(args, "config", None):
        from pathlib import Path

        text = Path(args.config).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{args.config}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        values[key] = val
    unknown = set(values) - net_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    net_cfg = network_config_from_dict({k: v for k, v in values.items() if k in net_keys})
    return net_cfg, {k: v for k, v in values.items() if k in train_keys}


def _train_config(args, train_values, num_classes, size):
    from .data import DatasetSpec
    from .training import TrainConfig

    ds_kwargs = {
        "source": train_values.get("dataset", "synthetic"),
        "kind": train_values.get("dataset_kind", "stripes"),
        "num_classes": num_classes,
        "size": size,
        "seed": args.seed,
    }
    for k in ("train_images", "train_labels", "test_images", "test_labels"):
        if k in train_values:
            ds_kwargs[k] = train_values[k]
    for k in ("n_train", "n_test"):
        if k in train_values:
            ds_kwargs[k] = int(train_values[k])
    kwargs = {"seed": args.seed, "dataset": DatasetSpec(**ds_kwargs)}
    if "epochs" in train_values:
        kwargs["epochs"] = int(train_values["epochs"])
    if getattr(args, "epochs", None):
        kwargs["epochs"] = args.epochs
    if "batch_size" in train_values:
        kwargs["batch_size"] = int(train_values["batch_size"])
    if "lr" in train_values:
        kwargs["lr"] = float(train_values["lr"])
    if "lr_decay_points" in train_values:
        kwargs["lr_decay_points"] = tuple(
            int(s) for s in train_values["lr_decay_points"].split(",") if s.strip()
        )
    if "decay_factor" in train_values:
        kwargs["decay_factor"] = float(train_values["decay_factor"])
    if "weight_decay" in train_values:
        kwargs["weight_decay"] = float(train_values["weight_decay"])
    return TrainConfig(**kwargs)


def _cmd_train(args):
    from pathlib import Path

    from . import modelio, report
    from .network import build_network
    from .training import train

    net_cfg, train_values = _load_configs(args)
    cfg = _train_config(args, train_values, net_cfg.num_classes, net_cfg.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = build_network(net_cfg, seed=cfg.seed)
    resume = modelio.load_checkpoint(args.resume) if args.resume else None

    def log(row):
        print(
            f"epoch {row['epoch']:3d}  lr {row['lr']:.2e}  "
            f"loss {row['train_loss']:.4f}  top1 {row['test_top1']:.2f}  "
            f"top5 {row['test_top5']:.2f}"
        )

    from dataclasses import replace

    cfg = replace(cfg, checkpoint_dir=str(out), checkpoint_every=cfg.checkpoint_every)
    history = train(net, cfg, log=log, resume=resume)
    report.history_csv(out / "history.csv", history)
    rng_done = None
    modelio.save_checkpoint(out / "final.npz", net, epoch=len(history),
                            history=history, rng=rng_done)
    if args.export:
        size = modelio.export_model(out / "model.mobi", net)
        print(f"exported {size} bytes to {out / 'model.mobi'}")
    print(f"history written to {out / 'history.csv'}")
    return EXIT_OK


def _cmd_eval(args):
    from . import modelio
    from .training import evaluate

    net_cfg, train_values = _load_configs(args)
    kind = modelio.sniff_kind(args.model)
    if kind == "model":
        net = modelio.load_model(args.model)
    else:
        state = modelio.load_checkpoint(args.model)
        from .network import build_network

        net = build_network(state["net_config"], seed=args.seed)
        net.load_state_arrays(state["network"])
    cfg = _train_config(args, train_values, net.cfg.num_classes, net.cfg.resolution)
    _, _, xte, yte = cfg.dataset.load()
    top1, top5, loss = evaluate(net, xte, yte)
    print(f"test top1 {top1:.2f}  top5 {top5:.2f}  loss {loss:.4f}")
    return EXIT_OK


def _cmd_ablate(args):
    from pathlib import Path

    from . import report
    from .training import ablation_suite, desk_train_config

    _, train_values = _load_configs(args)
    cfg = _train_config(args, train_values, 10, 32)
    base = desk_train_config(dataset=cfg.dataset, seed=args.seed)
    if getattr(args, "epochs", None):
        from dataclasses import replace

        base = replace(base, epochs=args.epochs)
    suites = ("skip", "blocks", "prelu", "kdep") if args.suite == "all" else (args.suite,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        if "run" in row:
            print(f"== training {row['run']}")
        else:
            print(
                f"   epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
                f"top1 {row['test_top1']:.2f}"
            )

    result = ablation_suite(base, suites=suites, log=log)
    _write_ablation_artifacts(out, result, suites)
    cols = sorted({k for row in result["comparisons"] for k in row})
    print(report.text_table(result["comparisons"], cols, title="comparisons"))
    if result["kdep"]:
        print()
        print(report.text_table(result["kdep"], ["K", "top1", "top5", "effective_flops"],
                                title="K sweep"))
    return EXIT_OK


def _write_ablation_artifacts(out, result, suites):
    from . import report

    runs = result["runs"]
    for suite in suites:
        if suite == "skip":
            names = [n for n in ("vanilla-K0", "mid-K0") if n in runs]
        elif suite == "blocks":
            names = [n for n in ("vanilla-K0", "pre-K0") if n in runs]
        elif suite == "prelu":
            names = [n for n in ("mid-K2-relu", "mid-K2") if n in runs]
        else:
            names = [n for n in ("mid-K0", "mid-K1", "mid-K2", "mid-K3") if n in runs]
        hist = {n: runs[n].history for n in names}
        if not hist:
            continue
        report.curves_csv(out / f"curves_{suite}_loss.csv", hist, field="train_loss")
        report.curves_csv(out / f"curves_{suite}_top1.csv", hist, field="test_top1")
        report.svg_line_chart(
            out / f"curves_{suite}_loss.svg",
            {
                n: [(r["epoch"], r["train_loss"]) for r in h]
                for n, h in hist.items()
            },
            title=f"{suite}: training loss",
            ylabel="loss",
        )
    rows = result["comparisons"]
    if rows:
        cols = sorted({k for row in rows for k in row})
        report.write_csv(out / "comparisons.csv", rows, cols)
    if result["kdep"]:
        report.write_csv(out / "kdep.csv", result["kdep"],
                         ["K", "top1", "top5", "effective_flops"])


def _cmd_flops(args):
    from . import perf, report
    from .network import build_network

    net_cfg, _ = _load_configs(args)
    net = build_network(net_cfg, seed=args.seed)
    rep = perf.count(net, args.resolution or net_cfg.resolution)
    print(report.perf_report_text(rep))
    return EXIT_OK


def _cmd_bench(args):
    from pathlib import Path

    from . import perf, report

    sizes = tuple(int(s) for s in args.sizes.split(",") if s.strip())
    rows = perf.bench(args.kernel, sizes=sizes, spatial=args.spatial,
                      repetitions=args.reps, seed=args.seed)
    cols = ["kernel", "channels", "spatial", "median_ns", "reps",
            "effective_flops", "eff_flops_per_s"]
    print(report.text_table(rows, cols, title="benchmark"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "bench.csv", rows, cols)
    return EXIT_OK


def _cmd_export(args):
    from pathlib import Path

    from . import modelio
    from .network import build_network

    state = modelio.load_checkpoint(args.checkpoint)
    net = build_network(state["net_config"], seed=args.seed)
    net.load_state_arrays(state["network"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = modelio.export_model(out / "model.mobi", net)
    print(f"exported {size} bytes to {out / 'model.mobi'}")
    return EXIT_OK


def _cmd_inspect(args):
    from pathlib import Path

    from . import modelio

    print(modelio.inspect_model_bytes(Path(args.model).read_bytes()))
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "flops": _cmd_flops,
    "bench": _cmd_bench,
    "export": _cmd_export,
    "inspect": _cmd_inspect,
}


def run(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits itself on usage errors
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    from .errors import ConfigError, DatasetError, FormatError, MobinetError

    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, MobinetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
