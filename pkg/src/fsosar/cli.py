"""Command line entry point: ``fsosar {gen,train,eval,compare,correlate}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .embeddings import DatasetError, SyntheticConfig, generate_synthetic, save_embeddings
from .episodes import EpisodeError
from .metrics import MetricsError
from .runner import (
    ConfigError,
    TrainingDiverged,
    compare,
    correlation_report,
    make_config,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

_FLAG_TO_FIELD = {
    "technique": "technique",
    "head": "head_kind",
    "k_way": "k_way",
    "n_shot": "n_shot",
    "iterations": "train_iterations",
    "iteration_cap": "iteration_cap",
    "tau": "tau",
    "seed": "seed",
    "out": "out_dir",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _add_common(p: argparse.ArgumentParser, technique_help: str = "open-set technique") -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--technique", help=technique_help)
    p.add_argument("--head", choices=["cosine", "neg_distance"])
    p.add_argument("--k-way", type=int)
    p.add_argument("--n-shot", type=int)
    p.add_argument("--iterations", type=int, help="number of training tasks")
    p.add_argument("--iteration-cap", type=int, help="hard cap on training tasks (e.g. 1000)")
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsosar", description="Few-shot open-set recognition over embedding vectors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic embedding file")
    _add_common(g)

    t = sub.add_parser("train", help="train, evaluate and write report.json / scores.csv / losses.csv")
    _add_common(t)

    e = sub.add_parser("eval", help="evaluate a saved model (or the untrained initialization)")
    _add_common(e)
    e.add_argument("--model", help="model.npz written by 'train'")

    c = sub.add_parser("compare", help="one row per technique, deltas against the first")
    _add_common(c, "comma-separated techniques; the first is the baseline row")

    r = sub.add_parser("correlate", help="Pearson correlation of FS ACC vs AUROC across runs")
    r.add_argument("reports", nargs="+", help="report.json files or run directories")
    r.add_argument("--out", help="output directory")
    return parser


def _config_from_args(args, **extra):
    overrides = {field: getattr(args, flag) for flag, field in _FLAG_TO_FIELD.items()}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    overrides.update(extra)
    return make_config(args.config, **overrides)


def _cmd_gen(args) -> int:
    cfg = _config_from_args(args)
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    syn = SyntheticConfig(cfg.num_classes, cfg.items_per_class, cfg.d_in, cfg.inter_class_scale, cfg.intra_class_sigma, seed)
    ds = generate_synthetic(syn, k_way=cfg.k_way)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(ds, out / "embeddings.csv")
    print(f"wrote {len(ds)} embeddings (d_in={ds.d_in}, {len(ds.label_set)} classes) to {out / 'embeddings.csv'}")
    return EXIT_OK


def _print_report(rep) -> None:
    print(
        f"FS ACC {100 * rep.fs_acc:.2f}  OS ACC {100 * rep.os_acc:.2f}  AUROC {100 * rep.auroc:.2f}  "
        f"AUPR {100 * rep.aupr:.2f}  OSCR {100 * rep.oscr:.2f}  (n={rep.n_known}+{rep.n_unknown})"
    )


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    rec = run_experiment(cfg, cfg.out_dir)
    _print_report(rec.report)
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    rec = run_experiment(cfg, cfg.out_dir, model_path=args.model, do_train=False)
    _print_report(rec.report)
    return EXIT_OK


def _cmd_compare(args) -> int:
    base = _config_from_args(args, technique=None)
    if args.technique:
        techniques = [t.strip() for t in args.technique.split(",") if t.strip()]
    elif base.head_kind == "cosine":
        techniques = ["softmax-mls", "eos", "gc", "fr-disc"]
    else:
        techniques = ["softmax-mss", "eos", "gc", "fr-disc"]
    configs = []
    for tech in techniques:
        cfg = dataclasses.replace(base, technique=tech)
        cfg.validate()
        configs.append(cfg)
    table = compare(configs, base.out_dir)
    print(table.to_text(), end="")
    return EXIT_OK


def _cmd_correlate(args) -> int:
    points = []
    for item in args.reports:
        path = Path(item)
        if path.is_dir():
            path = path / "report.json"
        rep = json.loads(path.read_text(encoding="utf-8"))
        if "fs_acc" not in rep or "auroc" not in rep:
            raise ConfigError(f"{path} is not a report.json (missing fs_acc/auroc)")
        points.append((str(item), float(rep["fs_acc"]), float(rep["auroc"])))
    result = correlation_report(points)
    print(f"Pearson(FS ACC, AUROC) = {result['pearson']:.4f} over {len(points)} runs")
    if "note" in result:
        print(result["note"])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "correlation.csv", "w", encoding="utf-8") as f:
            f.write("run,fs_acc,auroc\n")
            for p in result["points"]:
                f.write(f"{p['run']},{p['fs_acc']:.17g},{p['auroc']:.17g}\n")
        (out / "correlation.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval, "compare": _cmd_compare, "correlate": _cmd_correlate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, EpisodeError, MetricsError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
