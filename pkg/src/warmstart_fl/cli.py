"""Command line: ``run``, ``preset``, ``report`` and ``audit``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, ExperimentConfig, apply_overrides, load_config, parse_override, preset
from .harness import GeneratorCache, ReportError, _benchmark, report, run
from .privacy import top_k_similar
from .warmstart import build_compact_subset, build_warm_start, client_payload, init_classifier


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--preset", choices=PRESETS, help="start from a named preset")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); replaces the config's seeds")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config key, JSON value (repeatable)")
    p.add_argument("--out-dir", default="runs/latest")


def resolve_config(args) -> ExperimentConfig:
    cfg = preset(args.preset) if args.preset else ExperimentConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    cfg = apply_overrides(cfg, dict(parse_override(o) for o in args.override))
    if args.seed:
        cfg = dataclasses.replace(cfg, seeds=tuple(args.seed))
    return cfg.validate()


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    run(cfg, args.out_dir)
    print(f"wrote {args.out_dir} (config {cfg.config_hash()})")
    print(report([args.out_dir]))
    return 0


def cmd_preset(args) -> int:
    text = json.dumps(preset(args.name).to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_report(args) -> int:
    print(report(args.paths, out_csv=args.csv))
    return 0


def cmd_audit(args) -> int:
    """Warm start only, then the duplication audit for every seed."""
    cfg = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = GeneratorCache()
    runs = []
    for seed in cfg.seeds:
        bench = _benchmark(cfg, seed, -1)
        base = cache.base(cfg, bench, seed)
        payloads = [client_payload(c, base, cfg.warm, seed, cfg.partition.n_classes) for c in bench.clients]
        init = init_classifier(cfg.partition.dim, cfg.classifier_hidden, cfg.partition.n_classes, seed)
        server = build_warm_start(payloads, base, init, cfg.train, cfg.warm.multiplier, epochs=0, seed=seed)
        private = np.vstack([c.x_train for c in bench.clients])
        res = top_k_similar(server.synthetic.x, private, k=args.k, metric=args.metric)
        runs.append({"seed": seed, **res.summary()})
        if args.export_synthetic:
            server.synthetic.to_csv(out / f"synthetic_seed{seed}.csv")
    doc = {"config_hash": cfg.config_hash(), "runs": runs,
           "max_similarity": max(r["nearest_score_max"] for r in runs)}
    (out / "privacy_report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for r in runs:
        top = ", ".join(f"#{p['rank']} syn {p['synthetic']} ~ priv {p['private']}: {p['score']:.4f}"
                        for p in r["top_pairs"])
        print(f"seed {r['seed']}: {top}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warmstart-fl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write metrics")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("preset", help="print a preset config as JSON")
    p.add_argument("name", choices=PRESETS)
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("report", help="summarize metrics.csv files or run directories")
    p.add_argument("paths", nargs="+")
    p.add_argument("--csv", help="also write the summary table here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="synthetic-vs-private duplication audit")
    _add_config_args(p)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--export-synthetic", action="store_true", help="also write the synthetic set as CSV")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
