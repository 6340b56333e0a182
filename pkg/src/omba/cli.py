"""Command-line entry point: ingest, train, mine, eval, analyze."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import fields

import numpy as np

from . import __version__, config as cfgmod, kernels
from .arm import HashEnsemble, MiningStats, mine_rules, write_rules
from .evaluation import run_protocol, user_repetition_test
from .ingest import FORMATS, FormatError, OrderError, read_transactions, summarize, window_stream, write_canonical
from .model import EmbeddingStore
from .ome import OnlineTrainer
from .stats import build_index

log = logging.getLogger("omba")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SNAPSHOT_NAME = "embeddings.omba"
RULES_NAME = "rules.jsonl"
REPORT_NAME = "report.json"


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    return {"omba": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "kernel": kernels.BACKEND}


def write_manifest(out_dir, command: str, outputs: list[str], cfg=None, extra=None) -> str:
    manifest = {"command": command, "versions": _versions(),
                "outputs": {name: _sha256(os.path.join(out_dir, name)) for name in outputs}}
    if cfg is not None:
        manifest["config_hash"] = cfg.digest()
        manifest["seed"] = cfg.seed
        manifest["sub_seeds"] = {n: cfg.sub_seed(n) for n in cfgmod.SEED_NAMES}
        manifest["config"] = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"manifest_{command}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _require_file(path, what="input"):
    if not path or not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")


def _format(name):
    try:
        return FORMATS[name]
    except KeyError:
        raise UsageError(f"unknown format {name!r}; known: {', '.join(sorted(FORMATS))}") from None


def _load_windows(cfg):
    _require_file(cfg.dataset, "dataset")
    parsed = read_transactions(cfg.dataset, _format(cfg.format))
    if parsed.skipped:
        log.warning("%d malformed rows skipped", parsed.skipped_count)
    return parsed.baskets, window_stream(parsed.baskets, cfg.window_days)


def _trainer(cfg, store=None):
    threads = cfg.threads if cfg.mode == "parallel" else 1
    return OnlineTrainer(cfg.hyperparameters(), store=store, init_seed=cfg.sub_seed("init"),
                         train_seed=cfg.sub_seed("negatives"), threads=threads)


def _out_dir(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg.output_dir


# -- commands ----------------------------------------------------------------


def cmd_ingest(args) -> int:
    _require_file(args.input)
    parsed = read_transactions(args.input, _format(args.format))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "transactions.csv"), "w", encoding="utf-8", newline="") as fh:
        write_canonical(parsed.baskets, fh)
    summary = summarize(parsed.baskets)
    summary["skipped_rows"] = parsed.skipped_count
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(args.out, "ingest", ["transactions.csv", "summary.json"],
                   extra={"input": os.path.basename(args.input), "format": args.format})
    print(f"{'Users':>8} {'Items':>8} {'Transactions':>13} {'Baskets':>8}")
    print(f"{summary['users']:>8} {summary['items']:>8} {summary['transactions']:>13} {summary['baskets']:>8}")
    if parsed.skipped_count:
        print(f"skipped {parsed.skipped_count} malformed row(s)", file=sys.stderr)
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    _, windows = _load_windows(cfg)
    out = _out_dir(cfg)
    trainer = _trainer(cfg)
    with open(os.path.join(out, "train_log.jsonl"), "w", encoding="utf-8") as fh:
        for w in windows:
            rep = trainer.train_window(w)
            fh.write(json.dumps(rep.as_dict()) + "\n")
            log.info("window %d: %d tasks, mean loss %.4f", rep.window, rep.tasks, rep.mean_loss)
    trainer.store.save(os.path.join(out, SNAPSHOT_NAME))
    write_manifest(out, "train", [SNAPSHOT_NAME, "train_log.jsonl"], cfg)
    print(f"trained {len(trainer.store)} units over {len(windows)} windows -> {os.path.join(out, SNAPSHOT_NAME)}")
    return EXIT_OK


def cmd_mine(cfg, args) -> int:
    out = _out_dir(cfg)
    snapshot = args.snapshot or os.path.join(out, SNAPSHOT_NAME)
    _require_file(snapshot, "snapshot")
    store = EmbeddingStore.load(snapshot)
    index = None
    if cfg.dataset:
        baskets, _ = _load_windows(cfg)
        index = build_index(baskets)
    ensemble = HashEnsemble(store.d, cfg.num_functions, cfg.num_tables, seed=cfg.sub_seed("ensemble"))
    stats = MiningStats()
    rules = mine_rules(store, ensemble, cfg.top_k, index, min_count=cfg.min_count, stats=stats)
    with open(os.path.join(out, RULES_NAME), "w", encoding="utf-8") as fh:
        write_rules(rules, fh)
    outputs = [RULES_NAME]
    if args.buckets:
        from .arm import bucket_groups

        with open(os.path.join(out, "buckets.json"), "w", encoding="utf-8") as fh:
            json.dump(bucket_groups(store, ensemble), fh)
        outputs.append("buckets.json")
    write_manifest(out, "mine", outputs, cfg, extra={"mining": vars(stats), "snapshot": _sha256(snapshot)})
    print(f"{len(rules)} rules -> {os.path.join(out, RULES_NAME)}")
    return EXIT_OK


def pick_query_windows(cfg, n_windows: int) -> list[int]:
    """Explicit windows, or ``num_query_windows`` random ones from the second half."""
    explicit = cfg.explicit_query_windows()
    if explicit is not None:
        return explicit
    half = np.arange(n_windows // 2, n_windows)
    k = min(cfg.num_query_windows, len(half))
    rng = np.random.default_rng(cfg.sub_seed("eval"))
    return sorted(int(x) for x in rng.choice(half, k, replace=False))


def cmd_eval(cfg, args) -> int:
    _, windows = _load_windows(cfg)
    out = _out_dir(cfg)
    qw = pick_query_windows(cfg, len(windows))
    res = run_protocol(windows, qw, cfg.hyperparameters(), M=cfg.M, scorers=cfg.scorer_list, ks=cfg.ks_list,
                       eval_seed=cfg.sub_seed("eval"), trainer=_trainer(cfg),
                       uniform_negatives=cfg.eval_negatives == "uniform", one_per_basket=cfg.one_per_basket)
    with open(os.path.join(out, REPORT_NAME), "w", encoding="utf-8") as fh:
        json.dump(res.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [REPORT_NAME]
    if args.ranks:
        with open(os.path.join(out, "ranks.csv"), "w", encoding="utf-8") as fh:
            names = list(res.ranks)
            fh.write("query," + ",".join(names) + "\n")
            for i, row in enumerate(zip(*(res.ranks[s] for s in names))):
                fh.write(f"{i}," + ",".join(map(str, row)) + "\n")
        outputs.append("ranks.csv")
    write_manifest(out, "eval", outputs, cfg, extra={"query_windows": qw, "skipped_baskets": res.skipped_baskets})
    print(json.dumps(res.as_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    _require_file(args.input)
    parsed = read_transactions(args.input, _format(args.format))
    res = user_repetition_test(parsed.baskets, args.k, np.random.default_rng(args.seed))
    text = json.dumps(res.as_dict(), indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "repetition.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        write_manifest(args.out, "analyze", ["repetition.json"], extra={"k": args.k, "seed": args.seed})
    print(text)
    return EXIT_OK


# -- argument handling -------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat 'key = value' configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    keys = p.add_argument_group("config keys", "each overrides the file and --set")
    for f in fields(cfgmod.RunConfig):
        keys.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="V",
                          help=f"default: {cfgmod._format(f.default)}")


def resolve_config(args) -> cfgmod.RunConfig:
    """File values, then --set overrides, then dedicated flags (flags win)."""
    text = ""
    if args.config:
        _require_file(args.config, "config")
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    cfg = cfgmod.parse(text)
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise cfgmod.ConfigError([f"--set {item!r}: expected KEY=VALUE"])
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    for f in fields(cfgmod.RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            pairs.append((f.name, v))
    return cfgmod.build(pairs, cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omba", description="Online market basket analysis")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a transaction file into the canonical CSV")
    p.add_argument("input")
    p.add_argument("--format", default="canonical", help=f"one of {', '.join(sorted(FORMATS))}")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train embeddings window by window")
    _add_config_flags(p)

    p = sub.add_parser("mine", help="mine association rules from an embedding snapshot")
    _add_config_flags(p)
    p.add_argument("--snapshot", help=f"defaults to OUTPUT_DIR/{SNAPSHOT_NAME}")
    p.add_argument("--buckets", action="store_true", help="also dump raw bucket groups")

    p = sub.add_parser("eval", help="intra-basket item retrieval evaluation")
    _add_config_flags(p)
    p.add_argument("--ranks", action="store_true", help="also write per-query ranks CSV")

    p = sub.add_parser("analyze", help="user repetition t-test")
    p.add_argument("input")
    p.add_argument("--k", type=int, default=10000, help="basket pairs per sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", default="canonical")
    p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        cfg = resolve_config(args)
        return {"train": cmd_train, "mine": cmd_mine, "eval": cmd_eval}[args.command](cfg, args)
    except cfgmod.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OrderError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
