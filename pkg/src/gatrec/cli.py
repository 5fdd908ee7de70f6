"""``gatrec`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from typing import Optional, Sequence

from . import pipeline as pl
from .config import ConfigError, load_config
from .dataset import Dataset, load_interactions

log = logging.getLogger("gatrec")

SUBCOMMANDS = ("ingest", "profile", "embed", "train", "evaluate", "recommend", "pipeline")


def _k_list(s: str) -> list[int]:
    try:
        ks = [int(k) for k in s.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {s!r}") from None
    if not ks or min(ks) <= 0:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run file")
    common.add_argument("--offline", action="store_true", help="no network: file catalog + fallback providers")
    common.add_argument("--seed", type=int, help="training seed")
    common.add_argument("--alpha", type=float, help="weight of the cosine alignment term")
    common.add_argument("--k", type=_k_list, help="comma-separated K values (recommend uses the first)")
    common.add_argument("--ablate", action="store_true", help="random node features and alpha = 0")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gatrec", description="Graph-attention collaborative filtering")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.add_parser("ingest", parents=[common], help="parse ratings and fetch item metadata")
    for name, help_ in (("profile", "build user preference profiles"),
                        ("embed", "embed profiles and item texts"),
                        ("train", "train a model (all data, or one fold's training split)"),
                        ("evaluate", "evaluate a fold's trained model")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--fold", type=int, default=0 if name == "evaluate" else None)
    p = sub.add_parser("recommend", parents=[common], help="print a user's top-K list")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--fold", type=int)
    sub.add_parser("pipeline", parents=[common], help="ingest, profile, embed, then k-fold train + evaluate")
    return parser


def _check_fold(cfg, fold):
    if fold is not None and not 0 <= fold < cfg.eval.folds:
        raise ValueError(f"--fold must be in [0, {cfg.eval.folds})")


def _train_part(cfg, dataset, fold):
    if fold is None:
        return list(dataset.interactions), []
    return pl.splits(cfg, dataset)[fold]


def run_command(argv: Optional[Sequence[str]] = None, clients: Optional[pl.Clients] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, offline=args.offline, seed=args.seed, alpha=args.alpha, k=args.k,
                          ablate=args.ablate, out=args.out)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    problems = cfg.validate()
    if problems:
        for v in problems:
            print(f"config error: {v}", file=sys.stderr)
        return 1
    try:
        return _dispatch(args, cfg, clients)
    except Exception as exc:  # one diagnostic line, nonzero exit
        if args.verbose:
            log.exception("failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _dispatch(args, cfg, clients) -> int:
    cmd = args.command
    fold = getattr(args, "fold", None)
    _check_fold(cfg, fold)
    if cmd == "pipeline":
        res = pl.run_pipeline(cfg, clients)
        print(res.mean_all.to_text("mean"), end="")
        print(f"reports written to {cfg.out_dir}")
        return 0
    if cmd == "recommend":
        dataset = Dataset.from_interactions(load_interactions(cfg.ratings, cfg.format))
        model = pl.load_model(cfg, fold)
        train_part, _ = _train_part(cfg, dataset, fold)
        seen = [x.item_id for x in train_part if x.user_id == args.user]
        k = args.k[0] if args.k else 10
        for rank, (item, s) in enumerate(pl.recommend(model, args.user, k, seen), start=1):
            print(f"{rank} {item} {s:.6f}")
        return 0

    clients = pl.make_clients(cfg, clients)
    dataset = pl.ingest(cfg, clients)
    if cmd == "ingest":
        n_meta = sum(1 for m in dataset.items.values() if m.genres or m.overview)
        print(f"interactions {len(dataset.interactions)}  users {len(dataset.user_ids)}  "
              f"items {len(dataset.item_ids)}  with metadata {n_meta}")
        return 0
    train_part, test_part = _train_part(cfg, dataset, fold)
    if cmd in ("profile", "embed"):
        profiles = pl.profiles_for(cfg, dataset, train_part, fold, clients)
        if cmd == "profile":
            counts = Counter(p.provenance.value for p in profiles.values())
            print(f"profiles {len(profiles)}  " + "  ".join(f"{k} {v}" for k, v in sorted(counts.items())))
        else:
            table = pl.embeddings_for(cfg, dataset, profiles, fold, clients)
            print(f"embedded {len(table.user_vectors)} users and {len(table.item_vectors)} items (dim {table.dim})")
        return 0
    if cmd == "train":
        model = pl.train_model(cfg, dataset, train_part, fold, clients)
        print(f"trained {model.meta['epochs_run']} epochs, best validation loss {model.meta['best_val_loss']:.6f}; "
              f"checkpoint {pl.fold_dir(cfg, fold) / 'model.ckpt'}")
        return 0
    if cmd == "evaluate":
        model = pl.load_model(cfg, fold)
        reports = pl.evaluate_model(cfg, model, train_part, test_part)
        pl.write_reports(pl.fold_dir(cfg, fold), fold, reports)
        for r in reports:
            print(r.to_text(f"fold {fold}"), end="")
        return 0
    raise AssertionError(cmd)


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
