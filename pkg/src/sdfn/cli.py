"""``sdfn`` command line.

Exit codes: 0 success, 1 failed check, 2 bad config or input file,
3 missing checkpoint, 4 numerical failure.  Results go to stdout as JSON;
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import PRESETS, TrainConfig, parse_config, parse_overrides
from .data import (
    build_dataset,
    dataset_from_records,
    generate_world,
    read_triplets,
    write_triplets,
)
from .exceptions import ConfigError, NumericsError, ParseError
from .experiments import ABLATIONS, run_variants, write_tsv
from .router import check_stochastic
from .training import evaluate_recall, load_params, read_metrics, routing_records, run_training

log = logging.getLogger("sdfn")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NO_CHECKPOINT, EXIT_NUMERICS = 0, 1, 2, 3, 4


class MissingCheckpoint(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _config(args) -> TrainConfig:
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return parse_config(args.config, overrides, args.preset)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _world_meta(cfg: TrainConfig) -> dict:
    return {"seed": cfg.seed, "n_attrs": cfg.n_attrs, "n_values": cfg.n_values, "grid": cfg.grid, "c_in": cfg.c_in}


def _load_data(cfg: TrainConfig, data_dir: Optional[str]):
    if data_dir is None:
        return build_dataset(cfg)
    root = Path(data_dir)
    meta_path = root / "world.json"
    if not meta_path.exists():
        raise ConfigError(f"{root} has no world.json; create it with gen-data")
    meta = json.loads(meta_path.read_text())
    if meta != _world_meta(cfg):
        raise ConfigError(f"data in {root} was generated for {meta}, config asks for {_world_meta(cfg)}")
    universe = generate_world(cfg.seed, cfg.n_attrs, cfg.n_values, cfg.grid, cfg.c_in)
    gallery = [tuple(json.loads(line)["item"]) for line in (root / "gallery.jsonl").read_text().splitlines()
               if line.strip()]
    return dataset_from_records(cfg, universe, read_triplets(root / "train.jsonl"),
                                read_triplets(root / "queries.jsonl"), gallery)


def _checkpoint(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingCheckpoint(f"checkpoint {p} not found")
    return p


def write_series(log_records, out: Path) -> None:
    """Plot-ready TSV series: loss, churn and recall per epoch."""
    series = {
        "loss_curve.tsv": ("epoch", "l_bbc", "l_cons", "l_path", "l_total"),
        "churn_curve.tsv": ("epoch", "churn"),
        "recall_curve.tsv": ("epoch", "R1", "R10", "R50"),
    }
    for name, cols in series.items():
        write_tsv(log_records, out / name, cols)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    ds = build_dataset(cfg)
    write_triplets(ds.train, out / "train.jsonl")
    write_triplets(ds.queries, out / "queries.jsonl")
    (out / "gallery.jsonl").write_text("".join(json.dumps({"index": i, "item": list(g)}) + "\n"
                                               for i, g in enumerate(ds.gallery)))
    (out / "world.json").write_text(json.dumps(_world_meta(cfg), sort_keys=True) + "\n")
    _emit({"train": len(ds.train), "queries": len(ds.queries), "gallery": len(ds.gallery),
           "vocab_size": ds.universe.vocab_size, "out": str(out)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
    data = _load_data(cfg, args.data)
    _, records, ckpts = run_training(cfg, data, out_dir=out,
                                     callback=lambda tr, r: log.info("epoch %d %s", r["epoch"], json.dumps(r)))
    write_series(records, out)
    _emit({"final": records[-1], "checkpoint": str(ckpts[-1]) if ckpts else None})
    return EXIT_OK


def cmd_eval(args) -> int:
    path = _checkpoint(args.checkpoint)
    cfg, params = load_params(path)
    data = _load_data(cfg, args.data)
    recall = evaluate_recall(params, cfg, data.query_batch, data.gallery_images, data.query_targets)
    if args.out:
        (_out_dir(args) / "eval.json").write_text(json.dumps(recall, sort_keys=True) + "\n")
    _emit(recall)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import CASES, run_suite

    names = args.only or list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradcheck component(s) {unknown}; choose from {list(CASES)}")
    reports = run_suite(range(args.seeds), h=args.h, tol=args.tol, names=names)
    per_component = {}
    for (name, _), rep in reports.items():
        per_component[name] = max(per_component.get(name, 0.0), rep.max_error)
    ok = all(r.passed for r in reports.values())
    _emit({"passed": ok, "tol": args.tol, "max_rel_error": max(per_component.values()),
           "components": per_component})
    return EXIT_OK if ok else EXIT_FAILED


def cmd_trace_paths(args) -> int:
    path = _checkpoint(args.checkpoint)
    cfg, params = load_params(path)
    data = _load_data(cfg, args.data)
    split = data.query_batch if args.split == "eval" else data.train_batch
    rows = routing_records(params, cfg, split)
    out = _out_dir(args) / "traces.log"
    out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    # read back and validate the simplex invariant
    probs = np.array([json.loads(line)["probs"] for line in out.read_text().splitlines()])
    check_stochastic(probs)
    _emit({"rows": len(rows), "queries": len(split), "out": str(out)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    names = args.variants or list(ABLATIONS)
    for n in names:
        if n not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {n!r}; choose from {list(ABLATIONS)}")
    data = _load_data(cfg, args.data)
    rows = run_variants(cfg, names, out_dir=out, dataset=data)
    for name in names:
        write_series(read_metrics(out / name / "metrics.log"), out / name)
    write_tsv(rows, out / "ablation.tsv")
    _emit({"rows": rows})
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_config_flags(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", help="JSON config file with TrainConfig keys (and optionally 'preset')")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named preset applied before the config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdfn", description="Routed image-text fusion for composed retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as JSONL")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write metrics.log, checkpoints/epoch_N and curves")
    _add_config_flags(p)
    p.add_argument("--data", help="directory written by gen-data (default: generate from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@K of a checkpoint on the held-out queries")
    p.add_argument("--checkpoint", required=True, help="a checkpoints/epoch_N file")
    p.add_argument("--data", help="directory written by gen-data (default: regenerate from the checkpoint config)")
    p.add_argument("--out", help="also write eval.json here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every component at tiny dims")
    p.add_argument("--seeds", type=int, default=5, help="check seeds 0..N-1")
    p.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.add_argument("--only", action="append", help="restrict to a component (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("trace-paths", help="dump per-query routing distributions to traces.log")
    p.add_argument("--checkpoint", required=True, help="a checkpoints/epoch_N file")
    p.add_argument("--data", help="directory written by gen-data (default: regenerate from the checkpoint config)")
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace_paths)

    p = sub.add_parser("ablate", help="train the ablation grid and write ablation.tsv")
    _add_config_flags(p)
    p.add_argument("--data", help="directory written by gen-data, shared by every variant")
    p.add_argument("--variants", nargs="+", help=f"subset of {list(ABLATIONS)}")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"sdfn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        print(f"sdfn: {exc}", file=sys.stderr)
        return EXIT_NO_CHECKPOINT
    except NumericsError as exc:
        print(f"sdfn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
