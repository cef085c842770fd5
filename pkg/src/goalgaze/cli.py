"""``goalgaze`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Progress goes to
stderr; machine-readable output goes to files under ``--out`` and, for
``eval`` and ``analyze``, a JSON document on stdout.

Settings are resolved as built-in defaults, then the ``--config`` JSON file,
then explicit flags (flags win).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigurationError, GoalgazeError

logger = logging.getLogger("goalgaze")

PRETRAIN_DEFAULTS = {"n_per_class": 300, "test_per_class": 100, "pool_per_class": 300,
                     "pool_hard": 0.5, "lr": 1e-3, "batch_size": 32, "n_classes": 10}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _write_run_manifest(out: Path, verb: str, cfg: dict, inputs: dict) -> None:
    from .experiment import hash_tree

    manifest = {"verb": verb, "version": __version__, "config": cfg, "config_hash": _config_hash(cfg),
                "inputs": {k: hash_tree(v) for k, v in inputs.items() if v is not None and Path(v).exists()},
                "input_paths": {k: str(v) for k, v in inputs.items()}}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    cfg = json.loads(p.read_text())
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config {p} must hold a JSON object")
    return cfg


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} {p} not found")
    return p


def _require_checkpoint(path) -> Path:
    p = _require_dir(path, "base checkpoint")
    if not (p / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest under {p}")
    return p


def _base_data_dir(base: Path, explicit: Optional[str]) -> Path:
    """Corpus used for a base network: explicit flag, then the path recorded at pretraining."""
    if explicit:
        return _require_dir(explicit, "corpus directory")
    lineage = json.loads((base / "manifest.json").read_text()).get("seed_lineage", {})
    for cand in (lineage.get("data"), base / "data"):
        if cand and Path(cand).is_dir():
            return Path(cand)
    raise FileNotFoundError(f"no corpus recorded for base {base}; pass --data")


# verbs

def cmd_pretrain(args) -> int:
    from .data import gen_synthetic, load_corpus_dir, write_corpus_dir, train_val_split
    from .layers import build_minivgg, save_network
    from .train import evaluate_accuracy, pretrain

    cfg = {**PRETRAIN_DEFAULTS, **_load_config(args.config)}
    unknown = set(cfg) - set(PRETRAIN_DEFAULTS) - {"epochs", "seed", "widths", "hidden", "convs_per_block",
                                                   "attention_slot", "test_per_class"}
    if unknown:
        raise UsageError(f"unknown pretrain config keys {sorted(unknown)}")
    for key in ("epochs", "seed", "lr", "batch_size", "n_per_class"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    cfg.setdefault("epochs", 30)
    cfg.setdefault("seed", 0)
    if cfg["epochs"] < 1:
        raise UsageError("--epochs must be >= 1")
    synthetic = args.data == "synthetic"
    if not synthetic:
        _require_dir(args.data, "corpus directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if synthetic:
        n, s = int(cfg["n_classes"]), int(cfg["seed"])
        logger.info("generating synthetic corpus (%d classes)", n)
        splits = {"train": gen_synthetic(s * 3 + 1, n, int(cfg["n_per_class"]), "train"),
                  "test": gen_synthetic(s * 3 + 2, n, int(cfg["test_per_class"]), "test"),
                  "pool": gen_synthetic(s * 3 + 3, n, int(cfg["pool_per_class"]), "pool",
                                        hard=float(cfg["pool_hard"]))}
        data_dir = write_corpus_dir(out / "data", splits)
    else:
        data_dir = Path(args.data)
        splits = load_corpus_dir(data_dir)
    train, val = train_val_split(splits["train"], 0.9, seed=int(cfg["seed"]))
    arch = {k: cfg[k] for k in ("widths", "hidden", "convs_per_block", "attention_slot") if k in cfg}
    net = build_minivgg(train.n_classes, seed=int(cfg["seed"]), **arch)
    net.lineage.update({"data": str(data_dir.resolve()), "split_seed": int(cfg["seed"])})
    hist = pretrain(net, train, val, int(cfg["epochs"]), seed=int(cfg["seed"]), lr=float(cfg["lr"]),
                    batch_size=int(cfg["batch_size"]))
    save_network(net, out)
    hist.write_csv(out / "history.csv")
    summary = {**hist.summary(), "val_top1": evaluate_accuracy(net, val), "test_top1": evaluate_accuracy(net, splits["test"])}
    logger.info("held-out top-1 %.4f", summary["test_top1"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_run_manifest(out, "pretrain", cfg, {"data": data_dir})
    logger.info("base checkpoint written to %s", out)
    return 0


def _train_common(args, kind: str) -> int:
    from .data import load_corpus_dir, train_val_split
    from .layers import load_network
    from .tensorio import save_tensor
    from .train import TrainConfig, retrain_head, train_attention

    base_dir = _require_checkpoint(args.base)
    raw = _load_config(args.config)
    if args.target is not None:
        raw["target"] = args.target
    if args.alpha is not None:
        raw["alpha"] = args.alpha
    if "alpha" not in raw or "target" not in raw:
        raise UsageError("--target and --alpha are required (flag or config key)")
    data_dir = _base_data_dir(base_dir, args.data)
    base = load_network(base_dir).freeze()
    try:
        cfg = TrainConfig.from_dict(raw).validate(base.config.n_classes)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    splits = load_corpus_dir(data_dir)
    split_seed = int(base.lineage.get("split_seed", 0))
    train, val = train_val_split(splits["train"], 0.9, seed=split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "attention":
        attn, hist = train_attention(base, cfg, train, val)
        save_tensor(out / "attn.ggtn", attn.w)
    else:
        head, hist = retrain_head(base, cfg, train, val)
        save_tensor(out / "head_weight.ggtn", head.weight)
        save_tensor(out / "head_bias.ggtn", head.bias)
    hist.write_csv(out / "history.csv")
    hist.write_summary(out / "summary.json")
    meta = {"kind": kind, "base": str(base_dir.resolve()), "data": str(data_dir.resolve()), **cfg.to_dict()}
    (out / "weights.json").write_text(json.dumps(meta, indent=2) + "\n")
    _write_run_manifest(out, "train-attn" if kind == "attention" else "retrain-fc", cfg.to_dict(),
                        {"base": base_dir, "data": data_dir})
    logger.info("%s weights written to %s (%d epochs, %s)", kind, out, hist.epochs, hist.stop_reason)
    return 0


def cmd_train_attn(args) -> int:
    return _train_common(args, "attention")


def cmd_retrain_fc(args) -> int:
    return _train_common(args, "head-retrain")


def cmd_eval(args) -> int:
    from .data import balanced_test, load_corpus_dir, make_blended_set, mine_hard_set
    from .layers import AttentionWeights, load_network, topk
    from .sdt import score_topk
    from .tensorio import load_tensor
    from .train import HeadWeights, with_head

    wdir = _require_dir(args.weights, "weights directory")
    if not (wdir / "weights.json").exists():
        raise FileNotFoundError(f"no weights.json under {wdir}")
    meta = json.loads((wdir / "weights.json").read_text())
    base = load_network(_require_checkpoint(meta["base"])).freeze()
    k = args.k
    if not 1 <= k <= base.config.n_classes:
        raise UsageError(f"--k must lie in [1, {base.config.n_classes}]")
    target = int(meta["target"][0])
    splits = load_corpus_dir(_base_data_dir(Path(meta["base"]), meta.get("data")))
    if args.set == "standard":
        ds = balanced_test(splits["test"], target, args.seed)
        images, truths = ds.images, ds.labels.tolist()
    elif args.set == "blended":
        bs = make_blended_set(splits["test"], target, args.n_pairs, args.seed)
        images, truths = bs.images, [tuple(p) for p in bs.label_pairs.tolist()]
    else:
        hard = mine_hard_set(base, splits.get("pool", splits["test"]), k)
        ds = balanced_test(hard, target, args.seed)
        images, truths = ds.images, ds.labels.tolist()
    if meta["kind"] == "attention":
        base.attention = AttentionWeights(load_tensor(wdir / "attn.ggtn").data, meta["target"], meta["alpha"])
        net = base
    else:
        net = with_head(base, HeadWeights(load_tensor(wdir / "head_weight.ggtn").data,
                                          load_tensor(wdir / "head_bias.ggtn").data))
    preds = np.concatenate([topk(net.forward(images[s:s + 200]), k) for s in range(0, len(images), 200)])
    report = score_topk(preds, truths, target, k)
    result = {"set": args.set, "target": target, "alpha": meta["alpha"], "model_kind": meta["kind"],
              "n_images": len(truths), **report.as_dict()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.set}.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
    return 0


def cmd_blend(args) -> int:
    from .data import load_corpus_dir, make_blended_set, save_blended

    splits = load_corpus_dir(_require_dir(args.data, "corpus directory"))
    test = splits["test"]
    if not 0 <= args.target < test.n_classes:
        raise UsageError(f"--target must lie in [0, {test.n_classes})")
    bset = make_blended_set(test, args.target, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_blended(out / f"blended_t{args.target}.bin", bset)
    logger.info("wrote %d blended images to %s", len(bset.images), out)
    return 0


def cmd_mine_hard(args) -> int:
    from .data import load_corpus_dir, mine_hard_set, save_dataset
    from .layers import load_network

    base = load_network(_require_checkpoint(args.base)).freeze()
    splits = load_corpus_dir(_require_dir(args.data, "corpus directory"))
    if not 1 <= args.k <= base.config.n_classes:
        raise UsageError(f"--k must lie in [1, {base.config.n_classes}]")
    pool = splits.get("pool", splits["test"])
    hard = mine_hard_set(base, pool, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = np.bincount(hard.labels, minlength=hard.n_classes).tolist()
    save_dataset(out / "hard.bin", hard, k=args.k, pool_size=len(pool), per_class=counts)
    logger.info("mined %d of %d pool images (per class %s)", len(hard), len(pool), counts)
    return 0


def cmd_run_grid(args) -> int:
    from .experiment import GridSpec, run_grid

    spec = GridSpec.from_json(args.config) if Path(args.config).is_file() else None
    if spec is None:
        raise FileNotFoundError(f"grid config {args.config} not found")
    if args.out:
        spec.out = args.out
    _require_checkpoint(spec.base)
    _require_dir(spec.data, "corpus directory")
    rows = run_grid(spec, on_cell_done=lambda info: logger.info("cell %s", info))
    failed = sum(r.status.startswith("error") for r in rows)
    logger.info("%d rows written to %s (%d error rows)", len(rows), Path(spec.out) / "results.csv", failed)
    return 0


def cmd_analyze(args) -> int:
    from .experiment import analyze, read_results, write_comparison_csv

    res = Path(args.results)
    if not res.is_file():
        raise FileNotFoundError(f"results file {res} not found")
    rows = read_results(res)
    ws_path = res.parent / "weight_stats.json"
    wsum = json.loads(ws_path.read_text()) if ws_path.exists() else None
    summary = analyze(rows, wsum)
    out = Path(args.out) if args.out else res.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "trends.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "alpha", "n_targets", "mean_hit_rate", "mean_fa_rate",
                    "mean_dprime", "mean_criterion"])
        for exp, block in summary["experiments"].items():
            for i, a in enumerate(block["alphas"]):
                w.writerow([exp, repr(a), block["n_targets"][i]] +
                           [repr(block[c][i]) for c in ("mean_hit_rate", "mean_fa_rate",
                                                        "mean_dprime", "mean_criterion")])
    if isinstance(summary.get("baseline"), dict) and "experiments" in summary["baseline"]:
        write_comparison_csv(out / "comparison.csv", summary["baseline"])
        for exp, block in summary["baseline"]["experiments"].items():
            logger.info("%s: mean delta d' %.4f (attention %s)", exp, block["mean_delta_dprime"],
                        "higher" if block["attention_higher_dprime"] else "not higher")
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="goalgaze", description="Goal-directed attention training and signal-detection evaluation.")
    p.add_argument("--version", action="version", version=f"goalgaze {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on stderr")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser, metavar="VERB")

    s = sub.add_parser("pretrain", help="train the base network (use --data synthetic to generate a corpus)")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--n-per-class", dest="n_per_class", type=int)
    s.set_defaults(func=cmd_pretrain)

    for verb, func, what in (("train-attn", cmd_train_attn, "attention weights"),
                             ("retrain-fc", cmd_retrain_fc, "the final dense layer")):
        s = sub.add_parser(verb, help=f"train {what} for one target and alpha on a frozen base")
        s.add_argument("--base", required=True)
        s.add_argument("--target", type=int, nargs="+")
        s.add_argument("--alpha", type=float)
        s.add_argument("--config")
        s.add_argument("--data")
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score trained weights on one evaluation set")
    s.add_argument("--weights", required=True)
    s.add_argument("--set", required=True, choices=("standard", "blended", "hard"))
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-pairs", dest="n_pairs", type=int, default=50)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("blend", help="build a blended evaluation set for one target")
    s.add_argument("--data", required=True)
    s.add_argument("--target", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_blend)

    s = sub.add_parser("mine-hard", help="collect pool images the base network gets wrong")
    s.add_argument("--base", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mine_hard)

    s = sub.add_parser("run-grid", help="train and evaluate every (target, alpha) cell")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_run_grid)

    s = sub.add_parser("analyze", help="trend checks, weight statistics and baseline comparison")
    s.add_argument("--results", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
        if args.verb is None:
            raise UsageError(parser.format_help().rstrip() + "\ngoalgaze: error: no verb given")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(message)s",
                        force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    except (GoalgazeError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "verb": args.verb}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
