"""Per-(target, alpha) training grid, its three evaluations, and result analysis."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import (
    Dataset,
    balanced_test,
    load_corpus_dir,
    make_blended_set,
    mine_hard_set,
    train_val_split,
)
from .errors import ConfigurationError, DimensionError, InputError
from .layers import AttentionWeights, Network, load_network, topk
from .sdt import SdtReport, score_topk
from .tensor import Tensor
from .tensorio import load_tensor, save_tensor
from .train import (
    encode,
    FeatureBank,
    HeadWeights,
    TrainConfig,
    TrainHistory,
    check_alpha,
    retrain_head,
    train_attention,
)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("standard", "blended", "hard")
MODEL_KINDS = ("attention", "head-retrain", "control")
RESULTS_HEADER = ["target", "alpha", "experiment", "model_kind", "hits", "misses", "fas", "crs",
                  "hit_rate", "fa_rate", "dprime", "criterion", "weight_variance", "zero_fraction",
                  "epochs", "seed", "status"]
ZERO_EPS = 1e-6


def alpha_grid(n_classes: int) -> list:
    """1/N, 2/N, 1/2, (N-1)/N, 1 with duplicates removed."""
    if n_classes < 2:
        raise ConfigurationError("need at least two classes")
    return sorted({1.0 / n_classes, 2.0 / n_classes, 0.5, (n_classes - 1) / n_classes, 1.0})


# rank statistics

def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> Optional[float]:
    """Pearson correlation of average ranks, or None when either side has no rank spread."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"spearman needs equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DimensionError("spearman needs at least two observations")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return None
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


@dataclass
class WeightStats:
    alphas: list
    variance: list
    zero_fraction: list
    adjacent_rho: list  # rho between alphas[i] and alphas[i+1]


def weight_stats(weights_by_alpha: dict, zero_eps: float = ZERO_EPS) -> WeightStats:
    """Spread and sparsity of the attention weights per alpha, plus adjacent-alpha rank correlation."""
    alphas = sorted(weights_by_alpha)
    vecs = []
    for a in alphas:
        w = weights_by_alpha[a]
        vecs.append(np.asarray(w.w if isinstance(w, AttentionWeights) else w, dtype=np.float64))
    if len({v.shape for v in vecs}) > 1:
        raise DimensionError("attention weight vectors differ in length")
    return WeightStats(
        alphas=[float(a) for a in alphas],
        variance=[float(np.var(v)) for v in vecs],
        zero_fraction=[float(np.mean(v <= zero_eps)) for v in vecs],
        adjacent_rho=[spearman(vecs[i], vecs[i + 1]) for i in range(len(vecs) - 1)],
    )


# result rows

@dataclass
class ResultRow:
    target: int
    alpha: float
    experiment: str
    model_kind: str
    hits: Optional[int] = None
    misses: Optional[int] = None
    fas: Optional[int] = None
    crs: Optional[int] = None
    hit_rate: Optional[float] = None
    fa_rate: Optional[float] = None
    dprime: Optional[float] = None
    criterion: Optional[float] = None
    weight_variance: Optional[float] = None
    zero_fraction: Optional[float] = None
    epochs: Optional[int] = None
    seed: Optional[int] = None
    status: str = "ok"

    @property
    def key(self) -> tuple:
        return (self.target, self.alpha, self.experiment, self.model_kind)

    def fill(self, report: SdtReport) -> "ResultRow":
        for name in ("hits", "misses", "fas", "crs", "hit_rate", "fa_rate", "dprime", "criterion"):
            setattr(self, name, getattr(report, name))
        return self


_INT_COLS = {"target", "hits", "misses", "fas", "crs", "epochs", "seed"}
_STR_COLS = {"experiment", "model_kind", "status"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in RESULTS_HEADER])


def read_results(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULTS_HEADER:
            raise InputError(f"unexpected results header {header}")
        for rec in reader:
            kw = {}
            for col, val in zip(header, rec):
                if col in _STR_COLS:
                    kw[col] = val
                elif val == "":
                    kw[col] = None
                elif col in _INT_COLS:
                    kw[col] = int(val)
                else:
                    kw[col] = float(val)
            rows.append(ResultRow(**kw))
    return rows


# grid configuration

@dataclass
class GridSpec:
    base: str
    data: str
    out: str = "results"
    targets: Optional[list] = None
    alphas: Optional[list] = None
    experiments: list = field(default_factory=lambda: list(EXPERIMENTS))
    include_baseline: bool = True
    include_control: bool = False
    seed: int = 0
    k: int = 1
    n_blend_pairs: int = 50
    hard_min_images: int = 5
    split_seed: Optional[int] = None
    train: dict = field(default_factory=dict)
    workers: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "GridSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown grid keys {sorted(unknown)}")
        spec = cls(**d)
        if base_dir is not None:
            for key in ("base", "data"):
                p = Path(getattr(spec, key))
                if not p.is_absolute():
                    setattr(spec, key, str((Path(base_dir) / p).resolve()))
        return spec

    @classmethod
    def from_json(cls, path) -> "GridSpec":
        return cls.from_dict(json.loads(Path(path).read_text()), base_dir=Path(path).parent)

    def resolve(self, n_classes: int) -> "GridSpec":
        spec = GridSpec(**asdict(self))
        if spec.targets is None:
            spec.targets = list(range(n_classes))
        if spec.alphas is None:
            spec.alphas = alpha_grid(n_classes)
        spec.targets = [int(t) for t in spec.targets]
        spec.alphas = sorted(float(a) for a in spec.alphas)
        if len(set(spec.targets)) != len(spec.targets):
            raise ConfigurationError("targets must be distinct")
        for t in spec.targets:
            if not 0 <= t < n_classes:
                raise ConfigurationError(f"target {t} outside [0, {n_classes})")
        for a in spec.alphas:
            check_alpha(a, n_classes)
        bad = set(spec.experiments) - set(EXPERIMENTS)
        if bad:
            raise ConfigurationError(f"unknown experiments {sorted(bad)}")
        spec.experiments = [e for e in EXPERIMENTS if e in spec.experiments]
        if not 1 <= spec.k <= n_classes:
            raise ConfigurationError(f"k={spec.k} outside [1, {n_classes}]")
        TrainConfig.from_dict({"alpha": 1.0, "target": [0], **spec.train}).validate(n_classes)
        return spec


def cell_seed(grid_seed: int, target: int, alpha: float) -> int:
    ss = np.random.SeedSequence([int(grid_seed), int(target), int(round(alpha * 1_000_000_000))])
    return int(ss.generate_state(1)[0])


def alpha_dirname(alpha: float) -> str:
    return repr(float(alpha))


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_tree(path) -> dict:
    path = Path(path)
    if path.is_file():
        return {path.name: git_blob_hash(path)}
    return {str(p.relative_to(path)): git_blob_hash(p) for p in sorted(path.rglob("*")) if p.is_file()}


# evaluation sets and the grid context

@dataclass
class EvalSet:
    experiment: str
    target: int
    truths: list
    prefix: np.ndarray  # attention-slot activations of the frozen base
    penult: Optional[np.ndarray] = None
    excluded: str = ""


class GridContext:
    """Everything the grid shares read-only: frozen base, training features, evaluation sets."""

    def __init__(self, spec: GridSpec, base: Network, splits: dict):
        self.base = base.freeze()
        self.N = base.config.n_classes
        self.spec = spec.resolve(self.N)
        split_seed = spec.split_seed if spec.split_seed is not None else base.lineage.get("split_seed", spec.seed)
        self.train, self.val = train_val_split(splits["train"], 0.9, seed=int(split_seed))
        self.test = splits["test"]
        self.pool = splits.get("pool", splits["test"])
        self._banks: dict = {}
        self._evals: dict = {}
        self._hard: Optional[Dataset] = None

    @classmethod
    def from_spec(cls, spec: GridSpec) -> "GridContext":
        if not (Path(spec.base) / "manifest.json").exists():
            raise ConfigurationError(f"no pretrained base checkpoint at {spec.base}")
        return cls(spec, load_network(spec.base), load_corpus_dir(spec.data))

    def bank(self, kind: str) -> FeatureBank:
        if kind not in self._banks:
            logger.info("encoding training features (%s)", kind)
            self._banks[kind] = FeatureBank.build(self.base, self.train, self.val, kind)
        return self._banks[kind]

    @property
    def hard_pool(self) -> Dataset:
        if self._hard is None:
            self._hard = mine_hard_set(self.base, self.pool, self.spec.k)
            logger.info("mined %d hard images from %d", len(self._hard), len(self.pool))
        return self._hard

    def eval_set(self, experiment: str, target: int) -> EvalSet:
        key = (experiment, target)
        if key in self._evals:
            return self._evals[key]
        seed = self.spec.seed
        excluded = ""
        if experiment == "standard":
            ds = balanced_test(self.test, target, seed)
            images, truths = ds.images, ds.labels.tolist()
        elif experiment == "blended":
            bs = make_blended_set(self.test, target, self.spec.n_blend_pairs, seed)
            images, truths = bs.images, [tuple(p) for p in bs.label_pairs.tolist()]
        else:
            hard = self.hard_pool
            n_t = int(np.sum(hard.labels == target))
            if n_t == 0:
                ev = EvalSet(experiment, target, [], np.zeros((0,)), None, "excluded: no mined images")
                self._evals[key] = ev
                return ev
            if n_t < self.spec.hard_min_images:
                excluded = f"excluded: {n_t} mined images < {self.spec.hard_min_images}"
            ds = balanced_test(hard, target, seed)
            images, truths = ds.images, ds.labels.tolist()
        feats = encode(self.base, images)
        penult = None
        if self.spec.include_baseline or self.spec.include_control:
            penult = self.base.penultimate_from(Tensor(feats)).data
        ev = EvalSet(experiment, target, truths, feats, penult, excluded)
        self._evals[key] = ev
        return ev

    def cell_config(self, target: int, alpha: float) -> TrainConfig:
        return TrainConfig.from_dict({**self.spec.train, "alpha": alpha, "target": [target],
                                      "seed": cell_seed(self.spec.seed, target, alpha)})


def _cell_dir(out: Path, target: int, alpha: float) -> Path:
    return Path(out) / "weights" / str(target) / alpha_dirname(alpha)


def _atomic_tensor(path: Path, value) -> None:
    tmp = path.with_suffix(".tmp")
    save_tensor(tmp, value)
    os.replace(tmp, path)


def train_cell(ctx: GridContext, target: int, alpha: float, out) -> dict:
    """Train (or reuse persisted) attention and head weights for one grid cell."""
    d = _cell_dir(out, target, alpha)
    d.mkdir(parents=True, exist_ok=True)
    cfg = ctx.cell_config(target, alpha)
    info = {"target": target, "alpha": alpha, "seed": cfg.seed}
    if (d / "attn.ggtn").exists() and (d / "attn_summary.json").exists():
        info["attn_epochs"] = json.loads((d / "attn_summary.json").read_text())["epochs"]
        info["attn_reused"] = True
    else:
        attn, hist = train_attention(ctx.base, cfg, bank=ctx.bank("prefix"))
        hist.write_csv(d / "attn_history.csv")
        hist.write_summary(d / "attn_summary.json")
        _atomic_tensor(d / "attn.ggtn", attn.w)
        info["attn_epochs"] = hist.epochs
    if ctx.spec.include_baseline:
        if (d / "head_weight.ggtn").exists() and (d / "head_bias.ggtn").exists() \
                and (d / "head_summary.json").exists():
            info["head_epochs"] = json.loads((d / "head_summary.json").read_text())["epochs"]
        else:
            head, hist = retrain_head(ctx.base, cfg, bank=ctx.bank("penultimate"))
            hist.write_csv(d / "head_history.csv")
            hist.write_summary(d / "head_summary.json")
            _atomic_tensor(d / "head_bias.ggtn", head.bias)
            _atomic_tensor(d / "head_weight.ggtn", head.weight)
            info["head_epochs"] = hist.epochs
    return info


def load_cell_weights(out, target: int, alpha: float) -> tuple:
    d = _cell_dir(out, target, alpha)
    attn = AttentionWeights(load_tensor(d / "attn.ggtn").data, (target,), alpha)
    head = None
    if (d / "head_weight.ggtn").exists():
        head = HeadWeights(load_tensor(d / "head_weight.ggtn").data, load_tensor(d / "head_bias.ggtn").data)
    return attn, head


def _predict(ctx: GridContext, ev: EvalSet, kind: str, attn=None, head=None) -> np.ndarray:
    if kind == "attention":
        logits = ctx.base.suffix(Tensor(ev.prefix), attn).data
    elif kind == "head-retrain":
        logits = ev.penult @ head.weight + head.bias
    else:
        logits = ctx.base.head_from(Tensor(ev.penult)).data
    return topk(logits, ctx.spec.k)


def evaluate_cell(ctx: GridContext, target: int, alpha: float, out, info: dict) -> list:
    attn, head = load_cell_weights(out, target, alpha)
    w = attn.w.astype(np.float64)
    wvar, zfrac = float(np.var(w)), float(np.mean(w <= ZERO_EPS))
    rows = []
    for exp in ctx.spec.experiments:
        ev = ctx.eval_set(exp, target)
        kinds = ["attention"] + (["head-retrain"] if ctx.spec.include_baseline else [])
        for kind in kinds:
            row = ResultRow(target, alpha, exp, kind, seed=info["seed"],
                            epochs=info["attn_epochs"] if kind == "attention" else info.get("head_epochs"))
            if kind == "attention":
                row.weight_variance, row.zero_fraction = wvar, zfrac
            if not ev.truths:
                row.status = ev.excluded
            else:
                row.fill(score_topk(_predict(ctx, ev, kind, attn, head), ev.truths, target, ctx.spec.k))
                row.status = ev.excluded or "ok"
            rows.append(row)
    return rows


def control_rows(ctx: GridContext, target: int) -> list:
    """The unmodulated base network on each evaluation set (alpha recorded as 1/N)."""
    rows = []
    for exp in ctx.spec.experiments:
        ev = ctx.eval_set(exp, target)
        row = ResultRow(target, 1.0 / ctx.N, exp, "control", seed=ctx.spec.seed)
        if ev.truths:
            row.fill(score_topk(_predict(ctx, ev, "control"), ev.truths, target, ctx.spec.k))
        row.status = ev.excluded or "ok"
        rows.append(row)
    return rows


def _error_rows(ctx: GridContext, target: int, alpha: float, message: str) -> list:
    kinds = ["attention"] + (["head-retrain"] if ctx.spec.include_baseline else [])
    msg = "error: " + " ".join(message.split())[:200]
    return [ResultRow(target, alpha, exp, kind, seed=cell_seed(ctx.spec.seed, target, alpha), status=msg)
            for exp in ctx.spec.experiments for kind in kinds]


_WORKER_CTX: Optional[GridContext] = None


def _worker_train(args):
    target, alpha, out = args
    try:
        return train_cell(_WORKER_CTX, target, alpha, out), None
    except Exception as exc:  # one failing cell must not abort the grid
        return {"target": target, "alpha": alpha}, f"{type(exc).__name__}: {exc}"


def worker_count(spec: GridSpec) -> int:
    env = os.environ.get("GOALGAZE_THREADS")
    if env:
        return max(1, int(env))
    if spec.workers:
        return max(1, int(spec.workers))
    return os.cpu_count() or 1


def run_grid(spec: GridSpec, ctx: Optional[GridContext] = None,
             on_cell_done: Optional[Callable] = None) -> list:
    """Train every (target, alpha) cell once, evaluate it on every experiment, persist results.

    Cells whose weights already exist under ``out/weights`` are not
    retrained. ``on_cell_done(info)`` is called after each cell is persisted.
    """
    global _WORKER_CTX
    ctx = ctx or GridContext.from_spec(spec)
    spec = ctx.spec
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(t, a, str(out)) for t in spec.targets for a in spec.alphas]
    # build shared features before any fork so workers inherit them
    ctx.bank("prefix")
    if spec.include_baseline:
        ctx.bank("penultimate")
    _WORKER_CTX = ctx
    results: dict = {}
    n_workers = min(worker_count(spec), len(jobs))
    if n_workers > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(n_workers, mp_context=mp.get_context("fork")) as pool:
            for (t, a, _), res in zip(jobs, pool.map(_worker_train, jobs)):
                results[(t, a)] = res
                if on_cell_done:
                    on_cell_done(res[0])
    else:
        for job in jobs:
            res = _worker_train(job)
            results[job[:2]] = res
            logger.info("cell target=%d alpha=%s done%s", job[0], job[1], f" ({res[1]})" if res[1] else "")
            if on_cell_done:
                on_cell_done(res[0])
    rows = []
    wstats = {}
    for t in spec.targets:
        if spec.include_control:
            rows.extend(control_rows(ctx, t))
        per_alpha = {}
        for a in spec.alphas:
            info, err = results[(t, a)]
            if err:
                rows.extend(_error_rows(ctx, t, a, err))
                continue
            try:
                rows.extend(evaluate_cell(ctx, t, a, out, info))
                per_alpha[a] = load_cell_weights(out, t, a)[0]
            except Exception as exc:
                rows.extend(_error_rows(ctx, t, a, f"{type(exc).__name__}: {exc}"))
        if len(per_alpha) >= 2:
            wstats[t] = asdict(weight_stats(per_alpha))
    write_results(out / "results.csv", rows)
    write_weight_stats(out / "weight_stats.json", wstats)
    write_manifest(out / "grid_manifest.json", spec, ctx)
    return rows


def write_weight_stats(path, per_target: dict) -> None:
    summary = {"per_target": {str(t): s for t, s in per_target.items()}}
    if per_target:
        stats = list(per_target.values())
        n_rho = min(len(s["adjacent_rho"]) for s in stats)
        rho_mean = []
        for i in range(n_rho):
            vals = [s["adjacent_rho"][i] for s in stats if s["adjacent_rho"][i] is not None]
            rho_mean.append(float(np.mean(vals)) if vals else None)
        summary["mean_adjacent_rho"] = rho_mean
        summary["alphas"] = stats[0]["alphas"]
        summary["mean_variance"] = [float(np.mean([s["variance"][i] for s in stats])) for i in range(len(stats[0]["alphas"]))]
        summary["mean_zero_fraction"] = [float(np.mean([s["zero_fraction"][i] for s in stats]))
                                         for i in range(len(stats[0]["alphas"]))]
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")


def write_manifest(path, spec: GridSpec, ctx: GridContext) -> None:
    from . import __version__

    manifest = {
        "spec": asdict(spec),
        "cell_seeds": {f"{t}/{alpha_dirname(a)}": cell_seed(spec.seed, t, a)
                       for t in spec.targets for a in spec.alphas},
        "inputs": {"base": hash_tree(spec.base), "data": hash_tree(spec.data)},
        "hard_pool_size": len(ctx._hard) if ctx._hard is not None else None,
        "version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# analysis

def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def monotone_check(seq, increasing: bool = True, tol: float = 0.02, max_violations: int = 1) -> dict:
    """At most ``max_violations`` adjacent steps against the trend, each no larger than ``tol``."""
    steps = [b - a for a, b in zip(seq, seq[1:])]
    against = [-s if increasing else s for s in steps]
    bad = [x for x in against if x > 0]
    ok = len(bad) <= max_violations and all(x <= tol for x in bad)
    return {"pass": bool(ok), "violations": len(bad), "largest": max(bad) if bad else 0.0}


def interior_peak_check(seq) -> dict:
    if len(seq) < 3:
        return {"pass": False, "reason": "fewer than three alphas"}
    best = int(np.argmax(seq[1:-1])) + 1
    ok = seq[best] > seq[0] and seq[best] > seq[-1]
    return {"pass": bool(ok), "best_index": best}


def trend_summary(rows, experiment: str) -> dict:
    sel = [r for r in rows if r.experiment == experiment and r.model_kind == "attention" and r.status == "ok"]
    alphas = sorted({r.alpha for r in sel})
    out = {"alphas": alphas, "n_targets": [], "mean_hit_rate": [], "mean_fa_rate": [],
           "mean_dprime": [], "mean_criterion": []}
    for a in alphas:
        at = [r for r in sel if r.alpha == a]
        out["n_targets"].append(len(at))
        for col in ("hit_rate", "fa_rate", "dprime", "criterion"):
            out[f"mean_{col}"].append(_mean([getattr(r, col) for r in at]))
    if len(alphas) >= 2:
        checks = {
            "hit_rate_nondecreasing": monotone_check(out["mean_hit_rate"], True),
            "criterion_nonincreasing": monotone_check(out["mean_criterion"], False),
        }
        if experiment != "hard":
            checks["fa_rate_nondecreasing"] = monotone_check(out["mean_fa_rate"], True)
            checks["dprime_interior_peak"] = interior_peak_check(out["mean_dprime"])
        out["checks"] = checks
        out["all_pass"] = all(c["pass"] for c in checks.values())
    return out


def compare_baseline(rows, alpha: float = 0.5) -> dict:
    """Attention minus head-retrain d' and criterion per experiment at one alpha."""
    by_key = {r.key: r for r in rows if r.status == "ok"}
    experiments = [e for e in EXPERIMENTS if any(r.experiment == e for r in rows)]
    gaps, table = [], {}
    for exp in experiments:
        targets = sorted({r.target for r in rows if r.experiment == exp and math.isclose(r.alpha, alpha)
                          and r.model_kind in ("attention", "head-retrain")})
        per_target = []
        for t in targets:
            ka = next((k for k in by_key if k[0] == t and k[2] == exp and k[3] == "attention"
                       and math.isclose(k[1], alpha)), None)
            kh = next((k for k in by_key if k[0] == t and k[2] == exp and k[3] == "head-retrain"
                       and math.isclose(k[1], alpha)), None)
            if ka is None or kh is None:
                if not any(r.target == t and r.experiment == exp and r.status.startswith("excluded")
                           for r in rows):
                    gaps.append(f"{exp}/target={t}/{'attention' if ka is None else 'head-retrain'}")
                continue
            a, h = by_key[ka], by_key[kh]
            per_target.append({"target": t, "dprime_attention": a.dprime, "dprime_head": h.dprime,
                               "delta_dprime": a.dprime - h.dprime,
                               "criterion_attention": a.criterion, "criterion_head": h.criterion,
                               "delta_criterion": a.criterion - h.criterion})
        if not per_target:
            gaps.append(f"{exp}: no complete attention/head-retrain pairs at alpha={alpha}")
            continue
        md = float(np.mean([p["delta_dprime"] for p in per_target]))
        mc = float(np.mean([p["delta_criterion"] for p in per_target]))
        table[exp] = {"mean_delta_dprime": md, "mean_delta_criterion": mc, "n_targets": len(per_target),
                      "attention_higher_dprime": md > 0, "attention_lower_criterion": mc < 0,
                      "per_target": per_target}
    if gaps:
        raise InputError("missing counterpart rows: " + "; ".join(gaps))
    return {"alpha": alpha, "experiments": table,
            "reference_direction": "attention model has higher d' and lower criterion than head retraining"}


def analyze(rows, weight_summary: Optional[dict] = None) -> dict:
    experiments = [e for e in EXPERIMENTS if any(r.experiment == e for r in rows)]
    summary = {"n_rows": len(rows),
               "n_errors": sum(r.status.startswith("error") for r in rows),
               "experiments": {e: trend_summary(rows, e) for e in experiments}}
    std = [r for r in rows if r.model_kind == "attention" and r.status == "ok"
           and r.experiment == (experiments[0] if experiments else "")]
    alphas = sorted({r.alpha for r in std})
    if alphas:
        mv = [_mean([r.weight_variance for r in std if r.alpha == a]) for a in alphas]
        mz = [_mean([r.zero_fraction for r in std if r.alpha == a]) for a in alphas]
        summary["weights"] = {"alphas": alphas, "mean_variance": mv, "mean_zero_fraction": mz,
                              "variance_grows": bool(mv[-1] > mv[0]),
                              "zero_fraction_grows": bool(mz[-1] > mz[0])}
    if weight_summary and "mean_adjacent_rho" in weight_summary:
        summary.setdefault("weights", {})["mean_adjacent_rho"] = weight_summary["mean_adjacent_rho"]
    has_head = any(r.model_kind == "head-retrain" for r in rows)
    if has_head and any(math.isclose(r.alpha, 0.5) for r in rows):
        try:
            summary["baseline"] = compare_baseline(rows, 0.5)
        except InputError as exc:
            summary["baseline"] = {"error": str(exc)}
    return summary


def write_comparison_csv(path, comparison: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "target", "dprime_attention", "dprime_head", "delta_dprime",
                    "criterion_attention", "criterion_head", "delta_criterion"])
        for exp, block in comparison.get("experiments", {}).items():
            for p in block["per_target"]:
                w.writerow([exp, p["target"]] + [repr(p[c]) for c in
                           ("dprime_attention", "dprime_head", "delta_dprime",
                            "criterion_attention", "criterion_head", "delta_criterion")])
