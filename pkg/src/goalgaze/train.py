"""Target-weighted objective, epoch subsampling, Adam, early stopping, and trainers.

Two trainers share one loop: :func:`train_attention` learns the filter-wise
gains of a frozen network; :func:`retrain_head` instead relearns the final
dense layer of the same frozen network under the identical loss.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import Dataset, augment, ceil_count, channel_stats
from .errors import ConfigurationError, ConstraintError, DimensionError, InputError
from .layers import AttentionWeights, Network, project_nonneg
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float
    target: tuple = (0,)
    lr: float = 3e-4
    batch_size: int = 16
    nontarget_fraction: float = 1.0
    max_epochs: int = 200
    stop_rel_improve: float = 1e-3
    stop_consecutive: int = 2
    check_stride_epochs: int = 2
    seed: int = 0

    def __post_init__(self):
        self.target = tuple(sorted({int(t) for t in np.atleast_1d(self.target)}))
        self.alpha = float(self.alpha)

    def validate(self, n_classes: int) -> "TrainConfig":
        if not self.target:
            raise ConfigurationError("target set is empty")
        if not 1 <= len(self.target) < n_classes or min(self.target) < 0 or max(self.target) >= n_classes:
            raise ConfigurationError(f"target {self.target} invalid for {n_classes} classes")
        check_alpha(self.alpha, n_classes)
        if not 0 < self.nontarget_fraction <= 1:
            raise ConfigurationError("nontarget_fraction must lie in (0, 1]")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("lr, batch_size and max_epochs must be positive")
        if self.stop_rel_improve < 0 or self.stop_consecutive < 1 or self.check_stride_epochs < 1:
            raise ConfigurationError("invalid early-stopping settings")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = list(self.target)
        return d


def check_alpha(alpha: float, n_classes: int) -> None:
    # 1/N compared with a relative slack so that 0.1 passes for N=10
    if not (1.0 / n_classes) * (1 - 1e-12) <= alpha <= 1.0:
        raise ConfigurationError(f"alpha={alpha} outside [1/{n_classes}, 1]")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)  # None on non-check epochs
    stop_reason: str = ""
    wall_time_s: float = 0.0
    seed: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def checks(self) -> list:
        return [v for v in self.val_loss if v is not None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([e, repr(tl), "" if vl is None else repr(vl)])

    def summary(self) -> dict:
        return {"stop_reason": self.stop_reason, "epochs": self.epochs,
                "wall_time_s": self.wall_time_s, "seed": self.seed}

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")

    @classmethod
    def read(cls, csv_path, summary_path=None) -> "TrainHistory":
        h = cls()
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.train_loss.append(float(row["train_loss"]))
                h.val_loss.append(float(row["val_loss"]) if row["val_loss"] else None)
        if summary_path is not None and Path(summary_path).exists():
            s = json.loads(Path(summary_path).read_text())
            h.stop_reason, h.wall_time_s, h.seed = s["stop_reason"], s["wall_time_s"], s["seed"]
        return h


# the weighted objective

def example_weight(label: int, target, alpha: float, n_classes: int) -> float:
    """Loss weight of one example: alpha on target classes, the remainder shared by the rest."""
    target = tuple(np.atleast_1d(target).tolist())
    check_alpha(alpha, n_classes)
    if not 1 <= len(target) < n_classes:
        raise ConfigurationError(f"target set of size {len(target)} invalid for {n_classes} classes")
    if not 0 <= label < n_classes:
        raise IndexError(f"label {label} outside [0, {n_classes})")
    if label in target:
        return alpha
    return (1.0 - alpha) / (n_classes - len(target))


def example_weights(labels, target, alpha: float, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    target = np.atleast_1d(target)
    on = example_weight(int(target[0]), target, alpha, n_classes)
    off = (1.0 - alpha) / (n_classes - target.size)
    return np.where(np.isin(labels, target), on, off)


def inclusion_factors(labels, target, fraction: float, n_classes: int) -> np.ndarray:
    """Inverse inclusion probability of each example under :func:`subsample_epoch`.

    For a non-target class with n images, ceil(fraction*n) are drawn each
    epoch, so each image carries n / ceil(fraction*n) (= 1/fraction whenever
    fraction*n is whole). Target images are always drawn.
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    factor = np.ones(n_classes)
    for c in range(n_classes):
        if c not in set(np.atleast_1d(target).tolist()) and counts[c]:
            factor[c] = counts[c] / ceil_count(fraction, counts[c])
    return factor[labels]


def _logits_of(model, images) -> np.ndarray:
    out = model(images)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def _xent(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return T.softmax_xent(Tensor(logits), labels).data


def eq1_loss(logits: np.ndarray, labels, target, alpha: float, n_classes: int) -> float:
    """Mean over examples of weight * cross-entropy, no subsampling correction."""
    labels = np.asarray(labels)
    w = example_weights(labels, target, alpha, n_classes)
    return float(np.mean(w * _xent(np.asarray(logits, dtype=np.float64), labels)))


def weighted_epoch_loss(model: Callable, data: Dataset, indices, cfg: TrainConfig,
                        batch_size: int = 256) -> float:
    """Loss of one epoch drawn by :func:`subsample_epoch`.

    Sum over the drawn examples of weight * inclusion factor * CE, divided by
    the size of the full dataset, so that averaging over draws recovers the
    full-data weighted loss.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ConfigurationError("empty example stream")
    N = data.n_classes
    labels = data.labels[indices]
    w = example_weights(labels, cfg.target, cfg.alpha, N)
    w = w * inclusion_factors(data.labels, cfg.target, cfg.nontarget_fraction, N)[indices]
    total = 0.0
    for s in range(0, indices.size, batch_size):
        sl = slice(s, s + batch_size)
        logits = _logits_of(model, data.images[indices[sl]]).astype(np.float64)
        total += float(np.sum(w[sl] * _xent(logits, labels[sl])))
    return total / len(data)


def subsample_epoch(labels, target, fraction: float, epoch_seed) -> np.ndarray:
    """All target indices plus ceil(fraction * n_c) drawn without replacement per other class."""
    if not 0 < fraction <= 1:
        raise ConfigurationError("fraction must lie in (0, 1]")
    labels = np.asarray(labels)
    tset = set(np.atleast_1d(target).tolist())
    rng = np.random.default_rng(np.random.SeedSequence(np.atleast_1d(epoch_seed).tolist()))
    chosen = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if int(c) in tset or fraction == 1:
            chosen.append(idx)
        else:
            chosen.append(rng.choice(idx, ceil_count(fraction, idx.size), replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)


# optimisation

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple:
    """One bias-corrected Adam update, in place on the arrays in ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def early_stop(val_losses, rel: float = 1e-3, consecutive: int = 2) -> bool:
    """True when each of the last ``consecutive`` relative improvements is below ``rel``."""
    losses = [float(v) for v in val_losses]
    if len(losses) < consecutive + 1:
        return False
    for prev, now in zip(losses[-consecutive - 1:-1], losses[-consecutive:]):
        improve = (prev - now) / prev if prev != 0 else 0.0
        if improve >= rel:
            return False
    return True


# cached activations of the frozen part of a network

@dataclass
class FeatureBank:
    """Activations of a frozen network at a cut point, for train (plain and
    mirrored) and validation images. ``kind`` is "prefix" (attention slot
    input) or "penultimate" (final dense layer input)."""

    kind: str
    train: np.ndarray
    train_flip: np.ndarray
    train_labels: np.ndarray
    val: np.ndarray
    val_labels: np.ndarray
    n_classes: int

    @classmethod
    def build(cls, net: Network, train: Dataset, val: Dataset, kind: str = "prefix") -> "FeatureBank":
        enc = encode if kind == "prefix" else penultimate
        return cls(kind, enc(net, train.images), enc(net, train.images[..., ::-1]),
                   train.labels.copy(), enc(net, val.images), val.labels.copy(), train.n_classes)


def encode(net: Network, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen activations entering the attention slot."""
    out = [net.prefix(np.ascontiguousarray(images[s:s + batch_size])).data
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,), np.float32)


def penultimate(net: Network, images: np.ndarray, batch_size: int = 64, attention=None) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        feat = net.prefix(np.ascontiguousarray(images[s:s + batch_size]))
        out.append(net.penultimate_from(feat, attention).data)
    return np.concatenate(out)


def _require_frozen(base: Network) -> None:
    live = base.trainable()
    if live:
        raise ConfigurationError(f"base network has trainable groups {live}; freeze it first")


def _fit(cfg: TrainConfig, bank: FeatureBank, params: dict, logits_fn: Callable,
         after_step: Optional[Callable] = None, log_prefix: str = "") -> TrainHistory:
    N = bank.n_classes
    start = time.perf_counter()
    hist = TrainHistory(seed=cfg.seed)
    labels = bank.train_labels
    weight = example_weights(labels, cfg.target, cfg.alpha, N)
    weight = weight * inclusion_factors(labels, cfg.target, cfg.nontarget_fraction, N)
    val_w = example_weights(bank.val_labels, cfg.target, cfg.alpha, N)
    state = AdamState()
    hist.stop_reason = "max_epochs"

    def val_loss() -> float:
        total = 0.0
        for s in range(0, len(bank.val), 256):
            logits = logits_fn(Tensor(bank.val[s:s + 256])).data.astype(np.float64)
            total += float(np.sum(val_w[s:s + 256] * _xent(logits, bank.val_labels[s:s + 256])))
        return total / max(len(bank.val), 1)

    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 1]))
        idx = subsample_epoch(labels, cfg.target, cfg.nontarget_fraction, [cfg.seed, epoch, 0])
        idx = rng.permutation(idx)
        flip = rng.random(idx.size) < 0.5
        run, seen = 0.0, 0
        for s in range(0, idx.size, cfg.batch_size):
            b, f = idx[s:s + cfg.batch_size], flip[s:s + cfg.batch_size]
            feats = np.where(f.reshape(-1, *([1] * (bank.train.ndim - 1))), bank.train_flip[b], bank.train[b])
            for p in params.values():
                p.grad = None
            ce = T.softmax_xent(logits_fn(Tensor(feats)), labels[b])
            loss = T.weighted_mean(ce, weight[b].astype(ce.dtype))
            loss.backward()
            adam_step({n: p.data for n, p in params.items()},
                      {n: p.grad for n, p in params.items()}, state, cfg.lr)
            if after_step is not None:
                after_step()
            run += loss.item() * b.size
            seen += b.size
        hist.train_loss.append(run / seen)
        if epoch % cfg.check_stride_epochs == 0:
            hist.val_loss.append(val_loss())
            logger.debug("%sepoch %d train %.6g val %.6g", log_prefix, epoch, hist.train_loss[-1], hist.val_loss[-1])
            if early_stop(hist.checks, cfg.stop_rel_improve, cfg.stop_consecutive):
                hist.stop_reason = "early_stop"
                break
        else:
            hist.val_loss.append(None)
    hist.wall_time_s = time.perf_counter() - start
    return hist


def train_attention(base: Network, cfg: TrainConfig, train: Optional[Dataset] = None,
                    val: Optional[Dataset] = None, bank: Optional[FeatureBank] = None) -> tuple:
    """Learn non-negative filter gains at the attention slot of a frozen network."""
    _require_frozen(base)
    cfg.validate(base.config.n_classes)
    if bank is None:
        if train is None or val is None:
            raise ConfigurationError("need train and val datasets or a prebuilt feature bank")
        bank = FeatureBank.build(base, train, val, "prefix")
    if bank.kind != "prefix":
        raise ConfigurationError("attention training needs prefix features")
    w = Tensor(np.ones(base.config.attention_filters, dtype=np.float32), requires_grad=True, name="attention")

    def clamp():
        w.data[...] = project_nonneg(w.data)
        if w.data.min() < 0:
            raise ConstraintError("projection left a negative attention weight")

    hist = _fit(cfg, bank, {"attention": w}, lambda x: base.suffix(x, w), clamp,
                log_prefix=f"[attn t={cfg.target} a={cfg.alpha}] ")
    return AttentionWeights(w.data.copy(), cfg.target, cfg.alpha), hist


@dataclass
class HeadWeights:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


def with_head(base: Network, head: HeadWeights) -> Network:
    """Copy of ``base`` whose final dense layer is replaced by ``head``."""
    net = base.copy()
    net.params["fc2.weight"] = Tensor(head.weight.copy(), name="fc2.weight")
    net.params["fc2.bias"] = Tensor(head.bias.copy(), name="fc2.bias")
    return net


def retrain_head(base: Network, cfg: TrainConfig, train: Optional[Dataset] = None,
                 val: Optional[Dataset] = None, bank: Optional[FeatureBank] = None) -> tuple:
    """Relearn only the final dense layer (starting from its pretrained values)."""
    if base.attention is not None:
        raise ConfigurationError("head retraining runs on the network without an attention layer")
    _require_frozen(base)
    cfg.validate(base.config.n_classes)
    if bank is None:
        if train is None or val is None:
            raise ConfigurationError("need train and val datasets or a prebuilt feature bank")
        bank = FeatureBank.build(base, train, val, "penultimate")
    if bank.kind != "penultimate":
        raise ConfigurationError("head retraining needs penultimate features")
    W = Tensor(base.params["fc2.weight"].data.copy(), requires_grad=True, name="fc2.weight")
    b = Tensor(base.params["fc2.bias"].data.copy(), requires_grad=True, name="fc2.bias")
    hist = _fit(cfg, bank, {"fc2.weight": W, "fc2.bias": b}, lambda x: T.dense(x, W, b),
                log_prefix=f"[head t={cfg.target} a={cfg.alpha}] ")
    return HeadWeights(W.data.copy(), b.data.copy()), hist


# pretraining the base network

def evaluate_accuracy(net: Network, data: Dataset, k: int = 1, batch_size: int = 200) -> float:
    from .layers import topk

    hits = 0
    for s in range(0, len(data), batch_size):
        pred = topk(net.forward(data.images[s:s + batch_size]), k)
        hits += int((pred == data.labels[s:s + batch_size, None]).any(axis=1).sum())
    return hits / max(len(data), 1)


def pretrain(net: Network, train: Dataset, val: Dataset, epochs: int, seed: int = 0,
             lr: float = 1e-3, batch_size: int = 32, log: Optional[Callable] = None,
             cosine: bool = True) -> TrainHistory:
    """Train every parameter with plain cross-entropy, flip/crop augmentation and Adam.

    With ``cosine`` the learning rate follows a half cosine from ``lr`` at
    the first epoch down to zero after the last.

    Sets the network's input normalisation from the training images and
    leaves the network frozen.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    net.input_mean, net.input_std = channel_stats(train.images)
    net.unfreeze()
    net.lineage.update({"pretrain_seed": int(seed), "pretrain_epochs": int(epochs)})
    state = AdamState()
    hist = TrainHistory(seed=seed)
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 7]))
        order = rng.permutation(len(train))
        lr_e = lr * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / epochs)) if cosine else lr
        run, seen = 0.0, 0
        for s in range(0, order.size, batch_size):
            b = order[s:s + batch_size]
            x = augment(train.images[b], rng)
            net.zero_grad()
            loss = T.softmax_xent(net.forward(x), train.labels[b]).mean()
            loss.backward()
            adam_step({n: p.data for n, p in net.params.items()},
                      {n: p.grad for n, p in net.params.items()}, state, lr_e)
            run += loss.item() * b.size
            seen += b.size
        net.freeze()
        logits = np.concatenate([net.forward(val.images[s:s + 200]).data for s in range(0, len(val), 200)])
        vl = float(np.mean(_xent(logits.astype(np.float64), val.labels)))
        acc = float(np.mean(logits.argmax(1) == val.labels))
        net.unfreeze()
        hist.train_loss.append(run / seen)
        hist.val_loss.append(vl)
        msg = f"pretrain epoch {epoch}/{epochs} train {run / seen:.4f} val {vl:.4f} val_acc {acc:.3f}"
        logger.info(msg)
        if log is not None:
            log(msg)
    net.zero_grad()
    net.freeze()
    hist.stop_reason = "epochs"
    hist.wall_time_s = time.perf_counter() - start
    return hist
