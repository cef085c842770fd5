"""Image corpora and the evaluation sets built from them.

The on-disk corpus format is the 10-class 32x32 benchmark's binary record
layout: each record is one label byte followed by 1024 red, 1024 green and
1024 blue bytes (row-major), and a file is a plain concatenation of records.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
RECORD_LEN = 1 + PIXELS


@dataclass
class Dataset:
    images: np.ndarray  # [M,3,32,32] float32 in [0,1]
    labels: np.ndarray  # [M] int64
    class_names: list
    split: str = "train"
    sources: Optional[np.ndarray] = None  # indices into the set this one was drawn from

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DimensionError(f"images {self.images.shape} do not match labels {self.labels.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigurationError("pixel values must lie in [0, 1]")
        n = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n):
            raise ConfigurationError(f"labels must lie in [0, {n})")
        if self.split == "train":
            missing = set(range(n)) - set(np.unique(self.labels).tolist())
            if missing:
                raise ConfigurationError(f"train split has empty classes {sorted(missing)}")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        base = self.sources[idx] if self.sources is not None else idx
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names),
                       split or self.split, sources=base)


@dataclass
class BlendedSet:
    images: np.ndarray
    label_pairs: np.ndarray  # [M,2], sorted within each row, never equal
    class_names: list
    sources: Optional[np.ndarray] = None  # [M,2] indices of the component images
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.label_pairs = np.asarray(self.label_pairs, dtype=np.int64).reshape(-1, 2)
        if (self.label_pairs[:, 0] == self.label_pairs[:, 1]).any():
            raise ConfigurationError("a blended image cannot pair a class with itself")

    def __len__(self):
        return self.label_pairs.shape[0]


# binary records

def decode_records(buf: bytes, n_classes: int = 256) -> tuple:
    if len(buf) == 0:
        raise FormatError("empty corpus file", offset=0)
    whole, rest = divmod(len(buf), RECORD_LEN)
    if rest:
        raise FormatError(
            f"file length {len(buf)} is not a multiple of the {RECORD_LEN}-byte record; "
            "last record truncated", offset=whole * RECORD_LEN)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(whole, RECORD_LEN)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside [0, {n_classes})", offset=int(bad[0]) * RECORD_LEN)
    images = raw[:, 1:].reshape(whole, *IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return images, labels


def encode_records(images, labels) -> bytes:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != IMAGE_SHAPE or images.shape[0] != labels.shape[0]:
        raise DimensionError(f"cannot encode images {images.shape} with labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("labels must fit in one byte")
    pix = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    out = np.empty((labels.shape[0], RECORD_LEN), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = pix.reshape(labels.shape[0], PIXELS)
    return out.tobytes()


def load_corpus(path, class_names=None, split: str = "train") -> Dataset:
    """Read one record file. Pixels come back as byte/255."""
    buf = Path(path).read_bytes()
    n = len(class_names) if class_names else 256
    images, labels = decode_records(buf, n)
    if class_names is None:
        class_names = [str(i) for i in range(int(labels.max()) + 1)]
    return Dataset(images, labels, list(class_names), split)


def write_corpus(path, data) -> None:
    Path(path).write_bytes(encode_records(data.images, data.labels))


# corpus directories: either our own layout (train.bin, test.bin, optional
# pool.bin, classes.txt) or the benchmark's (data_batch_*.bin, test_batch.bin,
# batches.meta.txt)

def read_class_names(root: Path) -> Optional[list]:
    for name in ("classes.txt", "batches.meta.txt"):
        p = root / name
        if p.exists():
            return [line.strip() for line in p.read_text().splitlines() if line.strip()]
    return None


def load_corpus_dir(root) -> dict:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} not found")
    names = read_class_names(root)
    splits = {}
    if (root / "train.bin").exists():
        splits["train"] = load_corpus(root / "train.bin", names, "train")
    else:
        batches = sorted(root.glob("data_batch_*.bin"))
        if not batches:
            raise FileNotFoundError(f"no train.bin or data_batch_*.bin under {root}")
        parts = [decode_records(b.read_bytes(), len(names) if names else 256) for b in batches]
        imgs = np.concatenate([p[0] for p in parts])
        labs = np.concatenate([p[1] for p in parts])
        names = names or [str(i) for i in range(int(labs.max()) + 1)]
        splits["train"] = Dataset(imgs, labs, names, "train")
    names = splits["train"].class_names
    for split, files in (("test", ("test.bin", "test_batch.bin")), ("pool", ("pool.bin",))):
        for f in files:
            if (root / f).exists():
                splits[split] = load_corpus(root / f, names, split)
                break
    if "test" not in splits:
        raise FileNotFoundError(f"no test split under {root}")
    return splits


def write_corpus_dir(root, splits: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, ds in splits.items():
        write_corpus(root / f"{split}.bin", ds)
    first = next(iter(splits.values()))
    (root / "classes.txt").write_text("\n".join(first.class_names) + "\n")
    return root


# synthetic corpus

SHAPES = ("disk", "square", "triangle", "cross", "ring")
# hue centre, saturation range, value range
PALETTES = (
    ("warm", 0.02, (0.65, 1.0), (0.7, 1.0)),
    ("cool", 0.58, (0.55, 1.0), (0.6, 1.0)),
    ("green", 0.32, (0.55, 1.0), (0.5, 0.9)),
    ("violet", 0.80, (0.45, 0.9), (0.55, 0.95)),
)


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = int(i) % 6
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


_YY, _XX = np.mgrid[0:32, 0:32].astype(np.float64) + 0.5


def _shape_mask(kind: int, cx, cy, r, theta):
    x, y = _XX - cx, _YY - cy
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * x + s * y, -s * x + c * y
    if kind == 0:
        d = np.hypot(u, v) - r
    elif kind == 1:
        d = np.maximum(np.abs(u), np.abs(v)) - 0.8 * r
    elif kind == 2:
        angles = theta + np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
        d = np.max([np.cos(a) * x + np.sin(a) * y for a in angles], axis=0) - 0.5 * r
    elif kind == 3:
        arm, half = r, 0.33 * r
        d = np.minimum(np.maximum(np.abs(u) - arm, np.abs(v) - half),
                       np.maximum(np.abs(v) - arm, np.abs(u) - half))
    else:
        d = np.abs(np.hypot(u, v) - 0.72 * r) - 0.24 * r
    return np.clip(0.5 - d, 0.0, 1.0)


def _render(rng, kind: int, palette: int, hard: float) -> np.ndarray:
    # background: linear colour gradient plus coarse texture
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * _XX + np.sin(ang) * _YY) / 45.0 + 0.5
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    coarse = rng.normal(0, 0.08, (3, 8, 8)).repeat(4, 1).repeat(4, 2)
    img = img + coarse
    # clutter: a couple of soft ellipses in arbitrary colours
    for _ in range(rng.integers(1, 4)):
        ex, ey = rng.uniform(0, 32, 2)
        ax, ay = rng.uniform(2, 7, 2)
        blob = np.exp(-(((_XX - ex) / ax) ** 2 + ((_YY - ey) / ay) ** 2))
        col = rng.uniform(0, 1, 3)
        img = img * (1 - 0.7 * blob) + 0.7 * blob * col[:, None, None]
    # the object
    name, hue, srange, vrange = PALETTES[palette]
    h = (hue + rng.normal(0, 0.035)) % 1.0
    rgb = np.array(_hsv_to_rgb(h, rng.uniform(*srange), rng.uniform(*vrange)))
    r = rng.uniform(5.5, 10.0)
    cx, cy = rng.uniform(r + 1, 31 - r, 2)
    mask = _shape_mask(kind, cx, cy, r, rng.uniform(0, 2 * np.pi))
    contrast = rng.uniform(0.35, 1.0) * (1 - hard)
    img = img * (1 - contrast * mask) + contrast * mask * rgb[:, None, None]
    img = img + rng.normal(0, 0.04 + 0.06 * hard, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_class_names(n_classes: int) -> list:
    return [f"{PALETTES[c // len(SHAPES)][0]}-{SHAPES[c % len(SHAPES)]}" for c in range(n_classes)]


def gen_synthetic(seed: int, n_classes: int, n_per_class: int, split: str = "train",
                  hard: float = 0.0) -> Dataset:
    """Procedural coloured shapes; class = (shape, colour family).

    ``hard`` in [0, 1) lowers object contrast and raises pixel noise.
    Output is a deterministic function of the arguments. Pixels are
    quantised to bytes so the set survives a write/read round trip.
    """
    max_classes = len(SHAPES) * len(PALETTES)
    if not 2 <= n_classes <= max_classes:
        raise ConfigurationError(f"n_classes must be in [2, {max_classes}]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), n_classes, n_per_class]))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = np.empty((labels.size, *IMAGE_SHAPE), dtype=np.float32)
    for i, c in enumerate(labels):
        img = _render(rng, int(c) % len(SHAPES), int(c) // len(SHAPES), hard)
        images[i] = np.rint(img * 255.0) / 255.0
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], synthetic_class_names(n_classes), split)


def train_val_split(data: Dataset, train_fraction: float = 0.9, seed: int = 0) -> tuple:
    """Per-class seeded split into (train, val)."""
    rng = np.random.default_rng(seed)
    tr, va = [], []
    for c in range(data.n_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        cut = int(round(train_fraction * idx.size))
        tr.append(idx[:cut])
        va.append(idx[cut:])
    tr, va = np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))
    return data.subset(tr, "train"), data.subset(va, "val")


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and a random crop from zero padding."""
    B, C, H, W = images.shape
    flip = rng.random(B) < 0.5
    out = np.where(flip[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, B)
    dx = rng.integers(0, 2 * pad + 1, B)
    res = np.empty_like(images)
    for i in range(B):
        res[i] = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
    return res


def channel_stats(images: np.ndarray) -> tuple:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


# evaluation sets

def blend(a, b) -> np.ndarray:
    """50/50 alpha blend of two images in [0, 1] pixel space."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot blend shapes {a.shape} and {b.shape}")
    return 0.5 * a + 0.5 * b


def _class_index(data: Dataset) -> list:
    return [np.flatnonzero(data.labels == c) for c in range(data.n_classes)]


def make_blended_set(test: Dataset, target: int, n_pairs: int, seed: int) -> BlendedSet:
    """``n_pairs`` blends containing ``target`` plus ``n_pairs`` blends of two other classes.

    Target-present blends use distinct target images and a partner drawn from
    a uniformly chosen other class. Target-absent blends draw an unordered
    pair of distinct non-target classes uniformly.
    """
    by_class = _class_index(test)
    N = test.n_classes
    if not 0 <= target < N or by_class[target].size == 0:
        raise ConfigurationError(f"target {target} has no test images")
    if by_class[target].size < n_pairs:
        raise ConfigurationError(f"target {target} has {by_class[target].size} test images, need {n_pairs}")
    others = [c for c in range(N) if c != target and by_class[c].size]
    if len(others) < 2:
        raise ConfigurationError("need at least two non-target classes with images")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(target), int(n_pairs)]))
    src = np.empty((2 * n_pairs, 2), dtype=np.int64)
    pairs = np.empty((2 * n_pairs, 2), dtype=np.int64)
    tgt_imgs = rng.choice(by_class[target], n_pairs, replace=False)
    for i in range(n_pairs):
        other = others[rng.integers(len(others))]
        src[i] = (tgt_imgs[i], rng.choice(by_class[other]))
        pairs[i] = sorted((target, other))
    class_pairs = [(a, b) for ai, a in enumerate(others) for b in others[ai + 1:]]
    for i in range(n_pairs, 2 * n_pairs):
        a, b = class_pairs[rng.integers(len(class_pairs))]
        src[i] = (rng.choice(by_class[a]), rng.choice(by_class[b]))
        pairs[i] = (a, b)
    images = blend(test.images[src[:, 0]], test.images[src[:, 1]]).astype(np.float32)
    base_src = test.sources[src] if test.sources is not None else src
    return BlendedSet(images, pairs, list(test.class_names), base_src,
                      {"target": int(target), "n_pairs": int(n_pairs), "seed": int(seed)})


def mine_hard_set(base, pool: Dataset, k: int, batch_size: int = 250) -> Dataset:
    """Images whose true class is missing from the frozen base model's top-k."""
    from .layers import topk

    keep = []
    for start in range(0, len(pool), batch_size):
        logits = base.forward(pool.images[start:start + batch_size])
        pred = topk(logits, k)
        truth = pool.labels[start:start + batch_size]
        miss = ~(pred == truth[:, None]).any(axis=1)
        keep.append(np.flatnonzero(miss) + start)
    idx = np.concatenate(keep) if keep else np.zeros(0, np.int64)
    return pool.subset(idx, "hard")


def balanced_test(test: Dataset, target: int, seed: int) -> Dataset:
    """All images of ``target`` plus an equal-size seeded sample of the rest."""
    tgt = np.flatnonzero(test.labels == target)
    if tgt.size == 0:
        raise ConfigurationError(f"target {target} has no images in the {test.split} set")
    rest = np.flatnonzero(test.labels != target)
    if rest.size < tgt.size:
        raise ConfigurationError(f"only {rest.size} non-target images for {tgt.size} target images")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(target), tgt.size]))
    picked = np.sort(rng.choice(rest, tgt.size, replace=False))
    return test.subset(np.concatenate([tgt, picked]), test.split)


# persistence of derived sets

def save_blended(path, bset: BlendedSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(bset.images, bset.label_pairs[:, 0]))
    sidecar = {"kind": "blended", "class_names": bset.class_names,
               "label_pairs": bset.label_pairs.tolist(),
               "sources": None if bset.sources is None else bset.sources.tolist(), **bset.meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar) + "\n")


def load_blended(path) -> BlendedSet:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    images, _ = decode_records(path.read_bytes())
    meta = {k: v for k, v in side.items() if k not in ("kind", "class_names", "label_pairs", "sources")}
    src = None if side.get("sources") is None else np.asarray(side["sources"])
    return BlendedSet(images, side["label_pairs"], side["class_names"], src, meta)


def save_dataset(path, data: Dataset, **meta) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(path, data)
    sidecar = {"kind": data.split, "class_names": data.class_names,
               "sources": None if data.sources is None else data.sources.tolist(), **meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    images, labels = decode_records(path.read_bytes(), len(side["class_names"]))
    src = None if side.get("sources") is None else np.asarray(side["sources"])
    return Dataset(images, labels, side["class_names"], side.get("kind", "test"), src)


def ceil_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), robust to float noise such as 0.1 * 30."""
    return int(math.ceil(round(fraction * n, 9)))
