"""MiniVGG network, the filter-wise attention layer, and checkpoints."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ConstraintError, DimensionError
from .tensor import Tensor
from .tensorio import load_tensor, save_tensor


@dataclass
class AttentionWeights:
    """One non-negative gain per filter of the modulated layer.

    ``target`` is the set of class ids the weights were trained for and
    ``alpha`` the attention intensity used in training.
    """

    w: np.ndarray
    target: tuple = ()
    alpha: float = float("nan")

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float32 if np.asarray(self.w).dtype != np.float64 else np.float64)
        if self.w.ndim != 1:
            raise DimensionError(f"attention weights must be a vector, got shape {self.w.shape}")
        self.target = tuple(sorted(int(t) for t in np.atleast_1d(self.target))) if np.size(self.target) else ()

    @classmethod
    def fresh(cls, n_filters: int, target=(), alpha: float = float("nan")) -> "AttentionWeights":
        return cls(np.ones(n_filters, dtype=np.float32), target, alpha)

    def __len__(self):
        return self.w.shape[0]


def attention_apply(act: Tensor, attn) -> Tensor:
    """Scale each filter map of ``act`` by its attention weight.

    ``attn`` may be an :class:`AttentionWeights` or a weight Tensor (the
    latter is what the trainer passes so gradients reach the weights).
    """
    w = attn if isinstance(attn, Tensor) else Tensor(attn.w)
    if act.data.ndim != 4 or w.data.ndim != 1 or w.shape[0] != act.shape[1]:
        raise DimensionError(f"{w.shape[0] if w.data.ndim else '?'} attention weights for activations {act.shape}")
    if (w.data < 0).any():
        raise ConstraintError("attention weights must be non-negative")
    return T.channel_scale(act, w)


def project_nonneg(attn):
    """Clamp weights onto [0, inf). Returns the same kind of object it was given."""
    if isinstance(attn, AttentionWeights):
        return AttentionWeights(np.maximum(attn.w, 0), attn.target, attn.alpha)
    return np.maximum(attn, 0)


def topk(logits, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits per row; equal logits favour the lower index."""
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if scores.ndim == 1:
        scores = scores[None, :]
    if not 1 <= k <= scores.shape[1]:
        raise ConfigurationError(f"k={k} outside [1, {scores.shape[1]}]")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


@dataclass
class MiniVGGConfig:
    n_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    widths: tuple = (32, 64, 128, 128)
    convs_per_block: int = 2
    hidden: int = 256
    attention_slot: int = 3  # number of conv blocks before the attention layer

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not 1 <= self.attention_slot <= len(self.widths):
            raise ConfigurationError(f"attention slot {self.attention_slot} outside 1..{len(self.widths)}")
        if self.image_size % (2 ** len(self.widths)):
            raise ConfigurationError(f"image size {self.image_size} not divisible by 2^{len(self.widths)}")

    @property
    def attention_filters(self) -> int:
        return self.widths[self.attention_slot - 1]

    @property
    def flat_dim(self) -> int:
        side = self.image_size // 2 ** len(self.widths)
        return self.widths[-1] * side * side


class Network:
    """VGG-style conv blocks, an optional attention slot, and a two-layer dense head.

    Inputs are images in [0, 1]; per-channel normalisation is applied inside
    :meth:`forward` so that blended or mined images can be fed unchanged.
    """

    def __init__(self, config: MiniVGGConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.attention: Optional[AttentionWeights] = None
        self.input_mean = np.zeros(config.in_channels, dtype=dtype)
        self.input_std = np.ones(config.in_channels, dtype=dtype)
        self.lineage: dict = {"init_seed": int(seed)}
        rng = np.random.default_rng(seed)
        c_in = config.in_channels
        for b, width in enumerate(config.widths, start=1):
            for i in range(1, config.convs_per_block + 1):
                std = np.sqrt(2.0 / (c_in * 9))
                self._add(f"block{b}.conv{i}.weight", rng.normal(0, std, (width, c_in, 3, 3)), dtype)
                self._add(f"block{b}.conv{i}.bias", np.zeros(width), dtype)
                c_in = width
        self._add("fc1.weight", rng.normal(0, np.sqrt(2.0 / config.flat_dim), (config.flat_dim, config.hidden)), dtype)
        self._add("fc1.bias", np.zeros(config.hidden), dtype)
        self._add("fc2.weight", rng.normal(0, np.sqrt(1.0 / config.hidden), (config.hidden, config.n_classes)), dtype)
        self._add("fc2.bias", np.zeros(config.n_classes), dtype)

    def _add(self, name, value, dtype):
        self.params[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)

    # parameter bookkeeping

    @property
    def frozen(self) -> dict:
        return {name: not p.requires_grad for name, p in self.params.items()}

    def freeze(self, names: Optional[Iterable[str]] = None) -> "Network":
        for name in (self.params if names is None else names):
            self.params[name].requires_grad = False
        return self

    def unfreeze(self, names: Optional[Iterable[str]] = None) -> "Network":
        for name in (self.params if names is None else names):
            self.params[name].requires_grad = True
        return self

    def trainable(self) -> list:
        return [n for n, p in self.params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_count(self, names: Optional[Iterable[str]] = None) -> int:
        return sum(self.params[n].data.size for n in (self.params if names is None else names))

    @property
    def final_layer(self) -> tuple:
        return ("fc2.weight", "fc2.bias")

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.config = self.config
        other.seed = self.seed
        other.params = OrderedDict(
            (n, Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)) for n, p in self.params.items()
        )
        other.attention = None if self.attention is None else AttentionWeights(
            self.attention.w.copy(), self.attention.target, self.attention.alpha)
        other.input_mean = self.input_mean.copy()
        other.input_std = self.input_std.copy()
        other.lineage = dict(self.lineage)
        return other

    def astype(self, dtype) -> "Network":
        """A copy with every parameter cast to ``dtype`` (float64 for gradient checks)."""
        other = self.copy()
        for n, p in other.params.items():
            other.params[n] = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=n)
        other.input_mean = other.input_mean.astype(dtype)
        other.input_std = other.input_std.astype(dtype)
        if other.attention is not None:
            other.attention.w = other.attention.w.astype(dtype)
        return other

    # forward passes

    def _check_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.input_mean.dtype))
        c = self.config
        if x.data.ndim != 4 or x.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected input [B,{c.in_channels},{c.image_size},{c.image_size}], got {x.shape}")
        return x

    def normalize(self, x: Tensor) -> Tensor:
        std = self.input_std.astype(x.dtype)[None, :, None, None]
        mean = self.input_mean.astype(x.dtype)[None, :, None, None]
        return _Standardize.apply(x, mean=mean, std=std)

    def block(self, x: Tensor, b: int) -> Tensor:
        for i in range(1, self.config.convs_per_block + 1):
            x = T.relu(T.conv2d(x, self.params[f"block{b}.conv{i}.weight"],
                                self.params[f"block{b}.conv{i}.bias"], stride=1, padding=1))
        return T.maxpool2d(x, 2, 2)

    def prefix(self, batch) -> Tensor:
        """Activations entering the attention slot."""
        x = self.normalize(self._check_input(batch))
        for b in range(1, self.config.attention_slot + 1):
            x = self.block(x, b)
        return x

    def penultimate_from(self, feat: Tensor, attention=None) -> Tensor:
        x = feat if attention is None else attention_apply(feat, attention)
        for b in range(self.config.attention_slot + 1, len(self.config.widths) + 1):
            x = self.block(x, b)
        x = T.flatten(x)
        return T.relu(T.dense(x, self.params["fc1.weight"], self.params["fc1.bias"]))

    def head_from(self, penult: Tensor) -> Tensor:
        return T.dense(penult, self.params["fc2.weight"], self.params["fc2.bias"])

    def suffix(self, feat: Tensor, attention=None) -> Tensor:
        """Logits from attention-slot activations, optionally modulated."""
        return self.head_from(self.penultimate_from(feat, attention))

    def forward(self, batch) -> Tensor:
        return self.suffix(self.prefix(batch), self.attention)

    __call__ = forward


class _Standardize(T.Function):
    def forward(self, x, mean=None, std=None):
        self.std = std
        return (x - mean) / std

    def backward(self, grad):
        return (grad / self.std,)


def forward(net: Network, batch) -> Tensor:
    return net.forward(batch)


def build_minivgg(n_classes: int = 10, seed: int = 0, **overrides) -> Network:
    return Network(MiniVGGConfig(n_classes=n_classes, **overrides), seed=seed)


# checkpoints

def _group_file(name: str) -> str:
    return name + ".ggtn"


def save_network(net: Network, path) -> Path:
    """Write one tensor file per parameter group plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups = []
    for name, p in net.params.items():
        save_tensor(path / _group_file(name), p)
        groups.append({"name": name, "shape": list(p.shape), "frozen": not p.requires_grad,
                       "file": _group_file(name)})
    manifest = {
        "format": "goalgaze-checkpoint/1",
        "config": asdict(net.config),
        "attention_slot": net.config.attention_slot,
        "groups": groups,
        "input_mean": [float(v) for v in net.input_mean],
        "input_std": [float(v) for v in net.input_std],
        "seed_lineage": net.lineage,
    }
    if net.attention is not None:
        save_tensor(path / "attention.ggtn", net.attention.w)
        manifest["attention"] = {"file": "attention.ggtn", "target": list(net.attention.target),
                                 "alpha": net.attention.alpha}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_network(path) -> Network:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ConfigurationError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    config = MiniVGGConfig(**manifest["config"])
    net = Network.__new__(Network)
    net.config = config
    net.seed = manifest["seed_lineage"].get("init_seed", 0)
    net.lineage = manifest["seed_lineage"]
    net.params = OrderedDict()
    for g in manifest["groups"]:
        t = load_tensor(path / g["file"])
        if list(t.shape) != g["shape"]:
            raise DimensionError(f"group {g['name']} stored as {t.shape}, manifest says {g['shape']}")
        net.params[g["name"]] = Tensor(t.data, requires_grad=not g["frozen"], name=g["name"])
    net.input_mean = np.asarray(manifest["input_mean"], dtype=np.float32)
    net.input_std = np.asarray(manifest["input_std"], dtype=np.float32)
    net.attention = None
    if "attention" in manifest:
        a = manifest["attention"]
        net.attention = AttentionWeights(load_tensor(path / a["file"]).data, a["target"], a["alpha"])
    return net
