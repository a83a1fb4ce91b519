"""Small classifiers: an MLP and a tiny pre-norm ViT.

Both models take raw pixels in [0, 1]; the (optional) bilinear resize and the
per-channel normalisation are the first, non-trainable stage of the forward
pass, so input gradients and attacks live in pixel space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .init import he_uniform, trunc_normal
from .peft import adapter_forward, inject_prompts, lora_forward
from .tensor import Tensor

ROLES = (
    "weight",
    "bias",
    "norm",
    "head-weight",
    "head-bias",
    "prompt",
    "lora-A",
    "lora-B",
    "adapter-down",
    "adapter-up",
)


@dataclass
class Parameter:
    tensor: Tensor
    role: str
    trainable: bool = True


class ParameterStore:
    """Ordered ``name -> (tensor, role, trainable)`` registry.

    A tensor's ``requires_grad`` mirrors its trainable flag, so frozen
    parameters never enter the tape.
    """

    def __init__(self):
        self._entries: dict[str, Parameter] = {}

    def add(self, name: str, data, role: str, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        t = Tensor(np.array(data, copy=True), requires_grad=trainable)
        self._entries[name] = Parameter(t, role, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> Parameter:
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def role(self, name: str) -> str:
        return self._entries[name].role

    def set_trainable(self, name: str, flag: bool) -> None:
        p = self._entries[name]
        p.trainable = bool(flag)
        p.tensor.requires_grad = bool(flag)

    def freeze_all(self) -> None:
        for name in self._entries:
            self.set_trainable(name, False)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._entries.items() if p.trainable]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self._entries.items() if not p.trainable]

    def count(self, trainable_only: bool = False) -> int:
        return sum(p.tensor.size for p in self._entries.values() if p.trainable or not trainable_only)

    def assign(self, name: str, value: np.ndarray) -> None:
        t = self._entries[name].tensor
        value = np.asarray(value, dtype=t.dtype)
        if value.shape != t.shape:
            raise DimensionError(f"{name}: cannot assign shape {value.shape} to {t.shape}")
        t.data = value.copy()

    def replace(self, name: str, data, role: str | None = None) -> None:
        """Swap in a new tensor (possibly a new shape) under an existing name."""
        old = self._entries[name]
        t = Tensor(np.array(data, copy=True), requires_grad=old.trainable)
        self._entries[name] = Parameter(t, role or old.role, old.trainable)

    def remove(self, name: str) -> None:
        del self._entries[name]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self._entries.items()}

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, p in self._entries.items():
            out.add(n, p.tensor.data, p.role, p.trainable)
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for n, p in self._entries.items():
            out.add(n, p.tensor.data.astype(dtype), p.role, p.trainable)
        return out


@dataclass
class ViTConfig:
    image_size: int = 8
    channels: int = 1
    patch_size: int = 4
    depth: int = 2
    width: int = 256
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10

    def validate(self) -> "ViTConfig":
        for key in ("image_size", "channels", "patch_size", "depth", "width", "heads", "mlp_ratio", "num_classes"):
            if getattr(self, key) < 1:
                raise ConfigError(f"ViTConfig.{key} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1


@dataclass
class MLPConfig:
    """``widths[0]`` is the flattened input size, the rest are hidden widths."""

    widths: tuple[int, ...] = (64, 128)
    num_classes: int = 10
    image_shape: tuple[int, int, int] | None = None

    def validate(self) -> "MLPConfig":
        if len(self.widths) < 2:
            raise ConfigError("an MLP needs an input width and at least one hidden layer")
        if min(self.widths) < 1 or self.num_classes < 1:
            raise ConfigError("MLP widths and class count must be positive")
        return self


@dataclass
class InputTransform:
    mean: tuple[float, ...] = (0.5,)
    std: tuple[float, ...] = (0.5,)
    resize_to: int | None = None

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ConfigError("mean and std need one entry per channel")
        if min(self.std) <= 0:
            raise ConfigError("normalisation std must be strictly positive")

    def apply(self, x: Tensor) -> Tensor:
        if self.resize_to is not None and x.shape[-1] != self.resize_to:
            x = resize_bilinear(x, self.resize_to)
        c = x.shape[1]
        mean = np.asarray(self.mean, dtype=x.dtype)
        std = np.asarray(self.std, dtype=x.dtype)
        if mean.size == 1:
            mean, std = np.repeat(mean, c), np.repeat(std, c)
        if mean.size != c:
            raise DimensionError(f"transform has {mean.size} channels, input has {c}")
        return (x - mean.reshape(1, c, 1, 1)) * (1.0 / std).reshape(1, c, 1, 1)


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """``[dst, src]`` interpolation weights, half-pixel centres, edge clamped."""
    m = np.zeros((dst, src), dtype=np.float64)
    for i in range(dst):
        pos = min(max((i + 0.5) * src / dst - 0.5, 0.0), src - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, src - 1)
        w = pos - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def resize_bilinear(x: Tensor, side: int) -> Tensor:
    h, w = x.shape[-2:]
    rows = bilinear_matrix(h, side).astype(x.dtype)
    cols = bilinear_matrix(w, side).T.astype(x.dtype)
    return T.matmul(T.matmul(Tensor(rows), x), Tensor(cols))


def linear(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    """``x @ W.T + b`` over the last axis, W stored as [out, in]."""
    w = params[f"{name}.weight"]
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    out = T.matmul(flat, w.T)
    bias = f"{name}.bias"
    if bias in params:
        out = out + params[bias]
    return out.reshape(*lead, w.shape[0])


class Model:
    """Parameters plus architecture; calling it returns logits."""

    def __init__(self, config, params: ParameterStore, transform: InputTransform | None = None):
        self.config = config
        self.params = params
        self.transform = transform or InputTransform()
        self.strategy = None

    @property
    def kind(self) -> str:
        return "vit" if isinstance(self.config, ViTConfig) else "mlp"

    @property
    def num_classes(self) -> int:
        return self.params["head.weight"].shape[0]

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def __call__(self, x, strict: bool = True, trace: dict | None = None) -> Tensor:
        return forward(self, x, strict=strict, trace=trace)

    def features(self, x, strict: bool = True) -> Tensor:
        return forward_features(self, x, strict=strict)

    def clone(self) -> "Model":
        out = Model(self.config, self.params.copy(), self.transform)
        out.strategy = self.strategy
        return out

    def astype(self, dtype) -> "Model":
        out = Model(self.config, self.params.astype(dtype), self.transform)
        out.strategy = self.strategy
        return out


def _check_input(model: Model, x: Tensor, strict: bool) -> None:
    cfg = model.config
    if x.ndim != 4:
        raise DimensionError(f"expected [batch, channels, height, width] input, got {x.shape}")
    side = model.transform.resize_to
    if isinstance(cfg, ViTConfig):
        want_c = cfg.channels
        ok_side = x.shape[2] == x.shape[3] and (x.shape[2] == cfg.image_size or side == cfg.image_size)
        if x.shape[1] != want_c or not ok_side:
            raise DimensionError(f"input {x.shape} does not match ViT config "
                                 f"({cfg.channels}x{cfg.image_size}x{cfg.image_size})")
    if strict and x.size and (x.data.min() < 0 or x.data.max() > 1):
        raise InputError("pixels must lie in [0, 1]")


def _prepare(model: Model, x, strict: bool) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    _check_input(model, x, strict)
    return model.transform.apply(x)


def forward(model: Model, x, strict: bool = True, trace: dict | None = None) -> Tensor:
    """Logits ``[batch, classes]`` for raw images ``x`` in [0, 1].

    ``strict=False`` skips the pixel-range check (attack iterates).
    """
    feats = forward_features(model, x, strict=strict, trace=trace)
    return linear(feats, model.params, "head")


def forward_features(model: Model, x, strict: bool = True, trace: dict | None = None) -> Tensor:
    h = _prepare(model, x, strict)
    if model.kind == "mlp":
        return _mlp_features(model, h)
    return _vit_features(model, h, trace)


def _mlp_features(model: Model, h: Tensor) -> Tensor:
    p = model.params
    h = h.reshape(h.shape[0], -1)
    i = 0
    while f"layers.{i}.weight" in p:
        h = T.relu(linear(h, p, f"layers.{i}"))
        i += 1
    return h


def patchify(x: Tensor, patch: int) -> Tensor:
    b, c, hgt, wid = x.shape
    gh, gw = hgt // patch, wid // patch
    x = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def _projection(h: Tensor, p: ParameterStore, name: str, lora_scale: float) -> Tensor:
    if f"{name}.lora_A" in p:
        return lora_forward(p[f"{name}.weight"], p[f"{name}.lora_A"], p[f"{name}.lora_B"],
                            lora_scale, h, bias=p[f"{name}.bias"])
    return linear(h, p, name)


def _attention(h: Tensor, p: ParameterStore, prefix: str, heads: int, lora_scale: float,
               trace: dict | None) -> Tensor:
    b, s, d = h.shape
    dh = d // heads
    q = _projection(h, p, f"{prefix}.q", lora_scale)
    k = linear(h, p, f"{prefix}.k")
    v = _projection(h, p, f"{prefix}.v", lora_scale)
    q = q.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    kt = k.reshape(b, s, heads, dh).transpose(0, 2, 3, 1)
    v = v.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    att = T.softmax(T.scale(T.matmul(q, kt), 1.0 / math.sqrt(dh)), axis=-1)
    if trace is not None:
        trace[prefix] = att.data
    out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return linear(out, p, f"{prefix}.proj")


def _vit_features(model: Model, x: Tensor, trace: dict | None) -> Tensor:
    cfg: ViTConfig = model.config
    p = model.params
    strategy = model.strategy
    lora_scale = strategy.lora_scale / strategy.lora_rank if strategy is not None else 1.0

    tokens = linear(patchify(x, cfg.patch_size), p, "patch_embed")
    b = tokens.shape[0]
    cls = T.broadcast_to(p["cls_token"], (b, 1, cfg.width))
    h = T.concat([cls, tokens], axis=1) + p["pos_embed"]

    for i in range(cfg.depth):
        if f"prompts.{i}" in p:
            h = inject_prompts(i, h, p[f"prompts.{i}"])
        blk = f"blocks.{i}"
        h = h + _attention(T.layer_norm(h, p[f"{blk}.norm1.weight"], p[f"{blk}.norm1.bias"]),
                           p, f"{blk}.attn", cfg.heads, lora_scale, trace)
        z = T.layer_norm(h, p[f"{blk}.norm2.weight"], p[f"{blk}.norm2.bias"])
        h = h + linear(T.gelu(linear(z, p, f"{blk}.mlp.fc1")), p, f"{blk}.mlp.fc2")
        if f"{blk}.adapter.down.weight" in p:
            h = adapter_forward(h, p[f"{blk}.adapter.down.weight"], p[f"{blk}.adapter.up.weight"],
                                p[f"{blk}.adapter.down.bias"], p[f"{blk}.adapter.up.bias"])
    h = T.layer_norm(h, p["norm.weight"], p["norm.bias"])
    return h[:, 0, :]


def _add_linear(store: ParameterStore, name: str, d_out: int, d_in: int, rng, dtype,
                init: str = "he", role: str = "weight", bias_role: str = "bias") -> None:
    if init == "he":
        w = he_uniform(rng, (d_out, d_in), dtype=dtype)
    else:
        w = trunc_normal(rng, (d_out, d_in), dtype=dtype)
    store.add(f"{name}.weight", w, role)
    store.add(f"{name}.bias", np.zeros(d_out, dtype=dtype), bias_role)


def add_head(store: ParameterStore, d: int, num_classes: int, rng, dtype=np.float32) -> None:
    """He-uniform weights, zero bias (also the RanLI scheme)."""
    for name in ("head.weight", "head.bias"):
        if name in store:
            store.remove(name)
    _add_linear(store, "head", num_classes, d, rng, dtype, role="head-weight", bias_role="head-bias")


def build_mlp(config: MLPConfig, rng: np.random.Generator, transform: InputTransform | None = None,
              dtype=np.float32) -> Model:
    config.validate()
    store = ParameterStore()
    widths = config.widths
    for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        _add_linear(store, f"layers.{i}", d_out, d_in, rng, dtype)
    add_head(store, widths[-1], config.num_classes, rng, dtype)
    return Model(config, store, transform)


def build_tiny_vit(config: ViTConfig, rng: np.random.Generator, transform: InputTransform | None = None,
                   dtype=np.float32) -> Model:
    cfg = config.validate()
    d = cfg.width
    store = ParameterStore()
    _add_linear(store, "patch_embed", d, cfg.channels * cfg.patch_size ** 2, rng, dtype, init="trunc")
    store.add("cls_token", trunc_normal(rng, (1, 1, d), dtype=dtype), "weight")
    store.add("pos_embed", trunc_normal(rng, (1, cfg.seq_len, d), dtype=dtype), "weight")
    for i in range(cfg.depth):
        blk = f"blocks.{i}"
        store.add(f"{blk}.norm1.weight", np.ones(d, dtype=dtype), "norm")
        store.add(f"{blk}.norm1.bias", np.zeros(d, dtype=dtype), "bias")
        for proj in ("q", "k", "v", "proj"):
            _add_linear(store, f"{blk}.attn.{proj}", d, d, rng, dtype, init="trunc")
        store.add(f"{blk}.norm2.weight", np.ones(d, dtype=dtype), "norm")
        store.add(f"{blk}.norm2.bias", np.zeros(d, dtype=dtype), "bias")
        _add_linear(store, f"{blk}.mlp.fc1", d * cfg.mlp_ratio, d, rng, dtype, init="trunc")
        _add_linear(store, f"{blk}.mlp.fc2", d, d * cfg.mlp_ratio, rng, dtype, init="trunc")
    store.add("norm.weight", np.ones(d, dtype=dtype), "norm")
    store.add("norm.bias", np.zeros(d, dtype=dtype), "bias")
    add_head(store, d, cfg.num_classes, rng, dtype)
    return Model(cfg, store, transform)


def build_model(config, rng: np.random.Generator, transform: InputTransform | None = None) -> Model:
    if isinstance(config, ViTConfig):
        return build_tiny_vit(config, rng, transform)
    return build_mlp(config, rng, transform)


def feature_width(model: Model) -> int:
    return model.params["head.weight"].shape[1]


def count_params(model: Model, trainable_only: bool = False) -> int:
    return model.params.count(trainable_only)


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax labels (ties resolve to the lowest class index)."""
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(model(x[i:i + batch_size]).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def logits_of(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([model(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)])
