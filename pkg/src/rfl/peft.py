"""Finetuning strategies: which parameters move, what new modules exist, and
how the classification head starts.

Strategies: ``fullft``, ``adapter``, ``lora``, ``bias``, ``vpt``, ``linear``.
Head initialisation schemes: ``ranli`` (random), ``roli`` (adversarial probe
head, new modules zeroed), ``stdli`` (standard probe head), ``regli``
(logistic-regression head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InitError, UnsupportedError
from .init import he_uniform, uniform
from .tensor import Tensor

KINDS = ("fullft", "adapter", "lora", "bias", "vpt", "linear")
SCHEMES = ("ranli", "roli", "stdli", "regli")
HEAD = ("head.weight", "head.bias")

_ALIASES = {"full-ft": "fullft", "full_ft": "fullft", "full": "fullft", "prompt": "vpt"}


@dataclass
class Strategy:
    kind: str = "linear"
    reduction: int = 8
    lora_rank: int = 16
    lora_scale: float = 16.0
    lora_targets: tuple[str, ...] = ("query", "value")
    vpt_tokens: int = 10
    # Under RoLI the output factor (LoRA B, adapter up) is always zero, which
    # already reproduces the probe. Zeroing the input factor too (LoRA A,
    # adapter down) is a stationary point: neither factor gets a gradient.
    roli_zero_both: bool = False

    def __post_init__(self):
        self.kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if self.reduction < 1 or self.lora_rank < 1 or self.vpt_tokens < 1:
            raise ConfigError("reduction, lora_rank and vpt_tokens must be >= 1")
        bad = set(self.lora_targets) - {"query", "value"}
        if bad:
            raise ConfigError(f"LoRA targets must be query/value, got {sorted(bad)}")


@dataclass
class HeadInit:
    scheme: str = "ranli"
    # Model, ParameterStore, (weight, bias) tuple, or checkpoint path
    source: object = None
    l2: float = 1e-3

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown head init {self.scheme!r}; expected one of {SCHEMES}")
        if self.scheme in ("roli", "stdli", "regli") and self.source is None:
            raise ConfigError(f"head init {self.scheme!r} needs a source head")


# -- functional forms ------------------------------------------------------

def lora_forward(w0: Tensor, a: Tensor, b: Tensor, scale: float, x: Tensor, rank: int | None = None,
                 bias: Tensor | None = None) -> Tensor:
    """``h = W0 x + (scale / r) B A x`` applied to row vectors on the last axis.

    ``scale`` is the LoRA alpha when ``rank`` is given, otherwise the already
    divided factor alpha / r.
    """
    r = a.shape[0]
    if b.shape[1] != r or a.shape[1] != w0.shape[1] or b.shape[0] != w0.shape[0]:
        raise DimensionError(f"LoRA shapes W0 {w0.shape}, A {a.shape}, B {b.shape} are inconsistent")
    if rank is not None:
        if rank != r:
            raise DimensionError(f"rank {rank} does not match A with {r} rows")
        scale = scale / rank
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    h = T.matmul(flat, w0.T)
    if bias is not None:
        h = h + bias
    delta = T.matmul(T.matmul(flat, a.T), b.T)
    h = h + T.scale(delta, scale)
    return h.reshape(*lead, w0.shape[0])


def adapter_forward(h: Tensor, w_down: Tensor, w_up: Tensor, b_down: Tensor | None = None,
                    b_up: Tensor | None = None) -> Tensor:
    """Residual bottleneck ``h + W_up gelu(W_down h + b_down) + b_up``."""
    d = h.shape[-1]
    if w_down.shape[1] != d or w_up.shape[0] != d or w_up.shape[1] != w_down.shape[0]:
        raise DimensionError(f"adapter shapes down {w_down.shape}, up {w_up.shape} do not fit width {d}")
    lead = h.shape[:-1]
    flat = h.reshape(-1, d)
    z = T.matmul(flat, w_down.T)
    if b_down is not None:
        z = z + b_down
    out = T.matmul(T.gelu(z), w_up.T)
    if b_up is not None:
        out = out + b_up
    return h + out.reshape(*lead, d)


def inject_prompts(layer_index: int, tokens: Tensor, prompts: Tensor) -> Tensor:
    """Layer 0 inserts prompts after the class token; deeper layers overwrite
    the prompt slots with their own prompts (sequence length stays fixed)."""
    b, s, d = tokens.shape
    p = prompts.shape[0]
    if prompts.shape[1] != d:
        raise DimensionError(f"prompt width {prompts.shape[1]} does not match token width {d}")
    expanded = T.broadcast_to(prompts.reshape(1, p, d), (b, p, d))
    cls = tokens[:, :1, :]
    if layer_index == 0:
        return T.concat([cls, expanded, tokens[:, 1:, :]], axis=1)
    if s < 1 + p:
        raise DimensionError(f"sequence of length {s} has no room for {p} prompts")
    return T.concat([cls, expanded, tokens[:, 1 + p:, :]], axis=1)


# -- attaching strategies --------------------------------------------------

def _source_head(source) -> tuple[np.ndarray, np.ndarray]:
    from .models import Model, ParameterStore

    if isinstance(source, (str, Path)):
        from .data_io import load_checkpoint

        source = load_checkpoint(source)
    if isinstance(source, Model):
        source = source.params
    if isinstance(source, ParameterStore):
        if not all(n in source for n in HEAD):
            raise InitError("head source has no head.weight/head.bias")
        return source["head.weight"].data, source["head.bias"].data
    if isinstance(source, tuple) and len(source) == 2:
        return np.asarray(source[0]), np.asarray(source[1])
    raise InitError(f"cannot read a head from {type(source).__name__}")


def attach(model, strategy: Strategy, head_init: HeadInit | None = None,
           rng: np.random.Generator | None = None, num_classes: int | None = None):
    """Configure ``model`` in place for finetuning and return it.

    Adds the strategy's new tensors, initialises the head and sets the
    trainable flags. A model can be attached once.
    """
    from .models import add_head

    head_init = head_init or HeadInit()
    if model.strategy is not None:
        raise UnsupportedError(f"model already has strategy {model.strategy.kind!r} attached")
    if strategy.kind in ("vpt", "lora", "adapter") and model.kind != "vit":
        raise UnsupportedError(f"{strategy.kind} needs a ViT backbone")
    if strategy.kind == "vpt" and head_init.scheme == "roli":
        raise UnsupportedError("RoLI is not offered for VPT: zero prompts still change attention")
    if rng is None:
        rng = np.random.default_rng(0)
    p = model.params
    dtype = model.dtype
    d = p["head.weight"].shape[1]
    zero_new = head_init.scheme == "roli" and strategy.roli_zero_both

    if head_init.scheme == "ranli":
        add_head(p, d, num_classes or model.num_classes, rng, dtype)
    else:
        w, b = _source_head(head_init.source)
        target = num_classes or model.num_classes
        if w.shape != (target, d) or b.shape != (target,):
            raise InitError(f"head source shape {w.shape}/{b.shape} does not match target ({target}, {d})")
        for name in HEAD:
            p.remove(name)
        p.add("head.weight", w.astype(dtype), "head-weight")
        p.add("head.bias", b.astype(dtype), "head-bias")

    if strategy.kind == "adapter":
        if d % strategy.reduction:
            raise ConfigError(f"reduction {strategy.reduction} does not divide width {d}")
        r = d // strategy.reduction
        for i in range(model.config.depth):
            pre = f"blocks.{i}.adapter"
            down = np.zeros((r, d), dtype) if zero_new else he_uniform(rng, (r, d), dtype=dtype)
            p.add(f"{pre}.down.weight", down, "adapter-down")
            p.add(f"{pre}.down.bias", np.zeros(r, dtype), "bias")
            p.add(f"{pre}.up.weight", np.zeros((d, r), dtype), "adapter-up")
            p.add(f"{pre}.up.bias", np.zeros(d, dtype), "bias")
    elif strategy.kind == "lora":
        r = strategy.lora_rank
        targets = {"query": "q", "value": "v"}
        for i in range(model.config.depth):
            for target in strategy.lora_targets:
                pre = f"blocks.{i}.attn.{targets[target]}"
                if zero_new:
                    a = np.zeros((r, d), dtype)
                else:
                    a = rng.normal(0.0, 1.0 / math.sqrt(d), size=(r, d)).astype(dtype)
                p.add(f"{pre}.lora_A", a, "lora-A")
                p.add(f"{pre}.lora_B", np.zeros((d, r), dtype), "lora-B")
    elif strategy.kind == "vpt":
        bound = math.sqrt(6.0 / (d + strategy.vpt_tokens))
        for i in range(model.config.depth):
            p.add(f"prompts.{i}", uniform(rng, (strategy.vpt_tokens, d), bound, dtype=dtype), "prompt")

    for name in p:
        p.set_trainable(name, _is_tunable(name, p.role(name), strategy.kind))
    model.strategy = strategy
    return model


def _is_tunable(name: str, role: str, kind: str) -> bool:
    if name in HEAD or kind == "fullft":
        return True
    if kind == "adapter":
        return ".adapter." in name
    if kind == "lora":
        return role in ("lora-A", "lora-B")
    if kind == "bias":
        return role == "bias"
    if kind == "vpt":
        return role == "prompt"
    return False


def partition(model) -> tuple[list[str], list[str]]:
    """(frozen names, tunable names); disjoint and exhaustive."""
    return model.params.frozen_names(), model.params.trainable_names()
