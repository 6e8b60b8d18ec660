"""Desk-scale architectures and adaptation plans."""

from __future__ import annotations

import copy
import functools
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .adapter import NoraConfig, attach_nora, count_trainable
from .errors import ConfigError, DimensionError
from .lora import LoraConfig, LoraLinear, attach_lora, attach_norapp
from .nn import GELU, LayerNorm, Linear, Module, resolve_sites
from .rational import GroupedRationalLayer, RationalCoeffs
from .tensor import Parameter, Tensor

ARCHS = ("mlp", "mini-transformer")
ACTIVATIONS = ("fixed-gelu", "grouped-rational")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mini-transformer"
    input_dim: int = 16
    depth: int = 2
    hidden: int = 32
    heads: int = 1
    ffn_mult: int = 2
    tokens: int = 4
    activation: str = "fixed-gelu"
    groups: int = 8
    m: int = 5
    n: int = 4
    head_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}", field="model.arch")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}", field="model.activation")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0", field="model.depth")
        if self.hidden < 1 or self.head_classes < 2:
            raise ConfigError("hidden must be >= 1 and head_classes >= 2", field="model")
        # groups also apply when a fixed-GELU model is later swapped to rationals
        if self.groups < 1 or self.activation_width % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide the activation width {self.activation_width}", field="model.groups"
            )
        if self.arch == "mini-transformer":
            if self.hidden % self.heads:
                raise ConfigError(f"heads={self.heads} must divide hidden={self.hidden}", field="model.heads")
            if self.input_dim % self.tokens:
                raise ConfigError(f"tokens={self.tokens} must divide input_dim={self.input_dim}", field="model.tokens")

    @property
    def activation_width(self) -> int:
        return self.hidden * self.ffn_mult if self.arch == "mini-transformer" else self.hidden


@functools.lru_cache(maxsize=8)
def default_base_coeffs(m: int = 5, n: int = 4, interval: tuple = (-3.0, 3.0)) -> RationalCoeffs:
    """GELU fit used as the pretrained rational when none is supplied."""
    from .fit import FitSpec, fit_rational

    return fit_rational(FitSpec(target="gelu", interval=interval, degrees=(m, n))).coeffs


def make_activation(cfg: ModelConfig, width: int, coeffs: RationalCoeffs | None = None) -> Module:
    if cfg.activation == "fixed-gelu":
        return GELU()
    coeffs = coeffs or default_base_coeffs(cfg.m, cfg.n)
    return GroupedRationalLayer(width, cfg.groups, cfg.m, cfg.n, init=coeffs)


class MLPBlock(Module):
    def __init__(self, fin: int, fout: int, act: Module, rng):
        self.linear = Linear(fin, fout, rng)
        self.act = act

    def forward(self, x):
        return self.act(self.linear(x))


class MLPClassifier(Module):
    """``[Linear -> activation] x depth -> head``."""

    def __init__(self, cfg: ModelConfig, coeffs: RationalCoeffs | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        dims = [cfg.input_dim] + [cfg.hidden] * cfg.depth
        self.layers = [MLPBlock(dims[i], dims[i + 1], make_activation(cfg, cfg.hidden, coeffs), rng) for i in range(cfg.depth)]
        self.head = Linear(dims[-1], cfg.head_classes, rng)

    def features(self, x: Tensor, capture: dict | None = None) -> Tensor:
        h = T.tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if capture is not None:
                capture[f"layers.{i}.act"] = h.data
        return h

    def forward(self, x, capture: dict | None = None) -> Tensor:
        return self.head(self.features(x, capture))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        N, L, C = x.shape
        H, dh = self.heads, C // self.heads

        def split(t):
            return t.reshape(N, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        y = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(N, L, C)
        return self.o(y)


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, act: Module, rng):
        self.fc1 = Linear(dim, dim * mult, rng)
        self.act = act
        self.fc2 = Linear(dim * mult, dim, rng)

    def forward(self, x, capture: dict | None = None, name: str = "") -> Tensor:
        h = self.act(self.fc1(x))
        if capture is not None:
            capture[name] = h.data
        return self.fc2(h)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mult: int, act: Module, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, mult, act, rng)

    def forward(self, x, capture=None, name=""):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x), capture, name)


class MiniTransformer(Module):
    """Patch-flattened input -> pre-norm blocks -> mean pool -> head."""

    def __init__(self, cfg: ModelConfig, coeffs: RationalCoeffs | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        C = cfg.hidden
        patch = cfg.input_dim // cfg.tokens
        self.embed = Linear(patch, C, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.tokens, C)), role="pos")
        self.blocks = [
            Block(C, cfg.heads, cfg.ffn_mult, make_activation(cfg, cfg.activation_width, coeffs), rng)
            for _ in range(cfg.depth)
        ]
        self.norm = LayerNorm(C)
        self.head = Linear(C, cfg.head_classes, rng)

    def features(self, x, capture: dict | None = None) -> Tensor:
        x = T.tensor(x)
        cfg = self.config
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise DimensionError(f"expected (N, {cfg.input_dim}) inputs, got {x.shape}")
        h = self.embed(x.reshape(x.shape[0], cfg.tokens, cfg.input_dim // cfg.tokens)) + self.pos
        for i, blk in enumerate(self.blocks):
            h = blk(h, capture, f"blocks.{i}.ffn.act")
        return self.norm(h).mean(axis=1)

    def forward(self, x, capture: dict | None = None) -> Tensor:
        return self.head(self.features(x, capture))


def build(cfg: ModelConfig, coeffs: RationalCoeffs | None = None) -> Module:
    """Deterministic model from ``cfg``; ``coeffs`` seeds every rational group."""
    cfg.validate()
    return (MLPClassifier if cfg.arch == "mlp" else MiniTransformer)(cfg, coeffs)


def activation_sites(model: Module) -> list[str]:
    return [n for n, m in model.named_modules() if isinstance(m, (GELU, GroupedRationalLayer))]


def swap_activations(model: Module, coeffs: RationalCoeffs, groups: int | None = None) -> Module:
    """Copy of ``model`` with each fixed GELU replaced by a grouped rational seeded with ``coeffs``."""
    out = copy.deepcopy(model)
    cfg = out.config
    m, n = coeffs.degrees
    G = groups or cfg.groups
    width = cfg.activation_width
    for name in activation_sites(out):
        if isinstance(out.get_submodule(name), GELU):
            layer = GroupedRationalLayer(width, G, m, n, init=coeffs)
            out.set_submodule(name, layer)
    out.config = replace(cfg, activation="grouped-rational", groups=G, m=m, n=n)
    return out


def activation_outputs(model: Module, x) -> dict[str, np.ndarray]:
    """Outputs of every activation site on ``x``, keyed by site name."""
    capture: dict[str, np.ndarray] = {}
    with T.no_grad():
        model(T.tensor(x), capture=capture)
    return capture


PLAN_MODES = ("full", "head-only", "nora", "lora", "nora++")


@dataclass(frozen=True)
class AdaptationPlan:
    mode: str = "nora"
    nora: NoraConfig = field(default_factory=NoraConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    train_head: bool = True
    train_norms: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in PLAN_MODES:
            raise ConfigError(f"adaptation mode must be one of {PLAN_MODES}", field="adaptation.plan.mode")


def apply_plan(model: Module, plan: AdaptationPlan) -> Module:
    """Copy of ``model`` with trainable flags (and adapters) set according to ``plan``."""
    plan.validate()
    rng = np.random.default_rng(plan.seed)
    out = copy.deepcopy(model)
    if plan.mode == "full":
        return out.unfreeze()
    out.freeze()
    if plan.mode == "nora":
        for name in resolve_sites(out, plan.nora.sites, GroupedRationalLayer, field="adaptation.plan.nora.sites"):
            attach_nora(out.get_submodule(name), plan.nora.rank, plan.nora.mode, rng)
    elif plan.mode == "lora":
        attach_lora(out, plan.lora, rng)
    elif plan.mode == "nora++":
        attach_norapp(out, plan.nora, plan.lora, rng)
    if plan.train_head:
        out.head.unfreeze()
    if plan.train_norms:
        for _, mod in out.named_modules():
            if isinstance(mod, LayerNorm):
                mod.unfreeze()
    return out


def head_parameter_count(model: Module) -> int:
    return sum(p.size for p in model.head.parameters())


def total_parameter_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())


__all__ = [
    "ModelConfig",
    "AdaptationPlan",
    "build",
    "apply_plan",
    "swap_activations",
    "activation_sites",
    "activation_outputs",
    "count_trainable",
    "MLPClassifier",
    "MiniTransformer",
    "LoraLinear",
]
