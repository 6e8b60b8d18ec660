"""LoRA weight adapters and their composition with NoRA (NoRA++)."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapter import NoraConfig, attach_nora
from .errors import ConfigError, DimensionError
from .nn import Linear, Module, resolve_sites
from .rational import GroupedRationalLayer
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float | None = None  # None -> alpha = rank, i.e. scaling 1
    sites: tuple = ("attn.q", "attn.v")


class LoraLinear(Module):
    """Frozen ``base`` plus ``scaling * B A``; A is (r, k) Gaussian, B is (d, r) zero."""

    def __init__(self, base: Linear, rank: int, alpha: float | None, rng: np.random.Generator):
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}", field="adaptation.plan.lora.rank")
        self.base = base
        base.freeze()
        d, k = base.weight.shape
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.scaling = self.alpha / rank
        self.A = Parameter(rng.normal(0.0, 1.0 / np.sqrt(k), size=(rank, k)), decay=True, role="lora_A")
        self.B = Parameter(np.zeros((d, rank)), decay=True, role="lora_B")

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: Tensor) -> Tensor:
        return lora_forward(self, x)

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)

    def merged(self) -> Linear:
        out = copy.deepcopy(self.base)
        out.weight = Parameter(self.base.weight.data + self.delta_weight(), trainable=False, role="weight")
        return out


def lora_forward(delta: LoraLinear, x) -> Tensor:
    """``W0 x + scaling * B (A x)`` for row-vector inputs ``x`` of shape (..., k)."""
    x = T.tensor(x)
    if x.shape[-1] != delta.A.shape[1]:
        raise DimensionError(f"LoRA expects last dim {delta.A.shape[1]}, got {x.shape}")
    y = delta.base(x)
    low = T.matmul(T.matmul(x, delta.A.T), delta.B.T)
    return y + low * delta.scaling


def attach_lora(model: Module, cfg: LoraConfig, rng: np.random.Generator) -> list[str]:
    sites = resolve_sites(model, cfg.sites, Linear, field="adaptation.plan.lora.sites")
    for name in sites:
        model.set_submodule(name, LoraLinear(model.get_submodule(name), cfg.rank, cfg.alpha, rng))
    return sites


def compose_norapp(model: Module, nora_cfg: NoraConfig, lora_cfg: LoraConfig, rng=None) -> Module:
    """Copy of ``model`` with NoRA on activation sites and LoRA on linear sites.

    Every other parameter of the copy keeps its trainable flag as given; call
    on a model whose backbone is already frozen.
    """
    return attach_norapp(copy.deepcopy(model), nora_cfg, lora_cfg, rng)


def attach_norapp(out: Module, nora_cfg: NoraConfig, lora_cfg: LoraConfig, rng=None) -> Module:
    """In-place form of :func:`compose_norapp`."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    try:
        nora_sites = resolve_sites(out, nora_cfg.sites, GroupedRationalLayer, field="adaptation.plan.nora.sites")
        lora_sites = resolve_sites(out, lora_cfg.sites, Linear, field="adaptation.plan.lora.sites")
    except ConfigError as exc:
        raise ConfigError(f"invalid NoRA++ targets: {exc.message}", field=exc.field) from None
    clash = set(nora_sites) & set(lora_sites)
    if clash:
        raise ConfigError(f"sites targeted by both adapters: {sorted(clash)}")
    for name in nora_sites:
        attach_nora(out.get_submodule(name), nora_cfg.rank, nora_cfg.mode, rng)
    attach_lora(out, lora_cfg, rng)
    return out
