"""Small module system on top of :mod:`nora.tensor`."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor


class Module:
    """Container of parameters and submodules, discovered by attribute order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __deepcopy__(self, memo):
        new = object.__new__(type(self))
        memo[id(self)] = new
        for key, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                value = copy.deepcopy(value, memo)
            elif isinstance(value, list) and all(isinstance(v, Module) for v in value):
                value = [copy.deepcopy(v, memo) for v in value]
            elif not isinstance(value, (int, float, str, bool, type(None))):
                value = copy.deepcopy(value, memo)
            new.__dict__[key] = value
        return new

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(prefix=name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix=f"{prefix}{key}.")

    def _resolve(self, path: str):
        obj = self
        for seg in path.split(".") if path else []:
            try:
                obj = obj[int(seg)] if isinstance(obj, list) else vars(obj)[seg]
            except (KeyError, IndexError, ValueError):
                raise ConfigError(f"no submodule named {path!r}", field="sites") from None
        return obj

    def get_submodule(self, name: str) -> "Module":
        obj = self._resolve(name)
        if not isinstance(obj, Module):
            raise ConfigError(f"{name!r} is not a module", field="sites")
        return obj

    def set_submodule(self, name: str, module: "Module") -> None:
        parent_name, _, leaf = name.rpartition(".")
        parent = self._resolve(parent_name)
        if isinstance(parent, list):
            parent[int(leaf)] = module
        elif leaf in vars(parent):
            setattr(parent, leaf, module)
        else:
            raise ConfigError(f"no submodule named {name!r}", field="sites")

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        std = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.normal(0.0, std, size=(out_features, in_features)), role="weight")
        self.bias = Parameter(np.zeros(out_features), role="bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        y = T.matmul(x, self.weight.T)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(dim), decay=False, role="norm")
        self.shift = Parameter(np.zeros(dim), decay=False, role="norm")

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class GELU(Module):
    """Fixed exact GELU."""

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(x)

    @staticmethod
    def value(x: np.ndarray) -> np.ndarray:
        return T.gelu(Tensor(x)).data

    @staticmethod
    def derivative(x: np.ndarray) -> np.ndarray:
        from scipy import special

        x = np.asarray(x, dtype=np.float64)
        return 0.5 * (1.0 + special.erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


def _matches(name: str, pattern: str) -> bool:
    from fnmatch import fnmatchcase

    return fnmatchcase(name, pattern) or fnmatchcase(name, "*." + pattern)


def resolve_sites(model: Module, patterns, kind: type, field: str = "sites") -> list[str]:
    """Names of submodules selected by ``patterns`` (``"all"`` or fnmatch globs).

    A glob may be given as a suffix (``attn.q`` matches ``blocks.0.attn.q``).
    Every selected module must be of type ``kind``, and every pattern must
    select something.
    """
    if isinstance(patterns, str):
        patterns = [patterns]
    modules = [(n, m) for n, m in model.named_modules() if n]
    if list(patterns) == ["all"]:
        chosen = [n for n, m in modules if isinstance(m, kind)]
        if not chosen:
            raise ConfigError(f"sites 'all' found no {kind.__name__} in the model", field=field)
        return chosen
    chosen: list[str] = []
    for pat in patterns:
        hits = [(n, m) for n, m in modules if _matches(n, pat)]
        if not hits:
            raise ConfigError(f"site pattern {pat!r} matches no module", field=field)
        for n, m in hits:
            if not isinstance(m, kind):
                raise ConfigError(f"site {n!r} is a {type(m).__name__}, expected {kind.__name__}", field=field)
            if n not in chosen:
                chosen.append(n)
    return chosen
