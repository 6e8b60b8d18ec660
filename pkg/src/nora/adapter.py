"""NoRA: low-rank perturbations of grouped rational coefficients.

Each adapted polynomial of group ``g`` gets ``A_g`` (d x r) and ``B_g`` (r x 1)
with ``d`` the coefficient count, so the update ``A_g B_g`` is one entry per
coefficient.  The factors of all groups of a layer are stored batched as
(G, d, r) and (G, r, 1).
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Module
from .rational import GroupedRationalLayer, RationalCoeffs
from .tensor import Parameter, Tensor

MODES = ("both", "numerator-only", "denominator-only", "const-only")
INIT_STD = 0.02


class LowRankDelta(Module):
    """Batched factors ``A`` (G, d, r) and ``B`` (G, r, 1); ``B`` starts at zero."""

    def __init__(self, groups: int, d: int, rank: int, rng: np.random.Generator, std: float = INIT_STD):
        if rank < 1:
            raise ConfigError(f"rank must be >= 1, got {rank}", field="rank")
        self.d = d
        self.rank = rank
        self.A = Parameter(rng.normal(0.0, std, size=(groups, d, rank)), decay=True, role="nora_A")
        self.B = Parameter(np.zeros((groups, rank, 1)), decay=False, role="nora_B")

    def value(self) -> Tensor:
        """Effective update, (G, d)."""
        G = self.A.shape[0]
        return T.matmul(self.A, self.B).reshape(G, self.d)

    def group(self, g: int) -> tuple[np.ndarray, np.ndarray]:
        return self.A.data[g], self.B.data[g]


class NoraDelta(Module):
    """Adapter state of one grouped rational layer."""

    def __init__(self, groups: int, m: int, n: int, rank: int, mode: str, rng: np.random.Generator):
        if mode not in MODES:
            raise ConfigError(f"unknown NoRA mode {mode!r}; expected one of {MODES}", field="mode")
        self.mode = mode
        self.rank = rank
        self.m, self.n = m, n
        self.p = self.q = None
        self.const_a = self.const_b = None
        if mode == "const-only":
            self.const_a = Parameter(np.zeros((groups, 1)), decay=False, role="nora_const")
            self.const_b = Parameter(np.zeros((groups, 1)), decay=False, role="nora_const")
            return
        if mode in ("both", "numerator-only"):
            self.p = LowRankDelta(groups, m + 1, rank, rng)
        if mode in ("both", "denominator-only"):
            self.q = LowRankDelta(groups, n + 1, rank, rng)

    def apply(self, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        if a.shape[1] != self.m + 1 or b.shape[1] != self.n + 1:
            raise DimensionError(f"delta built for degrees {(self.m, self.n)}, got tables {a.shape}, {b.shape}")
        if self.mode == "const-only":
            ea = np.zeros((1, self.m + 1))
            eb = np.zeros((1, self.n + 1))
            ea[0, 0] = eb[0, 0] = 1.0
            return a + self.const_a * ea, b + self.const_b * eb
        if self.p is not None:
            a = a + self.p.value()
        if self.q is not None:
            b = b + self.q.value()
        return a, b

    def per_group_count(self) -> int:
        if self.mode == "const-only":
            return 2
        r = self.rank
        total = 0
        if self.p is not None:
            total += (self.m + 1) * r + r
        if self.q is not None:
            total += (self.n + 1) * r + r
        return total


def per_group_count(m: int, n: int, rank: int, mode: str) -> int:
    """Trainable entries one NoRA group adds, as a closed form."""
    if mode == "const-only":
        return 2
    num = (m + 1) * rank + rank
    den = (n + 1) * rank + rank
    return {"both": num + den, "numerator-only": num, "denominator-only": den}[mode]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def attach_nora(layer: GroupedRationalLayer, rank: int, mode: str = "both", rng=None) -> GroupedRationalLayer:
    """In-place version of :func:`init_nora`."""
    m, n = layer.degrees
    if mode != "const-only":
        dims = {"both": (m + 1, n + 1), "numerator-only": (m + 1,), "denominator-only": (n + 1,)}.get(mode, ())
        if dims and rank >= min(dims):
            warnings.warn(f"rank {rank} >= coefficient count {min(dims)}; extra rank adds no expressivity", stacklevel=3)
    layer.a.trainable = False
    layer.b.trainable = False
    layer.delta = NoraDelta(layer.num_groups, m, n, rank, mode, _rng(rng))
    return layer


def init_nora(layer: GroupedRationalLayer, rank: int, mode: str = "both", rng=None) -> GroupedRationalLayer:
    """Copy of ``layer`` with frozen base coefficients and a zero-effect NoRA delta.

    ``A`` entries are drawn from N(0, 0.02^2) using ``rng`` (a Generator or a
    seed); ``B`` and the const-only offsets start at exactly zero.
    """
    return attach_nora(copy.deepcopy(layer), rank, mode, rng)


def effective_coeffs(base: RationalCoeffs, delta: NoraDelta | None, group: int = 0) -> RationalCoeffs:
    """Base coefficients of one group plus that group's adapter update."""
    if delta is None:
        return base
    m, n = base.degrees
    if (m, n) != (delta.m, delta.n):
        raise DimensionError(f"delta degrees {(delta.m, delta.n)} do not match coefficients {(m, n)}")
    a, b = base.a.copy(), base.b.copy()
    if delta.mode == "const-only":
        a[0] += delta.const_a.data[group, 0]
        b[0] += delta.const_b.data[group, 0]
    else:
        if delta.p is not None:
            A, B = delta.p.group(group)
            a = a + (A @ B)[:, 0]
        if delta.q is not None:
            A, B = delta.q.group(group)
            b = b + (A @ B)[:, 0]
    return RationalCoeffs(a, b)


def merge(layer: GroupedRationalLayer) -> GroupedRationalLayer:
    """Fold the delta into the base coefficients; the result has nothing trainable."""
    out = copy.deepcopy(layer)
    a, b = layer.effective_arrays()
    out.a = Parameter(a.copy(), trainable=False, decay=False, role="rational")
    out.b = Parameter(b.copy(), trainable=False, decay=False, role="rational")
    out.delta = None
    return out


def strip_deltas(model: Module) -> Module:
    """Copy of ``model`` with every NoRA delta removed, leaving base coefficients in place."""
    out = copy.deepcopy(model)
    for _, mod in out.named_modules():
        if isinstance(mod, GroupedRationalLayer):
            mod.delta = None
    return out


def expand_groups(layer: GroupedRationalLayer, new_groups: int) -> GroupedRationalLayer:
    """Split every group into ``new_groups / G`` children carrying copies of its state."""
    G, C = layer.num_groups, layer.channels
    if new_groups < G or new_groups % G or C % new_groups:
        raise ConfigError(f"cannot expand {G} groups to {new_groups} over {C} channels", field="groups")
    k = new_groups // G
    out = copy.deepcopy(layer)
    out.num_groups = new_groups

    def rep(p: Parameter | None, axis: int = 0) -> Parameter | None:
        if p is None:
            return None
        q = Parameter(np.repeat(p.data, k, axis=axis), trainable=p.trainable, decay=p.decay, role=p.role)
        return q

    out.a = rep(layer.a)
    out.b = rep(layer.b)
    d = out.delta
    if d is not None:
        d.const_a, d.const_b = rep(layer.delta.const_a), rep(layer.delta.const_b)
        for name in ("p", "q"):
            src = getattr(layer.delta, name)
            if src is not None:
                low = getattr(d, name)
                low.A, low.B = rep(src.A), rep(src.B)
    return out


def count_trainable(model: Module, include_head: bool = True, head: str = "head") -> int:
    """Number of trainable scalar entries; ``include_head=False`` skips ``head.*``."""
    total = 0
    for name, p in model.named_parameters():
        if not p.trainable:
            continue
        if not include_head and (name == head or name.startswith(head + ".")):
            continue
        total += p.size
    return total


@dataclass(frozen=True)
class NoraConfig:
    rank: int = 2
    mode: str = "both"
    sites: tuple = ("all",)
