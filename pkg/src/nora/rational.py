"""Safe rational activations ``P(x) / (1 + |Q(x)|)`` shared over channel groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .nn import Module
from .tensor import Parameter, Tensor

MAX_DEGREE = 8


@dataclass(frozen=True)
class RationalCoeffs:
    """Numerator ``a`` (a_0..a_m) and denominator ``b`` (b_0..b_n), ascending powers."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).reshape(-1)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        if a.size == 0 or b.size == 0:
            raise ConfigError("coefficient vectors must be non-empty")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ConfigError("coefficients must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def degrees(self) -> tuple[int, int]:
        return self.a.size - 1, self.b.size - 1

    def __call__(self, x) -> np.ndarray:
        return rational_value(self.a, self.b, x)

    def derivative(self, x) -> np.ndarray:
        return rational_derivative(self.a, self.b, x)

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RationalCoeffs":
        return cls(np.asarray(d["a"]), np.asarray(d["b"]))

    @classmethod
    def identity(cls, n: int = 0) -> "RationalCoeffs":
        return cls(np.array([0.0, 1.0]), np.zeros(n + 1))


def horner(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_i coeffs[..., i] x^i``; coeffs broadcast against ``x``."""
    out = np.broadcast_to(coeffs[..., -1], np.broadcast_shapes(coeffs.shape[:-1], np.shape(x))).copy()
    for i in range(coeffs.shape[-1] - 2, -1, -1):
        out *= x
        out += coeffs[..., i]
    return out


def _derivative_coeffs(coeffs: np.ndarray) -> np.ndarray:
    d = coeffs.shape[-1]
    if d == 1:
        return np.zeros_like(coeffs)
    return coeffs[..., 1:] * np.arange(1, d, dtype=np.float64)


def rational_value(a, b, x) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return horner(a, x) / (1.0 + np.abs(horner(b, x)))


def rational_derivative(a, b, x) -> np.ndarray:
    """Analytic d/dx of the safe rational, with sign(0) := 0 at the kink."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    p, q = horner(a, x), horner(b, x)
    dp, dq = horner(_derivative_coeffs(a), x), horner(_derivative_coeffs(b), x)
    d = 1.0 + np.abs(q)
    return dp / d - p * np.sign(q) * dq / (d * d)


def _check_degrees(m: int, n: int) -> None:
    if not (0 <= m <= MAX_DEGREE and 0 <= n <= MAX_DEGREE):
        raise ConfigError(f"degrees (m, n) = ({m}, {n}) must lie in [0, {MAX_DEGREE}]", field="degrees")


def grouped_rational(x, a, b) -> Tensor:
    """Apply group ``g`` 's rational to channel block ``g`` of the last axis of ``x``.

    ``a`` is (G, m+1) and ``b`` is (G, n+1); the last dimension of ``x`` must be
    a multiple of G.  Coefficient adjoints are summed over every position
    that shares the group.
    """
    x, a, b = T.tensor(x), T.tensor(a), T.tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"coefficient tables must be (G, m+1) and (G, n+1), got {a.shape}, {b.shape}")
    G = a.shape[0]
    C = x.shape[-1] if x.ndim else 0
    if x.ndim == 0 or C % G:
        raise DimensionError(f"last dimension {x.shape} is not divisible into {G} groups")
    cg = C // G
    xd, ad, bd = x.data, a.data, b.data
    a_ch = np.repeat(ad, cg, axis=0)
    b_ch = np.repeat(bd, cg, axis=0)
    # overflow is reported below as a NumericError, not a warning
    with np.errstate(over="ignore", invalid="ignore"):
        p = horner(a_ch, xd)
        q = horner(b_ch, xd)
        den = 1.0 + np.abs(q)
        out = p / den
    if not np.all(np.isfinite(out)):
        raise NumericError(
            f"rational activation overflowed for input magnitude max|x| = {np.max(np.abs(xd)):.6g}",
            max_abs_input=float(np.max(np.abs(xd))),
        )

    def back(g):
        s = np.sign(q)
        gx = ga = gb = None
        if x.requires_grad:
            dp = horner(_derivative_coeffs(a_ch), xd)
            dq = horner(_derivative_coeffs(b_ch), xd)
            gx = g * (dp - out * s * dq) / den
        if a.requires_grad or b.requires_grad:
            xr = xd.reshape(-1, G, cg)
            u = (g / den).reshape(-1, G, cg)
            v = (-g * out * s / den).reshape(-1, G, cg)
            if a.requires_grad:
                ga = _power_sums(u, xr, ad.shape[1])
            if b.requires_grad:
                gb = _power_sums(v, xr, bd.shape[1])
        return gx, ga, gb

    return T.apply_op("rational", out, (x, a, b), back)


def _power_sums(w: np.ndarray, x: np.ndarray, d: int) -> np.ndarray:
    out = np.empty((x.shape[1], d))
    pw = np.ones_like(x)
    for i in range(d):
        out[:, i] = (w * pw).sum(axis=(0, 2))
        if i + 1 < d:
            pw = pw * x
    return out


def eval_rational(c: RationalCoeffs, x) -> Tensor:
    """Elementwise safe rational of fixed coefficients; differentiable in ``x``."""
    x = T.tensor(x)
    flat = x.reshape(-1, 1) if x.ndim else x.reshape(1, 1)
    out = grouped_rational(flat, c.a[None, :], c.b[None, :])
    return out.reshape(x.shape)


class GroupedRationalLayer(Module):
    """G learnable safe rationals over C channels; channel c uses group ``c*G // C``.

    ``delta`` optionally holds a :class:`nora.adapter.NoraDelta` whose effective
    update is added to the base coefficients on every forward pass.
    """

    def __init__(self, channels: int, num_groups: int, m: int, n: int, init: RationalCoeffs | None = None):
        _check_degrees(m, n)
        if num_groups < 1 or channels % num_groups:
            raise ConfigError(f"num_groups={num_groups} must divide channels={channels}", field="groups")
        self.channels = channels
        self.num_groups = num_groups
        self.m, self.n = m, n
        if init is None:
            init = RationalCoeffs(np.eye(1, m + 1, min(1, m)).reshape(-1), np.zeros(n + 1))
        if init.degrees != (m, n):
            raise ConfigError(f"init coefficients have degrees {init.degrees}, layer needs {(m, n)}")
        self.a = Parameter(np.tile(init.a, (num_groups, 1)), decay=False, role="rational")
        self.b = Parameter(np.tile(init.b, (num_groups, 1)), decay=False, role="rational")
        self.delta = None

    @property
    def degrees(self) -> tuple[int, int]:
        return self.m, self.n

    def group_of_channel(self, c: int) -> int:
        return c * self.num_groups // self.channels

    def channel_slice(self, g: int) -> slice:
        cg = self.channels // self.num_groups
        return slice(g * cg, (g + 1) * cg)

    def coefficient_tensors(self) -> tuple[Tensor, Tensor]:
        if self.delta is None:
            return self.a, self.b
        return self.delta.apply(self.a, self.b)

    def effective_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        with T.no_grad():
            a, b = self.coefficient_tensors()
        return a.data, b.data

    def group_coeffs(self, g: int) -> RationalCoeffs:
        a, b = self.effective_arrays()
        return RationalCoeffs(a[g], b[g])

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise DimensionError(f"expected last dimension {self.channels}, got {x.shape}")
        a, b = self.coefficient_tensors()
        return grouped_rational(x, a, b)

    def value(self, x: np.ndarray) -> np.ndarray:
        """Numpy evaluation, no graph recorded."""
        with T.no_grad():
            return self.forward(Tensor(x)).data

    def derivative_by_group(self, x: np.ndarray) -> np.ndarray:
        """(G, len(x)) table of phi_g'(x) for a 1-D grid ``x``."""
        a, b = self.effective_arrays()
        return np.stack([rational_derivative(a[g], b[g], x) for g in range(self.num_groups)])

    def values_by_group(self, x: np.ndarray) -> np.ndarray:
        a, b = self.effective_arrays()
        return np.stack([rational_value(a[g], b[g], x) for g in range(self.num_groups)])


def eval_grouped(layer: GroupedRationalLayer, x) -> Tensor:
    return layer(T.tensor(x))


def coeff_gradients(layer: GroupedRationalLayer, x, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * layer(x))`` w.r.t. every trainable tensor of the layer.

    Base coefficients are included even when frozen; delta factors come out
    through the chain rule of the effective-coefficient computation.
    """
    x = T.tensor(x)
    params = dict(layer.named_parameters())
    saved = {k: p.requires_grad for k, p in params.items()}
    try:
        for p in params.values():
            p.requires_grad = True
            p.grad = None
        out = layer(Tensor(x.data))
        (out * Tensor(np.asarray(upstream, dtype=np.float64))).sum().backward()
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
            p.grad = None
