"""Lipschitz bounds, the activation-deviation bound, and an adaptability score.

The Lipschitz and deviation analyses apply to :class:`MLPClassifier` models,
where the network is a plain chain ``head o (phi_L o W_L) o ... o (phi_1 o W_1)``.
The adaptability score works on any model that exposes activation captures.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .models import MLPClassifier, activation_outputs, activation_sites
from .nn import GELU, Identity, Module
from .rational import GroupedRationalLayer
from .tensor import Tensor

GRID_POINTS = 10_000
POWER_TOL = 1e-8
POWER_MAX_ITERS = 10_000
SLACK = 1e-9


def spectral_norm(W: np.ndarray, tol: float = POWER_TOL, max_iters: int = POWER_MAX_ITERS) -> tuple[float, bool, int]:
    """Largest singular value by power iteration on ``W^T W``.

    Returns ``(sigma, converged, iterations)``; convergence means the relative
    change of the estimate fell below ``tol``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        return 0.0, True, 0
    v = np.random.default_rng(0).normal(size=W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for it in range(1, max_iters + 1):
        w = W.T @ (W @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0, True, it
        v = w / nrm
        new = float(np.sqrt(nrm))
        if abs(new - sigma) <= tol * max(new, 1e-300):
            return float(np.linalg.norm(W @ v)), True, it
        sigma = new
    return float(np.linalg.norm(W @ v)), False, max_iters


def activation_lipschitz(act: Module, interval, grid_points: int = GRID_POINTS) -> float:
    """``max |phi'|`` over a uniform grid on ``interval``, across all groups."""
    lo, hi = float(interval[0]), float(interval[1])
    grid = np.linspace(lo, hi, grid_points)
    if isinstance(act, GroupedRationalLayer):
        return float(np.max(np.abs(act.derivative_by_group(grid))))
    if isinstance(act, GELU):
        return float(np.max(np.abs(GELU.derivative(grid))))
    if isinstance(act, Identity):
        return 1.0
    raise ContractError(f"no derivative available for activation {type(act).__name__}")


def _require_mlp(model: Module) -> MLPClassifier:
    if not isinstance(model, MLPClassifier):
        raise ContractError(f"Lipschitz analyses need an MLPClassifier, got {type(model).__name__}")
    return model


def _apply(act: Module, z: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return act(Tensor(z)).data


def _chain(model: MLPClassifier, acts: list[Module], x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Pre-activations of every layer and the logits, using ``acts`` in place of the model's own."""
    h = np.asarray(x, dtype=np.float64)
    pre = []
    for layer, act in zip(model.layers, acts):
        with T.no_grad():
            z = layer.linear(Tensor(h)).data
        pre.append(z)
        h = _apply(act, z)
    with T.no_grad():
        out = model.head(Tensor(h)).data
    return pre, out


@dataclass
class LipschitzReport:
    interval: tuple[float, float]
    grid_points: int
    act_lipschitz: list[float]
    spectral_norms: list[float]  # one per layer, head last
    converged: list[bool]
    bound: float

    def to_dict(self) -> dict:
        return asdict(self)


def lipschitz_bound(model: Module, probe_interval=(-3.0, 3.0), grid_points: int = GRID_POINTS) -> LipschitzReport:
    """Product bound ``||W_head|| * prod_l sup|phi_l'| * ||W_l||`` on the probe interval.

    The activation factor is only valid while pre-activations stay inside
    ``probe_interval``; biases do not enter.
    """
    model = _require_mlp(model)
    lips = [activation_lipschitz(l.act, probe_interval, grid_points) for l in model.layers]
    norms, conv = [], []
    for W in [l.linear.weight.data for l in model.layers] + [model.head.weight.data]:
        s, ok, _ = spectral_norm(W)
        norms.append(s)
        conv.append(ok)
    bound = float(np.prod(lips) * np.prod(norms))
    return LipschitzReport(
        interval=(float(probe_interval[0]), float(probe_interval[1])),
        grid_points=grid_points,
        act_lipschitz=lips,
        spectral_norms=norms,
        converged=conv,
        bound=bound,
    )


def preactivation_range(model: Module, x) -> tuple[float, float]:
    """Smallest interval containing every pre-activation of ``model`` on ``x``."""
    model = _require_mlp(model)
    pre, _ = _chain(model, [l.act for l in model.layers], np.asarray(x, dtype=np.float64))
    if not pre:
        return 0.0, 0.0
    return float(min(p.min() for p in pre)), float(max(p.max() for p in pre))


@dataclass
class DeviationReport:
    delta_norms: np.ndarray  # (N, L): ||phi'_l(z_l) - phi_l(z_l)|| at base pre-activations
    downstream: list[float]  # (L,): Lipschitz constant of the adapted map above layer l
    act_lipschitz: list[float]
    intervals: list[tuple[float, float]]
    lhs: np.ndarray  # (N,)
    rhs: np.ndarray  # (N,)
    violations: int
    slack: float = SLACK
    grid_points: int = GRID_POINTS
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        ratio = self.lhs / np.where(self.rhs > 0, self.rhs, np.inf)
        return {
            "probes": int(self.lhs.size),
            "violations": self.violations,
            "slack": self.slack,
            "grid_points": self.grid_points,
            "act_lipschitz": self.act_lipschitz,
            "downstream": self.downstream,
            "intervals": [list(i) for i in self.intervals],
            "max_lhs": float(self.lhs.max(initial=0.0)),
            "max_rhs": float(self.rhs.max(initial=0.0)),
            "max_ratio": float(ratio.max(initial=0.0)),
            "mean_delta_norm": self.delta_norms.mean(axis=0).tolist(),
            "notes": self.notes,
        }


def _check_same_backbone(base: MLPClassifier, adapted: MLPClassifier) -> None:
    if len(base.layers) != len(adapted.layers):
        raise ContractError(f"depth mismatch: {len(base.layers)} vs {len(adapted.layers)}")
    pairs = [(l.linear, k.linear) for l, k in zip(base.layers, adapted.layers)] + [(base.head, adapted.head)]
    for i, (p, q) in enumerate(pairs):
        for attr in ("weight", "bias"):
            u, v = getattr(p, attr), getattr(q, attr)
            if (u is None) != (v is None) or (u is not None and not np.array_equal(u.data, v.data)):
                where = "head" if i == len(pairs) - 1 else f"layers.{i}.linear"
                raise ContractError(f"models differ outside activation layers at {where}.{attr}")
    for i, (l, k) in enumerate(zip(base.layers, adapted.layers)):
        if type(l.act) is not type(k.act):
            raise ContractError(f"activation type mismatch at layers.{i}.act")


def deviation_check(base: Module, adapted: Module, probes, grid_points: int = GRID_POINTS, slack: float = SLACK) -> DeviationReport:
    """Both sides of the activation-deviation bound on every probe input.

    With ``U_l`` the adapted network above layer ``l`` and ``z_l`` the base
    model's pre-activations,

        ||F'(x) - F(x)|| <= sum_l Lip(U_l) * ||phi'_l(z_l) - phi_l(z_l)||,
        Lip(U_l) <= ||W_head|| * prod_{k > l} Lip(phi'_k) ||W_k||.

    ``Lip(phi'_k)`` is a grid sup over the range of layer ``k`` pre-activations
    reached by every hybrid network (adapted above some layer, base below) on
    the probes, which covers every segment the mean-value argument visits.
    """
    base, adapted = _require_mlp(base), _require_mlp(adapted)
    _check_same_backbone(base, adapted)
    x = np.asarray(probes, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"probe batch must be a non-empty (N, F) array, got shape {x.shape}")
    L = len(base.layers)
    base_acts = [l.act for l in base.layers]
    new_acts = [l.act for l in adapted.layers]

    lo = np.full(L, np.inf)
    hi = np.full(L, -np.inf)
    outs = []
    for cut in range(L + 1):  # adapted on layers >= cut, base below
        pre, out = _chain(base, base_acts[:cut] + new_acts[cut:], x)
        outs.append(out)
        for l, z in enumerate(pre):
            lo[l] = min(lo[l], z.min())
            hi[l] = max(hi[l], z.max())
    # outs[0] is fully adapted, outs[L] is the base network
    lhs = np.linalg.norm(outs[0] - outs[L], axis=1)

    base_pre, _ = _chain(base, base_acts, x)
    delta_norms = np.stack(
        [np.linalg.norm(_apply(new_acts[l], z) - _apply(base_acts[l], z), axis=1) for l, z in enumerate(base_pre)],
        axis=1,
    ) if L else np.zeros((x.shape[0], 0))

    intervals = [(float(lo[l]), float(hi[l])) for l in range(L)]
    lips = [activation_lipschitz(new_acts[l], intervals[l], grid_points) for l in range(L)]
    w_norms = [spectral_norm(l.linear.weight.data)[0] for l in adapted.layers]
    head_norm = spectral_norm(adapted.head.weight.data)[0]
    downstream = []
    for l in range(L):
        k = head_norm
        for j in range(l + 1, L):
            k *= lips[j] * w_norms[j]
        downstream.append(float(k))
    rhs = delta_norms @ np.asarray(downstream) if L else np.zeros(x.shape[0])
    violations = int(np.sum(lhs > rhs + slack))
    return DeviationReport(
        delta_norms=delta_norms,
        downstream=downstream,
        act_lipschitz=lips,
        intervals=intervals,
        lhs=lhs,
        rhs=rhs,
        violations=violations,
        slack=slack,
        grid_points=grid_points,
    )


@dataclass
class AdaptabilityReport:
    scores: dict[str, float]
    distances: dict[str, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.scores.values()))) if self.scores else 0.0

    def to_dict(self) -> dict:
        return {"scores": self.scores, "distances": self.distances, "mean": self.mean}


def wasserstein1(u: np.ndarray, v: np.ndarray) -> float:
    """Exact W1 between two equal-size empirical samples."""
    u = np.sort(np.ravel(u))
    v = np.sort(np.ravel(v))
    if u.size != v.size:
        raise ContractError(f"sample sizes differ: {u.size} vs {v.size}")
    return float(np.mean(np.abs(u - v)))


def adaptability_score(before: Module, after: Module, probes) -> AdaptabilityReport:
    """Per activation site, ``d / (1 + d)`` with ``d`` the W1 distance of its outputs on ``probes``."""
    x = np.asarray(probes, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ContractError("adaptability score needs a non-empty probe batch")
    sites = activation_sites(before)
    if sites != activation_sites(after):
        raise ContractError("models expose different activation sites")
    ua = activation_outputs(before, x)
    va = activation_outputs(after, x)
    dist = {s: wasserstein1(ua[s], va[s]) for s in sites}
    return AdaptabilityReport(scores={s: d / (1.0 + d) for s, d in dist.items()}, distances=dist)
