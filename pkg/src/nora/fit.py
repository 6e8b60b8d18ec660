"""Fit safe rationals ``P/(1+|Q|)`` to reference activations.

The fitter alternates an exact linear least-squares solve for the numerator
(denominator held fixed) with a damped Gauss-Newton step on the denominator
coefficients.  The sup-norm loss is approached by Lawson-style iterative
reweighting of the least-squares weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError
from .rational import RationalCoeffs

__all__ = [
    "FitSpec",
    "FitReport",
    "RateStudy",
    "reference",
    "fit_rational",
    "rate_study",
    "polynomial_fit",
    "ANALYTIC_TARGETS",
    "KINK_TARGETS",
]


def _gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


def _silu(x):
    return x * special.expit(x)


_TARGETS = {
    "gelu": _gelu,
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "silu": _silu,
    "abs": np.abs,
    "identity": lambda x: np.array(x, dtype=np.float64),
}
ANALYTIC_TARGETS = ("gelu", "tanh", "silu", "identity")
KINK_TARGETS = ("relu", "abs")


def reference(target: str):
    """Reference activation by tag; ``const:<v>`` gives a constant function."""
    if target.startswith("const:"):
        v = float(target.split(":", 1)[1])
        return lambda x: np.full(np.shape(x), v)
    try:
        return _TARGETS[target]
    except KeyError:
        raise ConfigError(f"unknown target {target!r}; known: {sorted(_TARGETS)} or const:<v>", field="target") from None


LOSSES = ("least-squares", "sup-norm")
# fitting alone tolerates higher degree than network layers (which cap at 8)
FIT_MAX_DEGREE = 12


@dataclass(frozen=True)
class FitSpec:
    target: str = "gelu"
    interval: tuple[float, float] = (-3.0, 3.0)
    grid_points: int = 201
    degrees: tuple[int, int] = (5, 4)
    loss: str = "sup-norm"
    seed: int = 0
    max_iters: int = 200
    tol: float = 1e-10

    def __post_init__(self):
        lo, hi = (float(v) for v in self.interval)
        object.__setattr__(self, "interval", (lo, hi))
        object.__setattr__(self, "degrees", tuple(int(v) for v in self.degrees))
        m, n = self.degrees
        if not lo < hi:
            raise ConfigError(f"interval must satisfy lo < hi, got {self.interval}", field="interval")
        if not (0 <= m <= FIT_MAX_DEGREE and 0 <= n <= FIT_MAX_DEGREE):
            raise ConfigError(f"degrees must lie in [0, {FIT_MAX_DEGREE}], got {self.degrees}", field="degrees")
        if self.grid_points < 10 * (m + n + 2):
            raise ConfigError(f"grid_points must be >= 10*(m+n+2) = {10 * (m + n + 2)}", field="grid_points")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}", field="loss")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1", field="max_iters")
        reference(self.target)

    def fit_grid(self) -> np.ndarray:
        # strided from the verification grid so containment is exact, not up to rounding
        return self.verification_grid()[::10]

    def verification_grid(self) -> np.ndarray:
        """Ten-fold refinement of the fit grid (contains every fit-grid point)."""
        return np.linspace(*self.interval, 10 * (self.grid_points - 1) + 1)


@dataclass
class FitReport:
    spec: FitSpec
    coeffs: RationalCoeffs
    sup_error: float
    l2_error: float
    fit_grid_sup_error: float
    iterations: int
    converged: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "coeffs": self.coeffs.to_dict(),
            "sup_error": self.sup_error,
            "l2_error": self.l2_error,
            "fit_grid_sup_error": self.fit_grid_sup_error,
            "iterations": self.iterations,
            "converged": self.converged,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        spec = FitSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["spec"].items()})
        return cls(
            spec=spec,
            coeffs=RationalCoeffs.from_dict(d["coeffs"]),
            sup_error=d["sup_error"],
            l2_error=d["l2_error"],
            fit_grid_sup_error=d["fit_grid_sup_error"],
            iterations=d["iterations"],
            converged=d["converged"],
            notes=list(d.get("notes", [])),
        )


# -- least-squares machinery --------------------------------------------------


class _Solver:
    """Weighted linear least squares with a ridge fallback for rank deficiency."""

    RIDGE = 1e-10

    def __init__(self):
        self.notes: list[str] = []

    def solve(self, M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        scale = np.linalg.norm(M, axis=0)
        scale[scale == 0] = 1.0
        Ms = M / scale
        sol, _, rank, _ = np.linalg.lstsq(Ms, rhs, rcond=None)
        if rank < Ms.shape[1]:
            k = Ms.shape[1]
            aug = np.vstack([Ms, math.sqrt(self.RIDGE) * np.eye(k)])
            sol = np.linalg.lstsq(aug, np.concatenate([rhs, np.zeros(k)]), rcond=None)[0]
            msg = f"rank-deficient system ({rank}/{k}); ridge {self.RIDGE:g} retry"
            if msg not in self.notes:
                self.notes.append(msg)
        return sol / scale


def _vander(x: np.ndarray, d: int) -> np.ndarray:
    return np.vander(x, d, increasing=True)


class _Problem:
    def __init__(self, x, f, m, n, solver):
        self.x, self.f = x, f
        self.m, self.n = m, n
        self.Va = _vander(x, m + 1)
        self.Vb = _vander(x, n + 1)
        self.solver = solver

    def parts(self, a, b):
        p = self.Va @ a
        q = self.Vb @ b
        return p, q, 1.0 + np.abs(q)

    def residual(self, a, b):
        p, _, d = self.parts(a, b)
        return p / d - self.f

    def solve_a(self, b, w):
        _, _, d = self.parts(np.zeros(self.m + 1), b)
        sw = np.sqrt(w)
        return self.solver.solve(self.Va * (sw / d)[:, None], sw * self.f)

    def linearized_init(self, w, sweeps: int = 8):
        """Sanathanan-Koerner style: minimize |P - f (1 + s Q)| / D_prev."""
        sign = np.ones_like(self.x)
        dprev = np.ones_like(self.x)
        a = b = None
        for _ in range(sweeps):
            sw = np.sqrt(w) / dprev
            M = np.hstack([self.Va, -(self.f * sign)[:, None] * self.Vb])
            sol = self.solver.solve(M * sw[:, None], sw * self.f)
            a, b = sol[: self.m + 1], sol[self.m + 1 :]
            q = self.Vb @ b
            sign = np.where(q < 0, -1.0, 1.0)
            dprev = 1.0 + np.abs(q)
        return a, b

    def loss(self, a, b, w):
        r = self.residual(a, b)
        return float(np.sum(w * r * r))


def _lm_denominator(prob: _Problem, a, b, w, lam):
    """One damped Gauss-Newton step on ``b`` with ``a`` re-solved exactly."""
    p, q, d = prob.parts(a, b)
    r = p / d - prob.f
    s = np.sign(q)
    sw = np.sqrt(w)
    # joint Jacobian; the numerator block keeps the step consistent with a's coupling
    Ja = prob.Va / d[:, None]
    Jb = -(p * s / (d * d))[:, None] * prob.Vb
    J = np.hstack([Ja, Jb]) * sw[:, None]
    rw = r * sw
    JtJ = J.T @ J
    g = J.T @ rw
    base = prob.loss(a, b, w)
    diag = np.diag(JtJ).copy()
    diag[diag == 0] = 1.0
    for _ in range(30):
        try:
            step = np.linalg.solve(JtJ + lam * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        b_new = b + step[prob.m + 1 :]
        a_new = prob.solve_a(b_new, w)
        new = prob.loss(a_new, b_new, w)
        if np.isfinite(new) and new <= base:
            return a_new, b_new, new, max(lam / 3.0, 1e-12)
        lam *= 4.0
        if lam > 1e12:
            break
    return a, b, base, lam


def _fit_weighted(prob: _Problem, a, b, w, max_iters, tol):
    lam = 1e-3
    loss = prob.loss(a, b, w)
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        if prob.n == 0 or not np.any(prob.Vb):
            converged = True
            break
        a, b, new, lam = _lm_denominator(prob, a, b, w, lam)
        change = abs(loss - new)
        loss = new
        if change <= tol * max(loss, 1e-300) or loss == 0.0:
            converged = True
            break
    return a, b, it, converged


def fit_rational(spec: FitSpec, init: RationalCoeffs | None = None) -> FitReport:
    """Fit ``spec.target`` on ``spec.interval`` with a degree-``spec.degrees`` safe rational.

    ``init`` (lower or equal degrees, zero-padded) is tried as one extra start.
    """
    m, n = spec.degrees
    target = reference(spec.target)
    x = spec.fit_grid()
    f = target(x)
    solver = _Solver()
    prob = _Problem(x, f, m, n, solver)
    rng = np.random.default_rng(spec.seed)
    w = np.full(x.size, 1.0 / x.size)

    if n == 0:
        # constant denominator only rescales P; pin b_0 = 0
        b = np.zeros(1)
        a = prob.solve_a(b, w)
        a, b, iters, converged = _reweight(prob, a, b, w, spec, polynomial=True)
    else:
        a, b = prob.linearized_init(w)
        a = prob.solve_a(b, w)
        # a few jittered restarts of the denominator; deterministic via seed
        best = None
        starts = [b] + [b + rng.normal(0.0, 0.1, size=b.shape) for _ in range(2)]
        for b0 in starts:
            a0 = prob.solve_a(b0, w)
            cand = _fit_weighted(prob, a0, b0, w, spec.max_iters, spec.tol)
            err = np.max(np.abs(prob.residual(cand[0], cand[1])))
            if best is None or err < best[0]:
                best = (err, cand)
        a, b = best[1][0], best[1][1]
        a, b, iters, converged = _reweight(prob, a, b, w, spec, polynomial=False)
        if init is not None:
            ai, bi = _pad(init.a, m + 1), _pad(init.b, n + 1)
            alt = _reweight(prob, ai, bi, w, spec, polynomial=False)
            if np.max(np.abs(prob.residual(alt[0], alt[1]))) < np.max(np.abs(prob.residual(a, b))):
                a, b, iters, converged = alt

    coeffs = RationalCoeffs(a, b)
    xv = spec.verification_grid()
    rv = coeffs(xv) - target(xv)
    report = FitReport(
        spec=spec,
        coeffs=coeffs,
        sup_error=float(np.max(np.abs(rv))),
        l2_error=float(np.sqrt(np.mean(rv * rv))),
        fit_grid_sup_error=float(np.max(np.abs(coeffs(x) - f))),
        iterations=iters,
        converged=converged,
        notes=solver.notes,
    )
    return report


def _pad(v: np.ndarray, d: int) -> np.ndarray:
    if v.size > d:
        raise ConfigError(f"init has {v.size} coefficients, fit allows {d}")
    return np.concatenate([v, np.zeros(d - v.size)])


def _reweight(prob: _Problem, a, b, w, spec: FitSpec, polynomial: bool):
    """Least-squares polish, then Lawson reweighting toward the sup-norm optimum."""
    if spec.loss == "least-squares":
        if polynomial:
            return a, b, 1, True
        return _fit_weighted(prob, a, b, w, spec.max_iters, spec.tol)
    best = (float(np.max(np.abs(prob.residual(a, b)))), a, b)
    last_gain = 0
    converged = False
    it = 0
    for it in range(1, spec.max_iters + 1):
        r = np.abs(prob.residual(a, b))
        if r.max() == 0.0:
            converged = True
            break
        w = w * (r + 1e-3 * r.max())
        w = w / w.sum()
        if polynomial:
            a = prob.solve_a(b, w)
        else:
            a, b, _, _ = _fit_weighted(prob, a, b, w, 20, spec.tol)
        err = float(np.max(np.abs(prob.residual(a, b))))
        if err < best[0] * (1.0 - 1e-4):
            last_gain = it
        if err < best[0]:
            best = (err, a, b)
        if it - last_gain >= 10 or best[0] <= spec.tol:
            converged = True
            break
    return best[1], best[2], it, converged


def polynomial_fit(target: str, interval, degree: int, loss: str = "sup-norm", grid_points: int | None = None) -> FitReport:
    """Best polynomial of ``degree`` by the same machinery (denominator pinned)."""
    gp = grid_points or max(201, 10 * (degree + 2))
    return fit_rational(FitSpec(target=target, interval=tuple(interval), grid_points=gp, degrees=(degree, 0), loss=loss))


# -- approximation-rate study ---------------------------------------------------


@dataclass
class RateStudy:
    target: str
    interval: tuple[float, float]
    regime: str  # "geometric" (log err vs N) or "root-exponential" (log err vs sqrt N)
    rows: list[dict]
    slope: float
    intercept: float
    r2: float

    def to_csv(self) -> str:
        lines = ["N,m,n,sup_error,l2_error"]
        for r in self.rows:
            lines.append(f"{r['N']},{r['m']},{r['n']},{r['sup_error']:.17g},{r['l2_error']:.17g}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


def split_degree(N: int) -> tuple[int, int]:
    """Total degree N -> (m, n) with the numerator taking the extra degree."""
    n = N // 2
    return N - n, n


def rate_study(target: str, interval, degree_list, loss: str = "sup-norm", grid_points: int = 401) -> RateStudy:
    """Fit each total degree and regress log error on N or sqrt(N).

    ``degree_list`` holds total degrees ``N`` or explicit ``(m, n)`` pairs and
    must be strictly increasing in ``m + n``.
    """
    pairs = [split_degree(d) if np.isscalar(d) else tuple(int(v) for v in d) for d in degree_list]
    if len(pairs) < 4:
        raise ContractError(f"rate study needs at least 4 degrees, got {len(pairs)}")
    totals = [m + n for m, n in pairs]
    if any(t2 <= t1 for t1, t2 in zip(totals, totals[1:])):
        raise ContractError(f"degree list must be strictly increasing in N, got {totals}")
    rows = []
    prev = None
    for (m, n), N in zip(pairs, totals):
        gp = max(grid_points, 10 * (N + 2))
        spec = FitSpec(target=target, interval=tuple(interval), grid_points=gp, degrees=(m, n), loss=loss)
        rep = fit_rational(spec)
        if prev is not None and prev.a.size <= m + 1 and prev.b.size <= n + 1:
            # the lower-degree family nests in this one; start from its optimum too
            warm = fit_rational(spec, init=RationalCoeffs(_pad(prev.a, m + 1), prev.b))
            if warm.sup_error < rep.sup_error:
                rep = warm
        prev = rep.coeffs
        rows.append({"N": N, "m": m, "n": n, "sup_error": rep.sup_error, "l2_error": rep.l2_error})
    regime = "root-exponential" if target in KINK_TARGETS else "geometric"
    xs = np.array([math.sqrt(r["N"]) if regime == "root-exponential" else r["N"] for r in rows], dtype=float)
    ys = np.log(np.array([max(r["sup_error"], 1e-300) for r in rows]))
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateStudy(target, tuple(float(v) for v in interval), regime, rows, float(slope), float(intercept), r2)
