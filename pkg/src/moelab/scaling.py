"""Compute-optimal scaling analysis: budgets, isoFLOP parabolas, loss surfaces.

Three estimation layers, in increasing ambition:

  - tokens_for_budget: the C = kappa * N * D accounting identity (kappa = 6).
  - isoFLOP profiles: per-budget quadratics of loss vs log10(model size); the
    vertex estimates the compute-optimal size, and power laws over the
    vertices give N*(C) and D*(C).
  - parametric surface: loss(N, D) = A/N^alpha + B/D^beta + L0, fitted with a
    Huber objective on log-loss residuals from a grid of initializations; the
    constrained optimum on D = C/(kappa*N) then has the closed form
    N* proportional to C^(beta/(alpha+beta)).

Fits sort their input points into a canonical order first, so permuting the
inputs changes nothing, bit for bit. The grid winner is picked by (objective,
then lexicographic initialization), which keeps concurrent or reordered
evaluation order-independent.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar

KAPPA_DEFAULT = 6.0
HUBER_DELTA_DEFAULT = 1e-3
BUDGET_TOLERANCE = 0.01   # allowed mismatch between c_flops and 6*N*D

GRID_LN_A = (0.0, 5.0, 10.0, 15.0, 20.0)
GRID_LN_B = (0.0, 5.0, 10.0, 15.0, 20.0)
GRID_ALPHA = (0.1, 0.3, 0.5, 0.7)
GRID_BETA = (0.1, 0.3, 0.5, 0.7)
GRID_L0 = (1.0, 2.0, 3.0)

MIN_EXPONENT = 1e-6   # lower bound keeping alpha, beta positive


class FitError(RuntimeError):
    """A fit could not be produced; diagnostics says why, per start if any."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class ScalingPoint:
    n_active: float
    d_tokens: float
    loss: float
    c_flops: float | None = None   # optional budget tag

    def __post_init__(self):
        if self.n_active <= 0 or self.d_tokens <= 0 or self.loss <= 0:
            raise ValueError(f"scaling point fields must be positive: {self}")
        if self.c_flops is not None:
            implied = KAPPA_DEFAULT * self.n_active * self.d_tokens
            if abs(self.c_flops - implied) > BUDGET_TOLERANCE * self.c_flops:
                raise ValueError(
                    f"c_flops {self.c_flops:.4e} is not within "
                    f"{BUDGET_TOLERANCE:.0%} of 6*N*D = {implied:.4e}"
                )

    @property
    def budget(self):
        if self.c_flops is not None:
            return self.c_flops
        return KAPPA_DEFAULT * self.n_active * self.d_tokens


def tokens_for_budget(c_flops, n_active, kappa=KAPPA_DEFAULT):
    """Tokens D that spend the budget: C = kappa * N * D."""
    if c_flops <= 0 or n_active <= 0 or kappa <= 0:
        raise ValueError("budget, parameter count, and kappa must be positive")
    return c_flops / (kappa * n_active)


def load_points_csv(path):
    """Read `n_active,d_tokens,c_flops,loss` rows; errors carry line numbers."""
    points = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["n_active", "d_tokens", "c_flops", "loss"]:
            raise ValueError(f"{path}:1: expected header n_active,d_tokens,c_flops,loss")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                n, d, c, lo = (float(v) for v in row)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field in {row}") from None
            try:
                points.append(ScalingPoint(n, d, lo, c_flops=c))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return points


def write_points_csv(path, points):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n_active", "d_tokens", "c_flops", "loss"])
        for p in points:
            w.writerow([repr(p.n_active), repr(p.d_tokens), repr(p.budget), repr(p.loss)])


def _canonical(points):
    return sorted(points, key=lambda p: (p.n_active, p.d_tokens, p.loss, p.budget))


@dataclass(frozen=True)
class IsoflopFit:
    c_flops: float
    n_opt: float
    loss_at_opt: float
    quad: tuple   # (a, b, c) of loss = a*x^2 + b*x + c, x = log10(n_active)


def fit_isoflop_parabola(points):
    """Least-squares quadratic of loss vs log10(n_active) at one budget."""
    points = _canonical(points)
    if len(points) < 3:
        raise FitError(f"need at least 3 points for a parabola, got {len(points)}")
    if len({p.n_active for p in points}) < 3:
        raise FitError("need at least 3 distinct n_active values")
    x = np.log10([p.n_active for p in points])
    y = np.array([p.loss for p in points])
    a, b, c = np.polyfit(x, y, 2)
    if a <= 0:
        raise FitError(
            f"isoFLOP fit is not convex (curvature {a:.4e}); "
            "no interior optimum exists for these points"
        )
    vertex = -b / (2.0 * a)
    return IsoflopFit(
        c_flops=float(points[0].budget),
        n_opt=float(10.0 ** vertex),
        loss_at_opt=float(c - b * b / (4.0 * a)),
        quad=(float(a), float(b), float(c)),
    )


@dataclass(frozen=True)
class PowerLaw:
    coefficient: float
    exponent: float
    exponent_assumed: bool = False   # True when fitted from a single pair

    def __call__(self, x):
        return self.coefficient * x ** self.exponent


def fit_power_law(pairs, assumed_exponent=None):
    """Fit y = coefficient * x^exponent by linear regression in log-log space.

    A single pair cannot determine the exponent; passing assumed_exponent
    then yields the matching coefficient, flagged via exponent_assumed.
    """
    pairs = sorted((float(x), float(y)) for x, y in pairs)
    if any(x <= 0 or y <= 0 for x, y in pairs):
        raise ValueError("power-law data must be positive")
    if len(pairs) == 0:
        raise FitError("no data")
    if len(pairs) == 1:
        if assumed_exponent is None:
            raise FitError("one pair only determines a coefficient; pass assumed_exponent")
        x, y = pairs[0]
        return PowerLaw(y / x ** assumed_exponent, assumed_exponent, exponent_assumed=True)
    lx = np.log([x for x, _ in pairs])
    ly = np.log([y for _, y in pairs])
    dx = lx - lx.mean()
    denom = float(np.dot(dx, dx))
    if denom == 0.0:
        raise FitError("all x values identical; exponent is undetermined")
    slope = float(np.dot(dx, ly - ly.mean()) / denom)
    intercept = float(ly.mean() - slope * lx.mean())
    return PowerLaw(math.exp(intercept), slope)


def huber(r, delta=HUBER_DELTA_DEFAULT):
    """Quadratic inside |r| <= delta, linear outside; continuous and C1."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.abs(r)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


@dataclass(frozen=True)
class ParametricFit:
    A: float
    B: float
    alpha: float
    beta: float
    L0: float
    objective: float = float("nan")
    init: tuple = ()

    def __post_init__(self):
        if self.A <= 0 or self.B <= 0 or self.L0 <= 0:
            raise ValueError("A, B, L0 must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


def predict_loss(fit, n_active, d_tokens):
    """A/N^alpha + B/D^beta + L0, vectorized over N and D."""
    n = np.asarray(n_active, dtype=float)
    d = np.asarray(d_tokens, dtype=float)
    out = fit.A * n ** -fit.alpha + fit.B * d ** -fit.beta + fit.L0
    return float(out) if out.ndim == 0 else out


def _default_grid():
    return [
        (la, lb, a, b, math.log(l0))
        for la, lb, a, b, l0 in itertools.product(
            GRID_LN_A, GRID_LN_B, GRID_ALPHA, GRID_BETA, GRID_L0
        )
    ]


def fit_parametric(points, delta=HUBER_DELTA_DEFAULT, grid=None):
    """Fit the loss surface by Huber regression on log-loss residuals.

    Parameters are optimized as (ln A, ln B, alpha, beta, ln L0) with alpha
    and beta bounded below at 1e-6, by L-BFGS-B with an analytic gradient,
    restarted from every grid vertex. The winner is the lowest objective,
    ties broken by lexicographically smallest initialization.
    """
    points = _canonical(points)
    if len(points) < 6:
        raise FitError(f"need at least 6 points, got {len(points)}")
    if len({p.budget for p in points}) < 2:
        raise FitError("points must span at least 2 budgets")
    n = np.array([p.n_active for p in points])
    d = np.array([p.d_tokens for p in points])
    y = np.log([p.loss for p in points])
    ln_n, ln_d = np.log(n), np.log(d)

    def objective(theta):
        ln_a, ln_b, al, be, ln_l0 = theta
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            pa = np.exp(ln_a - al * ln_n)
            pb = np.exp(ln_b - be * ln_d)
            pred = pa + pb + np.exp(ln_l0)
            r = np.log(pred) - y
            value = float(np.sum(huber(r, delta)))
            dh = np.where(np.abs(r) <= delta, r, delta * np.sign(r))
            w = dh / pred
            grad = np.array([
                np.sum(w * pa),
                np.sum(w * pb),
                np.sum(w * pa * -ln_n),
                np.sum(w * pb * -ln_d),
                np.sum(w * np.exp(ln_l0)),
            ])
        if not (np.isfinite(value) and np.isfinite(grad).all()):
            return 1e30, np.zeros(5)
        return value, grad

    bounds = [(None, None), (None, None), (MIN_EXPONENT, None), (MIN_EXPONENT, None), (None, None)]
    # tight tolerances: the noiseless self-consistency checks want the basin
    # floor, not the first ftol plateau
    options = {"ftol": 1e-16, "gtol": 1e-12, "maxiter": 2000}
    best = None
    failures = []
    for init in (grid if grid is not None else _default_grid()):
        res = minimize(objective, np.asarray(init, dtype=float),
                       jac=True, method="L-BFGS-B", bounds=bounds, options=options)
        if not res.success:
            failures.append((tuple(init), str(res.message)))
            continue
        key = (float(res.fun), tuple(init))
        if best is None or key < best[0]:
            best = (key, res.x.copy())
    if best is None:
        raise FitError(
            f"no initialization converged ({len(failures)} starts)", diagnostics=failures
        )
    if not best[0][0] < 1e29:
        raise FitError(
            "no initialization reached a finite objective", diagnostics=failures
        )
    (value, init), theta = best
    return ParametricFit(
        A=float(math.exp(theta[0])), B=float(math.exp(theta[1])),
        alpha=float(theta[2]), beta=float(theta[3]), L0=float(math.exp(theta[4])),
        objective=value, init=tuple(init),
    )


def allocation_exponent(fit):
    """Exponent of N*(C): beta / (alpha + beta)."""
    return fit.beta / (fit.alpha + fit.beta)


def optimal_allocation(fit, c_flops, kappa=KAPPA_DEFAULT):
    """Closed-form (N*, D*) minimizing the surface on the curve D = C/(kappa*N)."""
    if c_flops <= 0:
        raise ValueError("budget must be positive")
    ratio = (fit.alpha * fit.A) / (fit.beta * fit.B)
    n_opt = ratio ** (1.0 / (fit.alpha + fit.beta)) * (c_flops / kappa) ** allocation_exponent(fit)
    return n_opt, c_flops / (kappa * n_opt)


def numeric_allocation(fit, c_flops, kappa=KAPPA_DEFAULT, ln_n_bounds=(math.log(1e2), math.log(1e16))):
    """One-dimensional minimization over ln N; cross-checks the closed form."""
    def loss_at(ln_n):
        n = math.exp(ln_n)
        return predict_loss(fit, n, c_flops / (kappa * n))

    res = minimize_scalar(loss_at, bounds=ln_n_bounds, method="bounded",
                          options={"xatol": 1e-10})
    if not res.success:
        raise FitError(f"numeric allocation failed: {res.message}")
    return math.exp(res.x)


def make_synthetic_points(fit, budgets, per_budget=6, spread=4.0, noise=0.0, seed=0,
                          kappa=KAPPA_DEFAULT):
    """Sample the surface along each budget's constraint curve.

    Model sizes are log-spaced within spread of the optimal size, so isoFLOP
    parabolas have their vertex in range. noise multiplies each loss by
    (1 + noise * standard normal), deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    points = []
    for c in sorted(budgets):
        n_opt, _ = optimal_allocation(fit, c, kappa)
        for n in np.geomspace(n_opt / spread, n_opt * spread, per_budget):
            d = c / (kappa * n)
            loss = predict_loss(fit, n, d)
            if noise:
                loss *= 1.0 + noise * rng.standard_normal()
            points.append(ScalingPoint(float(n), float(d), float(loss), c_flops=float(c)))
    return points


@dataclass(frozen=True)
class IsoflopAnalysis:
    fits: tuple          # IsoflopFit per budget, ascending budget
    n_law: PowerLaw | None   # N*(C); None with a single budget
    d_law: PowerLaw | None   # D*(C)


def isoflop_analysis(points, kappa=KAPPA_DEFAULT):
    """Per-budget parabolas plus power laws over their vertices."""
    groups = {}
    for p in points:
        groups.setdefault(p.budget, []).append(p)
    fits = []
    for budget in sorted(groups):
        try:
            fits.append(fit_isoflop_parabola(groups[budget]))
        except FitError as e:
            raise FitError(f"budget {budget:.4e}: {e}") from None
    if len(fits) >= 2:
        n_law = fit_power_law([(f.c_flops, f.n_opt) for f in fits])
        d_law = fit_power_law(
            [(f.c_flops, f.c_flops / (kappa * f.n_opt)) for f in fits]
        )
    else:
        n_law = d_law = None
    return IsoflopAnalysis(fits=tuple(fits), n_law=n_law, d_law=d_law)


def write_parametric_json(path, fit, extras=None):
    payload = {
        "A": fit.A, "B": fit.B, "alpha": fit.alpha, "beta": fit.beta, "L0": fit.L0,
        "objective": fit.objective, "init": list(fit.init),
        "allocation_exponent": allocation_exponent(fit),
    }
    if extras:
        payload.update(extras)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def write_isoflop_json(path, analysis):
    payload = {
        "budgets": [asdict(f) for f in analysis.fits],
        "n_law": asdict(analysis.n_law) if analysis.n_law else None,
        "d_law": asdict(analysis.d_law) if analysis.d_law else None,
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def write_isoflop_csv(path, analysis):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["c_flops", "n_opt", "loss_at_opt", "quad_a", "quad_b", "quad_c"])
        for fit in analysis.fits:
            a, b, c = fit.quad
            w.writerow([repr(fit.c_flops), repr(fit.n_opt), repr(fit.loss_at_opt),
                        repr(a), repr(b), repr(c)])
