"""Perturbation error lab: cumulative-error bound, incomplete gamma,
midpoint/Taylor equivalence and empirical scaling-law fits.

Perturbations are seeded uniform noise in [-delta, delta] per coordinate
added to an analytic evaluator, so delta is controlled exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .diffusion import NoiseSchedule, t_of_lambda
from .metrics import trajectory_mse
from .samplers import TimeGrid, dpm1_step, dpm2_step, make_grid, sample

FD_STEP = 1e-5


# -- incomplete gamma ---------------------------------------------------------

def lower_incomplete_gamma(n: int, x: float) -> float:
    """gamma(n+1, x) = n! (1 - e^{-x} sum_{m<=n} x^m / m!) for integer n >= 0.

    For x below n + 1 the equivalent tail form n! e^{-x} sum_{m>n} x^m / m!
    is summed instead; it avoids the cancellation in 1 - (...) at small x.
    """
    if n < 0 or int(n) != n:
        raise ValueError(f"n must be a non-negative integer, got {n}")
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    n = int(n)
    if x == 0:
        return 0.0
    fact = math.factorial(n)
    if x < n + 1:
        term = x ** (n + 1) / math.factorial(n + 1)
        total, m = 0.0, n + 1
        while term > 1e-17 * total or total == 0.0:
            total += term
            m += 1
            term *= x / m
        return fact * math.exp(-x) * total
    partial, term = 0.0, 1.0
    for m in range(n + 1):
        if m:
            term *= x / m
        partial += term
    return fact * (1.0 - math.exp(-x) * partial)


def gamma_small_x_approx(n: int, x: float) -> float:
    """Leading term x^{n+1} / (n+1) of gamma(n+1, x)."""
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    return x ** (n + 1) / (n + 1)


# -- bound --------------------------------------------------------------------

@dataclass(frozen=True)
class BoundParams:
    """delta: sup perturbation; k: expansion order; lam_s < lam_t interval ends."""

    delta: float
    k: int
    lam_s: float
    lam_t: float

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.lam_t > self.lam_s:
            raise ValueError("need lam_t > lam_s")

    @property
    def h(self) -> float:
        return self.lam_t - self.lam_s


@dataclass(frozen=True)
class BoundResult:
    value: float
    terms: tuple


def quant_error_bound(p: BoundParams) -> BoundResult:
    """delta e^{-lam_s} sum_{n<k} h^{n+1} / (n+1)!; ``terms`` are the summands."""
    h = p.h
    pref = p.delta * math.exp(-p.lam_s)
    terms, a = [], pref
    for n in range(p.k):
        a = a * h / (n + 1)
        terms.append(a)
    return BoundResult(float(math.fsum(terms)), tuple(terms))


def bound_limit(p: BoundParams) -> float:
    """k -> infinity value delta e^{-lam_s} (e^h - 1)."""
    return p.delta * math.exp(-p.lam_s) * math.expm1(p.h)


# -- perturbed evaluator -------------------------------------------------------

class PerturbedEvaluator:
    """Adds uniform noise in [-delta, delta]; the stream depends only on
    (seed, call sequence)."""

    def __init__(self, base, delta: float, seed: int):
        if delta < 0:
            raise ValueError("delta must be >= 0")
        self.base, self.delta, self.seed = base, float(delta), seed
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def __call__(self, x, t):
        out = self.base(x, t)
        self.calls += 1
        if self.delta == 0.0:
            return out
        return out + self.delta * self.rng.uniform(-1.0, 1.0, size=np.shape(out))


def perturbed_evaluator(base, delta: float, seed: int) -> PerturbedEvaluator:
    return PerturbedEvaluator(base, delta, seed)


# -- slope fits ----------------------------------------------------------------

@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_points: int


def fit_loglog(xs, ys, confidence: float = 0.95) -> SlopeFit:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    keep = (xs > 0) & (ys > 0) & np.isfinite(ys)
    xs, ys = xs[keep], ys[keep]
    if len(xs) < 4:
        raise ValueError(f"slope fits need >= 4 points, got {len(xs)}")
    r = stats.linregress(np.log(xs), np.log(ys))
    q = stats.t.ppf(0.5 + confidence / 2, len(xs) - 2)
    return SlopeFit(float(r.slope), float(r.intercept), float(r.slope - q * r.stderr),
                    float(r.slope + q * r.stderr), len(xs))


# -- midpoint vs Taylor -----------------------------------------------------------

def _flow(base_eval, schedule, x, lam):
    return base_eval(x, t_of_lambda(schedule, lam))


def midpoint_vs_taylor(base_eval, schedule: NoiseSchedule, x, lam: float, h: float):
    """One step of dx/dlam = eps(x, t(lam)) by the midpoint rule and by the
    explicit second-order Taylor expansion; returns (rk2, taylor2, max |diff|).

    Partial derivatives of eps use central differences with step 1e-5.
    """
    x = np.asarray(x, dtype=np.float64)
    if h == 0:
        return x.copy(), x.copy(), 0.0
    f0 = _flow(base_eval, schedule, x, lam)
    k2 = _flow(base_eval, schedule, x + 0.5 * h * f0, lam + 0.5 * h)
    rk2 = x + h * k2
    e = FD_STEP
    df_dlam = (_flow(base_eval, schedule, x, lam + e) - _flow(base_eval, schedule, x, lam - e)) / (2 * e)
    jf = np.zeros_like(x)
    for j in range(x.shape[1]):
        step = np.zeros_like(x)
        step[:, j] = e
        col = (_flow(base_eval, schedule, x + step, lam) - _flow(base_eval, schedule, x - step, lam)) / (2 * e)
        jf += col * f0[:, j: j + 1]
    taylor = x + h * f0 + 0.5 * h * h * (df_dlam + jf)
    return rk2, taylor, float(np.max(np.abs(rk2 - taylor)))


def richardson_slope(base_eval, schedule, x, lam: float, hs=(0.1, 0.05, 0.025, 0.0125)) -> SlopeFit:
    disc = [midpoint_vs_taylor(base_eval, schedule, x, lam, h)[2] for h in hs]
    return fit_loglog(hs, disc)


# -- scaling laws -----------------------------------------------------------------

def _step(kind, evaluator, schedule, x, t_prev, t_next):
    if kind == "dpm1":
        return dpm1_step(evaluator, schedule, x, t_prev, t_next)
    return dpm2_step(evaluator, schedule, x, t_prev, t_next)[0]


ORDERS = {"dpm1": 1, "dpm2": 2}


@dataclass
class ErrorReport:
    """Sweep tables, per-step deviation curves and fitted slopes.

    Deviations are root-mean-square endpoint distances per coordinate,
    sqrt(trajectory MSE), so they scale like delta.
    """

    deltas: list
    steps: int
    h_values: list
    h_delta: float
    delta_sweep: dict = field(default_factory=dict)
    endpoint_mse: dict = field(default_factory=dict)
    h_sweep: dict = field(default_factory=dict)
    per_step_deviation: dict = field(default_factory=dict)
    per_step_bound: dict = field(default_factory=dict)
    delta_slopes: dict = field(default_factory=dict)
    h_slopes: dict = field(default_factory=dict)
    bound_constant: dict = field(default_factory=dict)
    crossover_h: dict = field(default_factory=dict)
    diverged: int = 0

    def bound_constant_stability(self, kind: str) -> float:
        """max C / min C across the delta sweep."""
        cs = [c for c in self.bound_constant[kind].values() if c > 0]
        return max(cs) / min(cs)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("delta_slopes", "h_slopes"):
            d[key] = {k: asdict(v) for k, v in getattr(self, key).items()}
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        """Per-step deviation curves: kind, delta, step, deviation, bound."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "delta", "step", "deviation", "bound"])
            for kind, curves in self.per_step_deviation.items():
                for delta, dev in curves.items():
                    bnd = self.per_step_bound[kind][delta]
                    for i, (a, b) in enumerate(zip(dev, bnd), start=1):
                        w.writerow([kind, repr(float(delta)), i, repr(float(a)), repr(float(b))])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def local_deviations(kind, base_eval, schedule, grid: TimeGrid, x_T, delta, seed):
    """Perturbed run plus, per step, the sup-norm gap between the perturbed
    and the unperturbed step taken from the same perturbed state."""
    pert = perturbed_evaluator(base_eval, delta, seed)
    traj = sample(pert, schedule, grid, x_T, kind)
    local = []
    for i in range(len(traj.states) - 1):
        x, t0, t1 = traj.states[i], float(traj.times[i]), float(traj.times[i + 1])
        clean = _step(kind, base_eval, schedule, x, t0, t1)
        local.append(float(np.max(np.abs(traj.states[i + 1] - clean))))
    return traj, np.array(local)


def step_bounds(kind, schedule, grid: TimeGrid, delta):
    return np.array([quant_error_bound(BoundParams(delta, ORDERS[kind], float(grid.lambdas[i]),
                                                   float(grid.lambdas[i + 1]))).value
                     for i in range(grid.steps)])


def single_interval_deviation(kind, base_eval, schedule, x, lam_start: float, h: float, delta: float, seed: int):
    """Sup-norm deviation after one step of size h in lambda from a fixed start."""
    t0 = t_of_lambda(schedule, lam_start)
    t1 = t_of_lambda(schedule, lam_start + h)
    clean = _step(kind, base_eval, schedule, x, t0, t1)
    pert = _step(kind, perturbed_evaluator(base_eval, delta, seed), schedule, x, t0, t1)
    return clean, pert, float(np.sqrt(np.mean((pert - clean) ** 2)))


def one_step_discretization_error(kind, base_eval, schedule, x, lam_start, h, substeps: int = 64):
    """Gap between one step and a 64-substep second-order reference."""
    t0 = t_of_lambda(schedule, lam_start)
    t1 = t_of_lambda(schedule, lam_start + h)
    lams = np.linspace(lam_start, lam_start + h, substeps + 1)
    ref = x
    for a, b in zip(lams[:-1], lams[1:]):
        ref = dpm2_step(base_eval, schedule, ref, t_of_lambda(schedule, a), t_of_lambda(schedule, b))[0]
    one = _step(kind, base_eval, schedule, x, t0, t1)
    return float(np.sqrt(np.mean((one - ref) ** 2)))


def fit_scaling_laws(schedule: NoiseSchedule, base_eval, deltas: Sequence[float], steps: int = 20,
                     h_values: Sequence[float] = (0.2, 0.1, 0.05, 0.025), h_delta: Optional[float] = None,
                     x_T=None, lam_start: float = 0.0, seed: int = 0, kinds=("dpm1", "dpm2"),
                     n_chains: int = 256, dim: int = 2) -> ErrorReport:
    """delta-sweep on a fixed grid and h-sweep over single intervals.

    The delta-sweep measures sqrt(endpoint trajectory MSE) between the
    perturbed and unperturbed runs; the h-sweep steps once from the
    unperturbed state at ``lam_start`` using the same noise realization for
    every h.
    """
    deltas = [float(d) for d in deltas]
    if len(deltas) < 4 or len(h_values) < 4:
        raise ValueError("scaling fits need >= 4 sweep points")
    rng = np.random.default_rng(seed)
    if x_T is None:
        x_T = rng.standard_normal((n_chains, dim))
    h_delta = float(np.median(deltas)) if h_delta is None else float(h_delta)
    grid = make_grid(schedule, steps)
    report = ErrorReport(deltas, steps, [float(h) for h in h_values], h_delta)
    for kind in kinds:
        clean = sample(base_eval, schedule, grid, x_T, kind)
        devs, mses = {}, {}
        report.per_step_deviation[kind] = {}
        report.per_step_bound[kind] = {}
        report.bound_constant[kind] = {}
        for d in deltas:
            traj, local = local_deviations(kind, base_eval, schedule, grid, x_T, d, seed)
            if traj.diverged:
                report.diverged += 1
                continue
            _, mse = trajectory_mse(clean, traj)
            mses[d] = mse
            devs[d] = math.sqrt(mse)
            bnd = step_bounds(kind, schedule, grid, d)
            report.per_step_deviation[kind][d] = local.tolist()
            report.per_step_bound[kind][d] = bnd.tolist()
            report.bound_constant[kind][d] = float(np.max(local / bnd)) if d > 0 else 0.0
        report.delta_sweep[kind] = devs
        report.endpoint_mse[kind] = mses
        pos = [d for d in devs if d > 0]
        report.delta_slopes[kind] = fit_loglog(pos, [devs[d] for d in pos])
        x_start = _transport_to(base_eval, schedule, x_T, t_of_lambda(schedule, lam_start))
        hdev = {}
        for h in h_values:
            hdev[float(h)] = single_interval_deviation(kind, base_eval, schedule, x_start, lam_start, h,
                                                       h_delta, seed)[2]
        report.h_sweep[kind] = hdev
        report.h_slopes[kind] = fit_loglog(list(hdev), list(hdev.values()))
        cross = {}
        for d in [d for d in deltas if d > 0]:
            best = None
            for h in sorted(h_values):
                disc = one_step_discretization_error(kind, base_eval, schedule, x_start, lam_start, h)
                quant = single_interval_deviation(kind, base_eval, schedule, x_start, lam_start, h, d, seed)[2]
                if disc < quant:
                    best = float(h)
            cross[d] = best
        report.crossover_h[kind] = cross
    return report


def _transport_to(base_eval, schedule, x_T, t_target, substeps: int = 50):
    """Carry x_T from T to t_target with fine second-order steps."""
    if t_target >= schedule.T:
        return np.array(x_T, copy=True)
    lams = np.linspace(schedule.lambda_min, float(schedule.lam(t_target)), substeps + 1)
    x = np.asarray(x_T, dtype=np.float64)
    times = [schedule.T] + [t_of_lambda(schedule, float(v)) for v in lams[1:-1]] + [t_target]
    for a, b in zip(times[:-1], times[1:]):
        x = dpm2_step(base_eval, schedule, x, a, b)[0]
    return x


def high_order_sensitivity(base_eval, schedule: NoiseSchedule, delta: float, seeds: Sequence[int],
                           steps: int = 20, n_chains: int = 256, dim: int = 2) -> list[tuple[float, float]]:
    """Per seed: (DPM-1, DPM-2) sqrt endpoint MSE from perturbing the evaluator."""
    grid = make_grid(schedule, steps)
    out = []
    for seed in seeds:
        x_T = np.random.default_rng(seed).standard_normal((n_chains, dim))
        row = []
        for kind in ("dpm1", "dpm2"):
            clean = sample(base_eval, schedule, grid, x_T, kind)
            pert = sample(perturbed_evaluator(base_eval, delta, seed), schedule, grid, x_T, kind)
            row.append(math.sqrt(trajectory_mse(clean, pert)[1]))
        out.append(tuple(row))
    return out
