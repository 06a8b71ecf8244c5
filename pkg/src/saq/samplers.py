"""Deterministic ODE samplers with full trajectory recording.

An evaluator is any callable ``(x, t) -> eps`` with ``x`` of shape (n, d) and
scalar ``t``. Steppers never mutate their inputs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .diffusion import NoiseSchedule, t_of_lambda

Evaluator = Callable[[np.ndarray, float], np.ndarray]

DIVERGENCE_THRESHOLD = 1e6
KINDS = ("ddim", "dpm1", "dpm2", "plms")

# Adams-Bashforth rows, newest evaluation first
PLMS_COEFFS = (
    (1.0,),
    (3.0 / 2, -1.0 / 2),
    (23.0 / 12, -16.0 / 12, 5.0 / 12),
    (55.0 / 24, -59.0 / 24, 37.0 / 24, -9.0 / 24),
)


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    lambdas: np.ndarray

    def __post_init__(self):
        if len(self.times) < 2 or np.any(np.diff(self.times) >= 0):
            raise ValueError("time grid must be strictly decreasing with >= 2 points")

    @property
    def steps(self) -> int:
        return len(self.times) - 1


def make_grid(schedule: NoiseSchedule, steps: int, spacing: str = "logsnr") -> TimeGrid:
    """Grid from T down to t_min; ``logsnr`` spacing gives equal h_i."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if spacing == "logsnr":
        lams = np.linspace(schedule.lambda_min, schedule.lambda_max, steps + 1)
        times = np.array([t_of_lambda(schedule, float(v)) for v in lams])
        times[0], times[-1] = schedule.T, schedule.t_min
        lams = schedule.lam(times)
    elif spacing == "time":
        times = np.linspace(schedule.T, schedule.t_min, steps + 1)
        lams = schedule.lam(times)
    elif spacing == "quadratic":
        u = np.linspace(np.sqrt(schedule.T), np.sqrt(schedule.t_min), steps + 1)
        times = u**2
        times[0], times[-1] = schedule.T, schedule.t_min
        lams = schedule.lam(times)
    else:
        raise ValueError(f"unknown grid spacing {spacing!r}")
    return TimeGrid(np.asarray(times, dtype=np.float64), np.asarray(lams, dtype=np.float64))


def _coeffs(schedule, t_prev, t_next):
    a_p, a_n = float(schedule.alpha(t_prev)), float(schedule.alpha(t_next))
    s_n = float(schedule.sigma(t_next))
    h = float(schedule.lam(t_next) - schedule.lam(t_prev))
    return a_p, a_n, s_n, h


def _check_step(t_prev, t_next):
    if t_next > t_prev:
        raise ValueError(f"t_next={t_next} must not exceed t_prev={t_prev}")


def dpm1_update(schedule, x, eps, t_prev, t_next):
    a_p, a_n, s_n, h = _coeffs(schedule, t_prev, t_next)
    return (a_n / a_p) * x - s_n * np.expm1(h) * eps


def dpm1_step(evaluator: Evaluator, schedule: NoiseSchedule, x, t_prev, t_next):
    _check_step(t_prev, t_next)
    return dpm1_update(schedule, x, evaluator(x, t_prev), t_prev, t_next)


def midpoint_time(schedule, t_prev, t_next) -> float:
    lam_mid = 0.5 * (float(schedule.lam(t_prev)) + float(schedule.lam(t_next)))
    return t_of_lambda(schedule, lam_mid)


def _dpm2_from_eps(evaluator, schedule, x, eps, t_prev, t_next):
    s = midpoint_time(schedule, t_prev, t_next)
    u = dpm1_update(schedule, x, eps, t_prev, s)
    eps_u = evaluator(u, s)
    return dpm1_update(schedule, x, eps_u, t_prev, t_next), (s, u, eps_u)


def dpm2_step(evaluator: Evaluator, schedule: NoiseSchedule, x, t_prev, t_next):
    """Second-order step; returns (x_next, (s, u, eps_u))."""
    _check_step(t_prev, t_next)
    return _dpm2_from_eps(evaluator, schedule, x, evaluator(x, t_prev), t_prev, t_next)


def ddim_update(schedule, x, eps, t_prev, t_next):
    a_p, a_n = float(schedule.alpha(t_prev)), float(schedule.alpha(t_next))
    s_p, s_n = float(schedule.sigma(t_prev)), float(schedule.sigma(t_next))
    x0_pred = (x - s_p * eps) / a_p
    return a_n * x0_pred + s_n * eps


def ddim_step(evaluator: Evaluator, schedule: NoiseSchedule, x, t_prev, t_next):
    _check_step(t_prev, t_next)
    if t_next == t_prev:
        return np.array(x, copy=True)
    return ddim_update(schedule, x, evaluator(x, t_prev), t_prev, t_next)


def plms_transfer(schedule, x, eps, t_prev, t_next):
    """Pseudo-numerical transfer part with abar = alpha^2."""
    ab_p = float(schedule.alpha(t_prev)) ** 2
    ab_n = float(schedule.alpha(t_next)) ** 2
    coef_x = np.sqrt(ab_n) / np.sqrt(ab_p)
    denom = np.sqrt(ab_p) * (np.sqrt((1 - ab_n) * ab_p) + np.sqrt((1 - ab_p) * ab_n))
    return coef_x * x - (ab_n - ab_p) / denom * eps


def plms_combine(eps_new, history: Sequence[np.ndarray], max_order: int = 4):
    order = min(max_order, 4, 1 + len(history))
    parts = [eps_new] + list(reversed(history))[: order - 1]
    coeffs = PLMS_COEFFS[order - 1]
    out = coeffs[0] * parts[0]
    for c, p in zip(coeffs[1:], parts[1:]):
        out = out + c * p
    return out


def plms_step(evaluator: Evaluator, schedule: NoiseSchedule, x, history, t_prev, t_next,
              max_order: int = 4):
    """Returns (x_next, raw eps); ``history`` is ordered oldest first."""
    _check_step(t_prev, t_next)
    eps = evaluator(x, t_prev)
    combined = plms_combine(eps, history[-3:], max_order)
    return plms_transfer(schedule, x, combined, t_prev, t_next), eps


@dataclass
class Trajectory:
    kind: str
    times: np.ndarray
    states: list = field(default_factory=list)
    eval_inputs: list = field(default_factory=list)
    eval_outputs: list = field(default_factory=list)
    mid_times: list = field(default_factory=list)
    mid_states: list = field(default_factory=list)
    mid_outputs: list = field(default_factory=list)
    diverged: bool = False
    diverged_step: Optional[int] = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def has_intermediates(self) -> bool:
        return len(self.mid_times) > 0

    def state_array(self) -> np.ndarray:
        return np.stack(self.states)


def _is_diverged(x) -> bool:
    return not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_THRESHOLD


def sample(evaluator: Evaluator, schedule: NoiseSchedule, grid: TimeGrid, x_T,
           kind: str = "dpm2", plms_order: int = 4) -> Trajectory:
    if kind not in KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}")
    x = np.asarray(x_T, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state contains non-finite values")
    traj = Trajectory(kind=kind, times=grid.times.copy(), states=[x])
    history: list[np.ndarray] = []
    for i in range(1, len(grid.times)):
        t_prev, t_next = float(grid.times[i - 1]), float(grid.times[i])
        eps = evaluator(x, t_prev)
        traj.eval_inputs.append(x)
        traj.eval_outputs.append(eps)
        if kind == "dpm1":
            x = dpm1_update(schedule, x, eps, t_prev, t_next)
        elif kind == "ddim":
            x = ddim_update(schedule, x, eps, t_prev, t_next)
        elif kind == "dpm2":
            x, (s, u, eps_u) = _dpm2_from_eps(evaluator, schedule, x, eps, t_prev, t_next)
            traj.mid_times.append(s)
            traj.mid_states.append(u)
            traj.mid_outputs.append(eps_u)
        else:
            combined = plms_combine(eps, history[-3:], plms_order)
            x = plms_transfer(schedule, x, combined, t_prev, t_next)
            history.append(eps)
        if _is_diverged(x):
            traj.diverged = True
            traj.diverged_step = i
            traj.times = traj.times[:i]
            # records of the failed step are dropped so counts match states
            del traj.eval_inputs[i - 1:], traj.eval_outputs[i - 1:]
            del traj.mid_times[i - 1:], traj.mid_states[i - 1:], traj.mid_outputs[i - 1:]
            break
        traj.states.append(x)
    return traj


def write_trajectories_csv(path, trajectories: Sequence[Trajectory], chain_offset: int = 0):
    """Plot-ready dump: one row per chain per recorded point."""
    dim = trajectories[0].states[0].shape[1]
    header = ["chain_id", "step", "t", "s_or_empty"] + [f"x{j}" for j in range(dim)] + ["kind", "flags"]
    fmt = "{:.17g}".format
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        base = chain_offset
        for traj in trajectories:
            n = traj.states[0].shape[0]
            flag_div = "diverged" if traj.diverged else ""
            for c in range(n):
                for i, x in enumerate(traj.states):
                    w.writerow([base + c, i, fmt(traj.times[i]), ""]
                               + [fmt(v) for v in x[c]] + [traj.kind, flag_div])
                    if i < len(traj.mid_times):
                        flags = "intermediate" + (";" + flag_div if flag_div else "")
                        w.writerow([base + c, i + 1, fmt(traj.times[i + 1]) if i + 1 < len(traj.times) else "",
                                    fmt(traj.mid_times[i])]
                                   + [fmt(v) for v in traj.mid_states[i][c]] + [traj.kind, flags])
            base += n
