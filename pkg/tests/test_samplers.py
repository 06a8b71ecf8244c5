import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saq.diffusion import AnalyticEvaluator, NoiseSchedule, ToyDistribution, gaussian_transport
from saq.metrics import energy_distance
from saq.samplers import (PLMS_COEFFS, ddim_step, dpm1_step, dpm2_step, make_grid, midpoint_time, plms_combine,
                          plms_step, sample, write_trajectories_csv)

SCH = NoiseSchedule()
GAUSS = ToyDistribution.gaussian([1.0, -0.5], 0.5)


def zero_eval(x, t):
    return np.zeros_like(x)


def const_eval(c):
    return lambda x, t: np.full_like(x, c)


def x_T(n=64, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 2))


def test_dpm1_zero_eval_rescales():
    x = x_T()
    a = float(SCH.alpha(0.3)) / float(SCH.alpha(0.6))
    assert np.allclose(dpm1_step(zero_eval, SCH, x, 0.6, 0.3), a * x, rtol=0, atol=1e-15)


def test_dpm1_constant_eval():
    x = x_T()
    h = float(SCH.lam(0.3) - SCH.lam(0.6))
    a = float(SCH.alpha(0.3)) / float(SCH.alpha(0.6))
    ref = a * x - float(SCH.sigma(0.3)) * np.expm1(h) * 0.7
    assert np.allclose(dpm1_step(const_eval(0.7), SCH, x, 0.6, 0.3), ref, atol=1e-14)


def test_dpm2_zero_eval_rescales():
    x = x_T()
    x_next, (s, u, eps_u) = dpm2_step(zero_eval, SCH, x, 0.6, 0.3)
    assert np.allclose(u, float(SCH.alpha(s)) / float(SCH.alpha(0.6)) * x, atol=1e-15)
    assert np.allclose(x_next, float(SCH.alpha(0.3)) / float(SCH.alpha(0.6)) * x, atol=1e-15)
    assert np.all(eps_u == 0)


def test_dpm2_formula():
    ev = AnalyticEvaluator(GAUSS, SCH)
    x = x_T()
    x_next, (s, u, eps_u) = dpm2_step(ev, SCH, x, 0.6, 0.3)
    h = float(SCH.lam(0.3) - SCH.lam(0.6))
    u_ref = float(SCH.alpha(s) / SCH.alpha(0.6)) * x - float(SCH.sigma(s)) * np.expm1(h / 2) * ev(x, 0.6)
    assert np.allclose(u, u_ref, atol=1e-14)
    x_ref = float(SCH.alpha(0.3) / SCH.alpha(0.6)) * x - float(SCH.sigma(0.3)) * np.expm1(h) * ev(u_ref, s)
    assert np.allclose(x_next, x_ref, atol=1e-14)
    assert np.array_equal(eps_u, ev(u, s))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.001, 0.99))
def test_midpoint_lambda_property(t_prev, frac):
    t_next = max(SCH.t_min, t_prev * frac)
    if t_next >= t_prev:
        return
    s = midpoint_time(SCH, t_prev, t_next)
    assert t_next < s < t_prev
    assert abs(float(SCH.lam(s)) - 0.5 * float(SCH.lam(t_prev) + SCH.lam(t_next))) <= 1e-9


def test_step_domain():
    with pytest.raises(ValueError):
        dpm1_step(zero_eval, SCH, x_T(), 0.3, 0.6)


def test_ddim_identity_step():
    x = x_T()
    assert np.array_equal(ddim_step(const_eval(1.0), SCH, x, 0.4, 0.4), x)


def test_ddim_zero_eval_matches_dpm1():
    x = x_T()
    assert np.allclose(ddim_step(zero_eval, SCH, x, 0.6, 0.3), dpm1_step(zero_eval, SCH, x, 0.6, 0.3), atol=1e-15)


@pytest.mark.parametrize("spacing", ["logsnr", "time", "quadratic"])
@pytest.mark.parametrize("dist", [GAUSS, ToyDistribution.ring()])
def test_ddim_equals_dpm1_trajectory(spacing, dist):
    ev = AnalyticEvaluator(dist, SCH)
    grid = make_grid(SCH, 25, spacing)
    a = sample(ev, SCH, grid, x_T(128), "ddim").state_array()
    b = sample(ev, SCH, grid, x_T(128), "dpm1").state_array()
    assert np.max(np.abs(a - b)) <= 1e-10


def test_plms_empty_history_zero_eval():
    x = x_T()
    x_next, eps = plms_step(zero_eval, SCH, x, [], 0.6, 0.3)
    assert np.allclose(x_next, float(SCH.alpha(0.3)) / float(SCH.alpha(0.6)) * x, atol=1e-15)


def test_plms_row_sums_and_constant():
    for row in PLMS_COEFFS:
        assert sum(row) == pytest.approx(1.0, abs=1e-15)
    c = np.full((4, 2), 0.3)
    assert np.allclose(plms_combine(c, [c, c, c]), c, atol=1e-15)


def test_plms_order1_matches_dpm1():
    # abar = alpha^2 makes the order-1 transfer coincide with the exponential step
    ev = AnalyticEvaluator(GAUSS, SCH)
    x = x_T()
    a, _ = plms_step(ev, SCH, x, [], 0.6, 0.3)
    assert np.allclose(a, dpm1_step(ev, SCH, x, 0.6, 0.3), atol=1e-12)


def test_grid_endpoints_and_equal_h():
    g = make_grid(SCH, 20)
    assert g.times[0] == SCH.T and g.times[-1] == SCH.t_min
    assert np.all(np.diff(g.times) < 0)
    h = np.diff(g.lambdas)
    assert np.max(np.abs(h - h.mean())) <= 1e-12


def endpoint_error(kind, steps, dist=GAUSS, n=256):
    ev = AnalyticEvaluator(dist, SCH)
    x = x_T(n, seed=7)
    traj = sample(ev, SCH, make_grid(SCH, steps), x, kind)
    exact = gaussian_transport(dist, SCH, x, SCH.T, SCH.t_min)
    return float(np.sqrt(np.mean(np.sum((traj.final - exact) ** 2, axis=1))))


def slope(kind):
    ns = np.array([10, 20, 40, 80])
    errs = np.array([endpoint_error(kind, n) for n in ns])
    return -np.polyfit(np.log(ns), np.log(errs), 1)[0], errs


def test_dpm1_first_order():
    k, errs = slope("dpm1")
    assert 0.8 <= k <= 1.2
    assert 1.6 <= errs[2] / errs[3] <= 2.6


def test_dpm2_second_order():
    k, errs = slope("dpm2")
    assert 1.7 <= k <= 2.3
    assert 3.0 <= errs[2] / errs[3] <= 5.5


def test_plms_converges():
    errs = [endpoint_error("plms", n) for n in (10, 20, 40, 80)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_intermediate_records():
    ev = AnalyticEvaluator(GAUSS, SCH)
    grid = make_grid(SCH, 10)
    tr = sample(ev, SCH, grid, x_T(), "dpm2")
    assert len(tr.states) == 11 and len(tr.eval_inputs) == 10 and len(tr.mid_times) == 10
    for i, s in enumerate(tr.mid_times):
        mid = 0.5 * (grid.lambdas[i] + grid.lambdas[i + 1])
        assert abs(float(SCH.lam(s)) - mid) <= 1e-9
    for kind in ("dpm1", "ddim", "plms"):
        assert not sample(ev, SCH, grid, x_T(), kind).has_intermediates


def test_one_step_grid():
    ev = AnalyticEvaluator(GAUSS, SCH)
    grid = make_grid(SCH, 1)
    x = x_T()
    tr = sample(ev, SCH, grid, x, "dpm2")
    assert np.array_equal(tr.final, dpm2_step(ev, SCH, x, SCH.T, SCH.t_min)[0])


def test_determinism():
    ev = AnalyticEvaluator(ToyDistribution.ring(), SCH)
    grid = make_grid(SCH, 20)
    for kind in ("dpm1", "dpm2", "plms"):
        a = sample(ev, SCH, grid, x_T(seed=3), kind).state_array()
        b = sample(ev, SCH, grid, x_T(seed=3), kind).state_array()
        assert a.tobytes() == b.tobytes()


def test_divergence_flag():
    blowup = const_eval(1e9)
    tr = sample(blowup, SCH, make_grid(SCH, 10), x_T(), "dpm1")
    assert tr.diverged and tr.diverged_step == 1
    assert len(tr.states) == len(tr.times) == 1


def test_nonfinite_start_rejected():
    x = x_T()
    x[0, 0] = np.inf
    with pytest.raises(ValueError):
        sample(zero_eval, SCH, make_grid(SCH, 2), x, "dpm1")


def test_unknown_kind():
    with pytest.raises(ValueError):
        sample(zero_eval, SCH, make_grid(SCH, 2), x_T(), "euler")


def test_csv_dump(tmp_path):
    ev = AnalyticEvaluator(GAUSS, SCH)
    tr = sample(ev, SCH, make_grid(SCH, 3), x_T(2), "dpm2")
    path = tmp_path / "traj.csv"
    write_trajectories_csv(path, [tr])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["chain_id", "step", "t", "s_or_empty", "x0", "x1", "kind", "flags"]
    body = rows[1:]
    assert len(body) == 2 * (4 + 3)
    mids = [r for r in body if r[7] == "intermediate"]
    assert len(mids) == 6 and all(r[3] != "" for r in mids)
    plain = [r for r in body if r[7] == ""]
    assert float(plain[-1][4]) == tr.final[1, 0]


def test_ring_endpoint_energy_distance():
    ring = ToyDistribution.ring()
    rng = np.random.default_rng(11)
    x = rng.standard_normal((4096, 2))
    tr = sample(AnalyticEvaluator(ring, SCH), SCH, make_grid(SCH, 20), x, "dpm2")
    ref = ring.sample(4096, rng)
    assert energy_distance(tr.final, ref) < 0.05
