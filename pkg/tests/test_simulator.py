import csv
import dataclasses

import numpy as np
import pytest

from hypcomp.analysis import decoupled_state, full_P
from hypcomp.model import Grid, SimConfig
from hypcomp.simulator import (Gains, SimulationError, evaluate_feedback, plot_trace,
                               simulate_closed_loop, simulate_error_system, simulate_open_loop,
                               time_step, write_snapshots_csv, write_trace_csv)

from plants import toy_spec


# --- feedback law ----------------------------------------------------------------

def test_feedback_zero_state_is_zero(gains200, example):
    u = evaluate_feedback(np.zeros((4, 201)), np.zeros(3), gains200, example.spec.Q1)
    np.testing.assert_array_equal(u, 0.0)


def test_feedback_without_distributed_gain():
    g = Grid(8)
    K_xi = np.array([[1.0, -2.0]])
    gains = Gains(g, K_xi, np.zeros((9, 1, 2)))
    xhat = np.vstack([np.ones(9), np.linspace(0, 3, 9)])
    u = evaluate_feedback(xhat, [0.5, 0.25], gains, [[2.0]])
    assert u[0] == pytest.approx(-2.0 * 3.0 - (0.5 - 0.5), abs=1e-15)


def test_feedback_quadrature_refinement():
    vals = []
    for N in (50, 100, 200):
        g = Grid(N)
        K_x = np.stack([np.cos(g.z), np.exp(g.z)], axis=-1)[:, None, :]
        xhat = np.vstack([np.sin(2 * g.z), g.z ** 2])
        vals.append(evaluate_feedback(xhat, [0.0], Gains(g, np.zeros((1, 1)), K_x), [[0.0]])[0])
    richardson = abs(vals[0] - vals[1]) * 4 / 3  # error estimate of the N = 50 value
    assert abs(vals[0] - vals[2]) <= 4 * richardson
    assert abs(vals[0] - vals[2]) <= (1 / 50) ** 2


def test_gains_resampling_is_identity_on_same_grid(gains200):
    assert gains200.on(Grid(200)) is gains200
    fine = gains200.on(Grid(400))
    np.testing.assert_array_equal(fine.K_x[::2], gains200.K_x)


# --- time stepping ----------------------------------------------------------------

def test_time_step_respects_cfl(example):
    dt, steps = time_step(example.spec, Grid(200), 0.9, 6.0)
    assert dt * 3 / (1 / 200) <= 0.9 + 1e-12
    assert steps * dt == pytest.approx(6.0, rel=1e-14)
    assert steps == 4000


def test_pure_transport_leaves_domain():
    spec = toy_spec(["1", "-1"], 1)
    g = Grid(200)
    cfg = SimConfig(t_final=1.2, x0=["exp(-100*(z-0.5)^2)", "0"], decimation=1)
    tr = simulate_open_loop(spec, cfg, g)
    assert tr.max_cfl <= 0.9 + 1e-12
    late = tr.t > 1.0 + 5 * g.h
    assert np.any(late) and np.max(tr.x_sup[late]) <= 1e-6
    assert np.all(np.diff(tr.t) > 0)


def test_closed_loop_zero_initial_state_stays_zero(example, gains200):
    cfg = SimConfig(t_final=0.2, decimation=5)
    tr = simulate_closed_loop(example.spec, gains200, cfg, Grid(200))
    for arr in (tr.x, tr.xi, tr.xhat, tr.xihat, tr.u, tr.y):
        assert np.all(arr == 0.0)


def test_error_system_zero_initial_error(example, gains200):
    cfg = SimConfig(t_final=0.2, x0=["z", "0", "0", "0"], xhat0=["z", "0", "0", "0"])
    tr = simulate_error_system(example.spec, gains200, cfg, Grid(200))
    assert np.all(tr.x == 0.0) and np.all(tr.xi == 0.0)


def test_closed_loop_trace_shapes(closed_loop200, example):
    tr = closed_loop200
    T = len(tr.t)
    assert tr.x.shape == (T, 4, 201) and tr.xhat.shape == (T, 4, 201)
    assert tr.xi.shape == (T, 3) and tr.u.shape == (T, 2) and tr.y.shape == (T, 2)
    assert np.all(np.diff(tr.t) > 0) and tr.t[-1] == pytest.approx(example.sim.t_final)
    assert tr.max_cfl <= example.sim.cfl + 1e-12
    np.testing.assert_array_equal(tr.y, tr.x[:, :2, 0])


def test_observer_requires_gains(example):
    g = Grid(16)
    gains = Gains(g, np.zeros((2, 3)), np.zeros((17, 2, 4)))
    with pytest.raises(ValueError, match="observer gains"):
        simulate_closed_loop(example.spec, gains, SimConfig(t_final=0.1), g)


def test_blow_up_guard_reports_last_time():
    # reflection gain 4 per round trip: exponential growth without a controller
    spec = toy_spec(["1", "-1"], 1, Q0=[[2.0]], Q1=[[2.0]])
    cfg = SimConfig(t_final=200.0, x0=["1", "1"])
    with pytest.raises(SimulationError) as info:
        simulate_open_loop(spec, cfg, Grid(20))
    assert "1e+12" in str(info.value)
    assert 0 < info.value.t_last < 200


# --- target-system property with exact-state feedback ------------------------------

def test_state_feedback_zeroes_decoupled_inflow(example, design200, gains200):
    cfg = dataclasses.replace(example.sim, t_final=3.0, decimation=5)
    tr = simulate_closed_loop(example.spec, gains200, cfg, Grid(200), state_feedback=True)
    assert tr.xhat is None
    dec = design200.decoupling
    e = decoupled_state(tr.x, tr.xi, design200.kernel.K, full_P(dec.P_I), dec.N_I)
    peak = np.max(np.abs(e))
    # scheme tolerance: first-order upwind, error of order h relative to the peak
    assert np.max(np.abs(e[:, :2, -1])) <= design200.grid.h * peak


# --- finite-time observer decay rate --------------------------------------------------

@pytest.mark.xfail(strict=True, reason=(
    "the O(h) boundary mismatch of the upwind scheme, amplified by the reflection at z = 1, "
    "adds slowly decaying loop modes that dominate eps_xi at N = 200"))
def test_eps_xi_log_slope_matches_slowest_observer_pole(error_system200, design200):
    tr = error_system200
    to = design200.diagnostics["t_o"]
    sel = (tr.t >= to + 0.5) & (tr.t <= to + 1.5)
    slope = np.polyfit(tr.t[sel], np.log(np.linalg.norm(tr.xi[sel], axis=1)), 1)[0]
    print(f"log-slope of |eps_xi| = {slope:.3f}")
    assert 1.2 * -5 <= slope <= 0.8 * -5


def test_theta_residual_shrinks_under_refinement(example, design200, design400, error_system200,
                                                 error_system400):
    from conftest import theta_sup

    ratios = []
    for design, tr in ((design200, error_system200), (design400, error_system400)):
        g = design.grid
        th = theta_sup(design, tr)
        t0 = design.diagnostics["t_o"] + 10 * g.h * 3.0
        ratios.append(np.max(th[tr.t > t0]) / th[0])
    assert ratios[0] / ratios[1] >= 1.5


# --- export ---------------------------------------------------------------------------

def test_trace_csv_and_snapshots(tmp_path, example, gains200):
    cfg = dataclasses.replace(example.sim, t_final=0.05, decimation=4)
    g = Grid(200)
    tr = simulate_closed_loop(example.spec, gains200, cfg, g)
    write_trace_csv(tr, tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0][:4] == ["t", "xi1", "xi2", "xi3"]
    assert "eps_xi_norm" in rows[0] and "u2" in rows[0] and "eps_x4_sup" in rows[0]
    assert len(rows) == len(tr.t) + 1
    assert float(rows[-1][0]) == pytest.approx(0.05)
    write_snapshots_csv(tr, tmp_path / "x.csv", "x")
    snap = list(csv.reader(open(tmp_path / "x.csv")))
    assert snap[0] == ["t", "z", "component", "value"]
    assert len(snap) == 1 + len(tr.t) * 4 * 201
    assert float(snap[1 + 100][3]) == pytest.approx(0.5)  # x_1(0.5, 0) = 0.5
    with pytest.raises(ValueError):
        write_snapshots_csv(simulate_open_loop(example.spec, cfg, g), tmp_path / "xh.csv", "xhat")


def test_plots_are_svg(tmp_path, example, gains200):
    pytest.importorskip("matplotlib")
    cfg = dataclasses.replace(example.sim, t_final=0.05)
    tr = simulate_closed_loop(example.spec, gains200, cfg, Grid(200))
    files = plot_trace(tr, tmp_path)
    assert sorted(f.name for f in files) == ["eps_xi_norm.svg", "x_sup.svg", "xi_norm.svg"]
    assert all(f.read_text().lstrip().startswith("<?xml") for f in files)
