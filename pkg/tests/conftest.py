import dataclasses

import numpy as np
import pytest

from hypcomp.config import load_config
from hypcomp.design import run_design
from hypcomp.model import Grid
from hypcomp.simulator import Gains

from plants import EXAMPLE


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def _report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return passed

    return _report


@pytest.fixture(scope="session")
def example():
    return load_config(EXAMPLE)


@pytest.fixture(scope="session")
def design200(example):
    return run_design(example.spec, example.params, Grid(200))


@pytest.fixture(scope="session")
def design400(example):
    return run_design(example.spec, example.params, Grid(400))


def sim_gains(design):
    g = design.gains
    return Gains(design.grid, g.K_xi, g.K_x, g.L_xi, g.L)


@pytest.fixture(scope="session")
def gains200(design200):
    return sim_gains(design200)


@pytest.fixture(scope="session")
def full_sim(example):
    return dataclasses.replace(example.sim, decimation=1)


@pytest.fixture(scope="session")
def closed_loop200(example, gains200, full_sim):
    from hypcomp.simulator import simulate_closed_loop

    return simulate_closed_loop(example.spec, gains200, full_sim, Grid(200))


@pytest.fixture(scope="session")
def error_system200(example, gains200, full_sim):
    from hypcomp.simulator import simulate_error_system

    return simulate_error_system(example.spec, gains200, full_sim, Grid(200))


@pytest.fixture(scope="session")
def error_system400(example, design400, full_sim):
    from hypcomp.simulator import simulate_error_system

    return simulate_error_system(example.spec, sim_gains(design400), full_sim, Grid(400))


def theta_sup(design, trace):
    """``sup_z |theta(z, t)|`` of an error-system trace, with
    ``theta = T_o[eps] - Gamma eps_xi``."""
    from hypcomp.volterra import trapezoid_weights

    o = design.observer
    g = design.grid
    W = trapezoid_weights(len(g), g.h)
    th = (trace.x + np.einsum("ab,ijab,tjb->tia", W, o.R.values, trace.x)
          - np.einsum("aiq,tq->tia", o.Gamma, trace.xi))
    return np.abs(th).max(axis=(1, 2))
