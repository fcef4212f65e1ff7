import numpy as np
import pytest

from ddp_irl.gradient import TrajectoryGradient
from ddp_irl.solver import IpddpConfig


@pytest.fixture(scope="session")
def tight():
    return IpddpConfig(tol=1e-11)


def fd_trajectory(solve, p, x0, theta, h=1e-5):
    """Central differences of full re-solves, one column per parameter."""
    cx, cu = [], []
    for j in range(len(theta)):
        e = np.zeros(len(theta))
        e[j] = h
        a = solve(p, theta + e, x0).traj
        b = solve(p, theta - e, x0).traj
        cx.append((a.states - b.states) / (2 * h))
        cu.append((a.controls - b.controls) / (2 * h))
    return TrajectoryGradient(np.stack(cx, -1), np.stack(cu, -1))


def fd_rel_error(G, F):
    """Largest per-entry error in units of max(1, |reference|)."""
    err = np.concatenate([np.abs(G.dx - F.dx).ravel(), np.abs(G.du - F.du).ravel()])
    ref = np.concatenate([np.abs(F.dx).ravel(), np.abs(F.du).ravel()])
    return float(np.max(err / np.maximum(1.0, ref)))


ACCEPTANCE = {}


def record_criterion(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
