import numpy as np
import pytest

from biflagella.config import load_config
from biflagella.rod import RodState, build_robot, frames_at


def state_at(robot, ref: RodState, x, theta) -> RodState:
    """Rod state at positions ``x`` with frames transported from ``ref``."""
    t, d1, d2, tw = frames_at(robot, ref, x)
    return RodState(np.array(x), np.array(theta), np.zeros_like(x), np.zeros(len(theta)),
                    t, d1, d2, tw)


def perturbed_state(robot, rest, rng, pos_scale=1e-3, twist_scale=0.1):
    q0 = robot.pack(rest.x, rest.theta)
    scale = np.full(q0.size, pos_scale)
    scale[robot.edge_dof[robot.edge_dof >= 0]] = twist_scale
    x, th = robot.unpack(q0 + rng.normal(size=q0.size) * scale)
    return state_at(robot, rest, x, th)


@pytest.fixture(scope="session")
def coarse():
    """A coarse robot (40 mm segments) for expensive finite-difference checks."""
    cfg = load_config("segment_length = 40 mm\n")
    robot, rest = build_robot(cfg)
    return cfg, robot, rest


@pytest.fixture(scope="session")
def desk():
    cfg = load_config("segment_length = 10 mm\ntime_step = 2 ms\n")
    robot, rest = build_robot(cfg)
    return cfg, robot, rest


# lines collected by the acceptance suite and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
