import numpy as np
import pytest
from hypothesis import settings

from obdecsim.world import Box, TargetSpec, World

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def make_world(bounds=(0.0, 2.0, 0.0, 2.0), cell=2.0, boxes=(), target=None, ceiling=3.0,
               takeoff=()):
    boxes = tuple(b if isinstance(b, Box) else Box(*b) for b in boxes)
    if target is None:
        target = ((bounds[0] + bounds[1]) / 2, (bounds[2] + bounds[3]) / 2, 0.0)
    return World("toy", tuple(bounds), ceiling, cell, boxes, TargetSpec(tuple(target)),
                 tuple(takeoff))


def ray_march(world, origin, direction, max_range, step=1e-4):
    """Brute-force range: march in fixed steps, then bisect the first crossing."""
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)

    def occupied(t):
        p = o[None, :] + t[:, None] * d[None, :]
        xmin, xmax, ymin, ymax, zmin, zmax = world.bounds_arr
        out = ((p[:, 0] < xmin) | (p[:, 0] > xmax) | (p[:, 1] < ymin) | (p[:, 1] > ymax)
               | (p[:, 2] < zmin) | (p[:, 2] > zmax))
        for b in world.boxes_arr:
            out |= ((p[:, 0] >= b[0]) & (p[:, 0] <= b[1]) & (p[:, 1] >= b[2]) & (p[:, 1] <= b[3])
                    & (p[:, 2] >= b[4]) & (p[:, 2] <= b[5]))
        return out

    if occupied(np.array([0.0]))[0]:
        return 0.0
    ts = np.arange(0.0, max_range + step, step)
    occ = np.flatnonzero(occupied(ts))
    if occ.size == 0:
        return max_range
    hi = ts[occ[0]]
    lo = hi - step
    for _ in range(40):
        mid = np.array([(lo + hi) / 2])
        if occupied(mid)[0]:
            hi = mid[0]
        else:
            lo = mid[0]
    return min(hi, max_range)


@pytest.fixture(scope="session")
def scenario_one():
    from obdecsim.world import load_scenario
    return load_scenario("scenario-one", "P1")


@pytest.fixture(scope="session")
def scenario_two():
    from obdecsim.world import load_scenario
    return load_scenario("scenario-two", "P3")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
