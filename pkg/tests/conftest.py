import numpy as np
import pytest

from dualopf.case_io import RawCase, build_network, load_case, parse_case

TWO_BUS = """
function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
    1   3   0    0   0   0   1   1   0   135   1   1.1   0.9;
    2   1   {pd} {qd} 0   0   1   1   0   135   1   1.1   0.9;
];
mpc.gen = [
    1   0   0   100   -100   {v1}   100   1   200   0;
];
mpc.branch = [
    1   2   {r}   0.1   0   0   0   0   0   0   1;
];
mpc.gencost = [
    2   0   0   3   0.01   2   0;
];
"""


def two_bus_text(pd=10.0, qd=0.0, r=0.0, v1=1.0):
    return TWO_BUS.format(pd=pd, qd=qd, r=r, v1=v1)


def two_bus(**kw):
    return build_network(parse_case(two_bus_text(**kw)))


THREE_BUS = """
mpc.baseMVA = 100;
mpc.bus = [
    1   3   0    0    0   0   1   1   0   135   1   1.06   0.94;
    2   2   20   5    0   0   1   1   0   135   1   1.06   0.94;
    3   1   60   20   0   0   1   1   0   135   1   1.06   0.94;
];
mpc.gen = [
    1   0    0   100   -100   1.02   100   1   150   0;
    2   40   0   60    -40    1.01   100   1   80    10;
];
mpc.branch = [
    1   2   0.02   0.10   0.02   60   0   0   0   0   1;
    1   3   0.03   0.12   0.02   60   0   0   0   0   1;
    2   3   0.02   0.08   0.01   {rate23}   0   0   0   0   1;
];
mpc.gencost = [
    2   0   0   3   0.02   2.0   0;
    2   0   0   3   0.01   3.0   0;
];
"""


def three_bus(rate23=40):
    return build_network(parse_case(THREE_BUS.format(rate23=rate23)))


def random_raw(n: int, rng: np.random.Generator, taps: bool = False, charging: bool = True) -> RawCase:
    """Connected n-bus network: bus 1 slack, bus 2 PV, the rest PQ; modest r/x and loads."""
    bus = np.zeros((n, 13))
    bus[:, 0] = np.arange(1, n + 1)
    bus[:, 1] = 1
    bus[0, 1] = 3
    bus[1, 1] = 2
    bus[2:, 2] = rng.uniform(5, 30, n - 2)
    bus[2:, 3] = rng.uniform(0, 10, n - 2)
    bus[:, 6] = 1
    bus[:, 7] = 1
    bus[:, 9] = 135
    bus[:, 10] = 1
    bus[:, 11] = 1.1
    bus[:, 12] = 0.9

    edges = [(int(rng.integers(0, k)), k) for k in range(1, n)]
    for _ in range(int(rng.integers(0, n))):
        a, b = sorted(rng.choice(n, 2, replace=False).tolist())
        if (a, b) not in edges:
            edges.append((a, b))
    branch = np.zeros((len(edges), 13))
    for k, (a, b) in enumerate(edges):
        x = rng.uniform(0.02, 0.3)
        branch[k, :5] = [a + 1, b + 1, rng.uniform(0, 0.3) * x, x, rng.uniform(0, 0.05) if charging else 0.0]
        branch[k, 5] = 100
        branch[k, 8] = rng.uniform(0.95, 1.05) if taps and rng.random() < 0.5 else 0.0
        branch[k, 10] = 1
        branch[k, 11:] = [-360, 360]
    gen = np.zeros((2, 10))
    gen[0] = [1, 0, 0, 100, -100, 1.0, 100, 1, 200, 0]
    gen[1] = [2, rng.uniform(5, 30), 0, 100, -100, rng.uniform(0.98, 1.04), 100, 1, 100, 0]
    gencost = np.array([[2, 0, 0, 3, 0.02, 2, 0], [2, 0, 0, 3, 0.03, 1.5, 0]], dtype=float)
    return RawCase(100.0, bus, gen, branch, gencost)


def random_network(n, seed, **kw):
    return build_network(random_raw(n, np.random.default_rng(seed), **kw))


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


LOOSE_THREE_BUS = """
mpc.baseMVA = 100;
mpc.bus = [
    1   3   0    0    0   0   1   1   0   135   1   1.02   1.0;
    2   2   20   5    0   0   1   1   0   135   1   1.02   1.0;
    3   1   60   20   0   0   1   1   0   135   1   1.5    0.5;
];
mpc.gen = [
    1   0    0   300   -300   1.02   100   1   300   -50;
    2   40   0   300   -300   1.01   100   1   50    0;
];
mpc.branch = [
    1   2   0.02   0.10   0.02   500   0   0   0   0   1;
    1   3   0.03   0.12   0.02   500   0   0   0   0   1;
    2   3   0.02   0.08   0.01   500   0   0   0   0   1;
];
mpc.gencost = [
    2   0   0   3   0.02   2.0   0;
    2   0   0   3   0.01   3.0   0;
];
"""


def loose_three_bus():
    """Limits wide enough that no reachable decision violates anything."""
    return build_network(parse_case(LOOSE_THREE_BUS))


# ------------------------------------------------------------ acceptance summary

ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k)):
        terminalreporter.write_line(ACCEPTANCE[key])
