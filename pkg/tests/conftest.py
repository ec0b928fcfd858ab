import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from imitmpc.harness.systems import make_benchmark_system
from imitmpc.mpc import TerminalMode, make_mpc_spec
from imitmpc.rmpc import make_rmpc_spec

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bench3():
    """d=3 benchmark system, constraint boxes and initial distribution."""
    return make_benchmark_system(3, "paper-matrix")


@pytest.fixture(scope="session")
def bench5():
    return make_benchmark_system(5, "paper-matrix")


@pytest.fixture(scope="session")
def spec3(bench3):
    """Nominal MPC with LQR terminal cost only (the benchmark default)."""
    sys, X, U, _ = bench3
    return make_mpc_spec(sys, np.eye(3), np.eye(1), 20, X, U, TerminalMode.LQR_COST)


@pytest.fixture(scope="session")
def spec3_set(bench3):
    """Nominal MPC with LQR terminal cost and the polytopic invariant terminal set."""
    sys, X, U, _ = bench3
    return make_mpc_spec(sys, np.eye(3), np.eye(1), 20, X, U, TerminalMode.LQR_COST_AND_SET, "polytope")


@pytest.fixture(scope="session")
def rspec3(spec3_set):
    """Robust MPC at eps = 0.1 with the tightened invariant terminal set."""
    return make_rmpc_spec(spec3_set, 0.1, terminal_set="polytope")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
