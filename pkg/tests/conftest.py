import numpy as np
import pytest

from elastic_lab import engine as E


def small_conv_net(seed=0, pool_mode="avg"):
    """Conv -> BN -> ReLU -> Pool -> Flatten -> Dense head; 55 parameters."""
    layers = [
        E.conv2d(1, 2, 3, padding=1), E.batchnorm(2), E.relu(), E.pool2d(2, pool_mode),
        E.flatten(), E.dense(8, 3), E.softmax_ce(),
    ]
    return E.build_network(layers, seed, (1, 4, 4))


def random_batch(net, n=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n,) + net.input_shape)
    y = rng.integers(0, net.num_classes, n)
    return E.Batch(x, y)


def finite_difference(net, batch, tid, h=1e-4):
    p = net.params[tid]
    grad = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + h
        lp, _ = E.forward(net, batch, E.Mode.TRAIN, update_stats=False)
        p[idx] = orig - h
        lm, _ = E.forward(net, batch, E.Mode.TRAIN, update_stats=False)
        p[idx] = orig
        grad[idx] = (lp - lm) / (2 * h)
    return grad


def rel_error(a, b):
    """Max absolute difference relative to the larger infinity norm.

    The floor keeps gradients that are analytically zero (a bias feeding batch
    norm) from turning finite-difference noise into a large relative error.
    """
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def conv_net():
    return small_conv_net()


def budget_instance(t_dw, t_dy, budget, T_forward=0):
    """Profile plus (rho, reserve) whose backward budget is exactly ``budget``."""
    from elastic_lab.profiler import TensorProfile
    prof = TensorProfile.from_timings(t_dw, t_dy, T_forward)
    return prof, 1.0, prof.backward_time - budget


def random_instance(rng, n_range=(3, 16), t_max=1000, imp_max=100.0):
    """Random chain: integer timings in [0, t_max], importances in [0, imp_max],
    budget uniform over [0, full backward time]."""
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    dw = rng.integers(0, t_max + 1, n)
    dy = rng.integers(0, t_max + 1, n)
    imp = rng.uniform(0, imp_max, n)
    budget = int(rng.integers(0, int(dw.sum() + dy.sum()) + 1))
    prof, rho, reserve = budget_instance(dw, dy, budget, int(rng.integers(0, t_max + 1)))
    return prof, imp, rho, reserve


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
