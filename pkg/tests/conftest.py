import numpy as np
import pytest

from tumorseg.architectures import ArchConfig
from tumorseg.datapipe import make_phantom, preprocess

# narrow widths keep every architecture fast while preserving all geometry
TINY = ArchConfig(local_maps=(4, 4), global_maps=4)

ACCEPTANCE_LINES: list[str] = []


def central_difference(f, x, eps):
    """Numerical gradient of scalar ``f`` at float64 array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def sampled_difference(f, x, eps, count, rng):
    """Central differences at ``count`` random flat positions of ``x``.

    Returns ``(flat_indices, numeric_values)``; all positions when ``x`` is small.
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if flat.size <= count else rng.choice(flat.size, count, replace=False)
    vals = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        vals[n] = (up - down) / (2 * eps)
    return idx, vals


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def spaced_values(rng, shape, gap=0.01):
    """Distinct values at least ``gap`` apart, in random order.

    Keeps every max/argmax decision away from ties, so finite differences
    with a smaller step never cross a kink.
    """
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) * gap


@pytest.fixture(scope="session")
def phantom():
    return make_phantom(seed=3)


@pytest.fixture(scope="session")
def prepped(phantom):
    return preprocess(phantom)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def mini_graph():
    """Two-pathway miniature: 11x11 input, concat, dropout, 7x7 output layer."""
    from tumorseg import netgraph as ng
    layers = [
        ng.conv_block("a1", "image", 3, 3, maxout_k=2, pool_p=2),
        ng.dropout("a1_drop", "a1", 0.3),
        ng.conv_block("a2", "a1_drop", 2, 2, maxout_k=2),
        ng.conv_block("g1", "image", 5, 2, maxout_k=3),
        ng.concat("both", "a2", "g1"),
        ng.dropout("both_drop", "both", 0.5),
        ng.softmax_output("out", "both_drop", 7),
    ]
    return ng.ModelGraph("mini", {"image": 2}, layers)


def two_layer_graph():
    """Conv block then output layer on 8x8 inputs (output 2x2)."""
    from tumorseg import netgraph as ng
    layers = [ng.conv_block("c1", "image", 3, 3, maxout_k=2, pool_p=2),
              ng.softmax_output("out", "c1", 4)]
    return ng.ModelGraph("two", {"image": 3}, layers)
