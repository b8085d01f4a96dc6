import numpy as np
import pytest

from splitshield import nn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_param_check(model, x, y, n_checks=10, h=1e-5, seed=0, rtol=1e-4):
    """Central finite-difference check on randomly chosen parameters.

    Train-mode forwards are used throughout so batch statistics stay
    consistent between the analytic and numeric paths.
    """
    check_rng = np.random.default_rng(seed)
    probs = model.forward(x, train=True)
    _, gprobs = nn.cross_entropy(probs, y)
    model.backward(gprobs)
    params = [p for _, _, p in model.parameters()]
    grads = model.gradients()
    worst = 0.0
    for _ in range(n_checks):
        pi = int(check_rng.integers(len(params)))
        p = params[pi]
        flat_idx = int(check_rng.integers(p.size))
        orig = p.flat[flat_idx]
        p.flat[flat_idx] = orig + h
        lp, _ = nn.cross_entropy(model.forward(x, train=True), y)
        p.flat[flat_idx] = orig - h
        lm, _ = nn.cross_entropy(model.forward(x, train=True), y)
        p.flat[flat_idx] = orig
        g_fd = (lp - lm) / (2 * h)
        g_an = grads[pi].flat[flat_idx]
        rel = abs(g_an - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, rel)
    assert worst <= rtol, f"finite-difference mismatch: {worst:.3e}"
    return worst


def fd_penalty_check(fn, acts, n_checks=10, h=1e-6, seed=0, rtol=1e-4):
    """Finite-difference check for a (value, grad) penalty function."""
    check_rng = np.random.default_rng(seed)
    _, grad = fn(acts)
    worst = 0.0
    for _ in range(n_checks):
        i = int(check_rng.integers(acts.shape[0]))
        j = int(check_rng.integers(acts.shape[1]))
        bumped = acts.copy()
        bumped[i, j] += h
        vp, _ = fn(bumped)
        bumped[i, j] -= 2 * h
        vm, _ = fn(bumped)
        g_fd = (vp - vm) / (2 * h)
        rel = abs(grad[i, j] - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, rel)
    assert worst <= rtol, f"penalty finite-difference mismatch: {worst:.3e}"
    return worst
