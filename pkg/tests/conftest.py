from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from dtr.autograd import Tensor, backward
from dtr.rng import SplitMix64

FD_STEP = 1e-5


def numeric_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. each tensor's data."""
    out = []
    for p in params:
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    backward(fn())
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    ana = analytic_grads(fn, params)
    num = numeric_grads(fn, params)
    return max(max_rel_err(a, n) for a, n in zip(ana, num))


def rand_tensor(rng: SplitMix64, *shape: int, low: float = -2.0, high: float = 2.0) -> Tensor:
    n = int(np.prod(shape))
    return Tensor(rng.uniform(n, low, high).reshape(shape), requires_grad=True)


@pytest.fixture
def rng():
    return SplitMix64(1234)


def make_run(seed: int = 0, overrides: Sequence[str] = ()):
    """Config plus (source, target) for the default shifted-Gaussians task."""
    from dtr.cli import build_datasets, sync_dims
    from dtr.config import apply_overrides, run_config_from_dict

    doc = apply_overrides({}, [f"train.seed={seed}", f"data.seed={seed}", *overrides])
    cfg = run_config_from_dict(doc)
    source, target = build_datasets(cfg)
    sync_dims(cfg, source)
    return cfg, source, target


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
