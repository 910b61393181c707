"""Finite-difference gradient suite for every layer and the full model loss.

Each check projects a layer output onto a fixed random tensor so the scalar
loss exercises every output coordinate, then compares the analytic gradient
with central differences via :func:`vtnet.nn.grad_check`.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np

from . import nn
from .model import Batch, VtnetConfig, init_model, loss_and_grads

TOLERANCE = 1e-4
DEFAULT_SEEDS = tuple(range(20))


def _check_all(f: Callable, points: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, point in points.items():
        def g(v, name=name):
            args = dict(points)
            args[name] = v
            value, grads = f(**args)
            return value, grads[name]
        worst = max(worst, nn.grad_check(g, point))
    return worst


def check_linear(seed: int) -> float:
    rng = np.random.default_rng([seed, 1])
    R = rng.standard_normal((3, 4))

    def f(x, W, b):
        out, cache = nn.linear_forward(x, W, b)
        dx, dW, db = nn.linear_backward(R, cache)
        return float(np.sum(R * out)), {"x": dx, "W": dW, "b": db}

    return _check_all(f, {"x": rng.standard_normal((3, 5)), "W": rng.standard_normal((4, 5)),
                          "b": rng.standard_normal(4)})


def check_relu(seed: int) -> float:
    rng = np.random.default_rng([seed, 2])
    x = rng.standard_normal((4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    R = rng.standard_normal(x.shape)

    def f(x):
        out, mask = nn.relu_forward(x)
        return float(np.sum(R * out)), {"x": nn.relu_backward(R, mask)}

    return _check_all(f, {"x": x})


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng([seed, 3])
    R = rng.standard_normal((3, 2, 4, 4))

    def f(x, w, b):
        out, cache = nn.conv2d_forward(x, w, b)
        dx, dw, db = nn.conv2d_backward(R, cache)
        return float(np.sum(R * out)), {"x": dx, "w": dw, "b": db}

    return _check_all(f, {"x": rng.standard_normal((2, 2, 8, 8)),
                          "w": rng.standard_normal((3, 2, 5, 5)),
                          "b": rng.standard_normal(3)})


def check_maxpool2d(seed: int) -> float:
    rng = np.random.default_rng([seed, 4])
    # distinct values, spaced well beyond the difference step, so no window ties
    x = rng.permutation(np.arange(2 * 3 * 6 * 6, dtype=float)).reshape(2, 3, 6, 6) * 0.01
    R = rng.standard_normal((2, 3, 3, 3))

    def f(x):
        out, cache = nn.maxpool2d_forward(x)
        return float(np.sum(R * out)), {"x": nn.maxpool2d_backward(R, cache)}

    return _check_all(f, {"x": x})


def check_gru(seed: int, steps: int = 6) -> float:
    rng = np.random.default_rng([seed, 5])
    n_in, hidden = 3, 4
    params = {k: v + 0.5 * rng.standard_normal(v.shape)
              for k, v in nn.init_gru(rng, n_in, hidden).items()}
    mask = np.ones((2, steps), dtype=bool)
    mask[1, :2] = False
    R = rng.standard_normal((2, hidden))

    def f(xs, **p):
        h, cache = nn.gru_forward(xs, mask, p)
        grads, dxs, _ = nn.gru_backward(R, cache, need_dx=True)
        return float(np.sum(R * h)), {"xs": dxs, **grads}

    return _check_all(f, {"xs": rng.standard_normal((2, steps, n_in)), **params})


def check_log_softmax_nll(seed: int) -> float:
    rng = np.random.default_rng([seed, 6])
    targets = rng.integers(0, 2, 5)

    def f(logits):
        loss, grad = nn.log_softmax_nll(logits, targets)
        return loss, {"logits": grad}

    return _check_all(f, {"logits": 3 * rng.standard_normal((5, 2))})


def tiny_config(variant: str = "vtnet", seed: int = 0) -> VtnetConfig:
    return VtnetConfig(variant=variant, hidden_size=4, conv_filters=(2, 3), head_hidden=5,
                       image_height=16, image_width=16, seed=seed, dtype="float64")


def tiny_batch(seed: int, n_items: int = 2, steps: int = 6) -> Batch:
    rng = np.random.default_rng([seed, 7])
    mask = np.ones((n_items, steps), dtype=bool)
    mask[0, :1] = False
    seqs = rng.standard_normal((n_items, steps, 8)) * mask[..., None]
    images = rng.random((n_items, 16, 16))
    labels = np.arange(n_items) % 2
    return Batch(seqs, mask, images, np.arange(n_items), labels)


def check_model(seed: int, variant: str = "vtnet") -> dict[str, float]:
    """Max relative error of the end-to-end loss gradient per parameter group."""
    cfg = tiny_config(variant, seed)
    params = init_model(cfg).params
    rng = np.random.default_rng([seed, 8])
    # perturb zero biases so ReLU kinks and gates see generic inputs
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    batch = tiny_batch(seed)
    errors = {}
    for name in params:
        def g(v, name=name):
            p = dict(params)
            p[name] = v
            loss, grads = loss_and_grads(p, cfg, batch)
            return loss, grads[name]
        errors[name] = nn.grad_check(g, params[name])
    return errors


LAYER_CHECKS: dict[str, Callable[[int], float]] = {
    "linear": check_linear,
    "relu": check_relu,
    "conv2d": check_conv2d,
    "maxpool2d": check_maxpool2d,
    "gru": check_gru,
    "log_softmax_nll": check_log_softmax_nll,
}


def run_suite(seeds: Iterable[int] = DEFAULT_SEEDS) -> dict[str, float]:
    """Worst error per layer and per model parameter group over ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, check in LAYER_CHECKS.items():
            worst[name] = max(worst.get(name, 0.0), check(seed))
        for group, err in check_model(seed).items():
            key = f"vtnet.{group}"
            worst[key] = max(worst.get(key, 0.0), err)
    return worst
