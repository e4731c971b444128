"""Gradient verification registry: per-operator and end-to-end checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig, init_params, one_hot_batch, unet_forward
from .tensor import Tensor
from .train import dice_loss

OPERATOR_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_kinks(x, margin=1e-3):
    return np.where(np.abs(x) < margin, x + 2 * margin, x)


def _check_conv2d(rng):
    x = Tensor(_rand(rng, 2, 2, 5, 5), requires_grad=True)
    w = Tensor(_rand(rng, 3, 2, 3, 3), requires_grad=True)
    b = Tensor(_rand(rng, 3), requires_grad=True)
    cof = Tensor(_rand(rng, 2, 3, 5, 5))
    errs = [
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.conv2d(v, w, b, padding=1), cof)), x),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.conv2d(x, v, b, padding=1), cof)), w),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.conv2d(x, w, v, padding=1), cof)), b),
    ]
    return max(errs)


def _check_conv_transpose2d(rng):
    x = Tensor(_rand(rng, 1, 2, 3, 3), requires_grad=True)
    w = Tensor(_rand(rng, 2, 2, 2, 2), requires_grad=True)
    cof = Tensor(_rand(rng, 1, 2, 6, 6))
    errs = [
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.conv_transpose2d(v, w, stride=2), cof)), x),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.conv_transpose2d(x, v, stride=2), cof)), w),
    ]
    return max(errs)


def _check_maxpool2d(rng):
    x = Tensor(_rand(rng, 2, 2, 4, 4), requires_grad=True)
    cof = Tensor(_rand(rng, 2, 2, 2, 2))
    return T.grad_check(lambda v: T.reduce_sum(T.mul(T.maxpool2d(v, 2), cof)), x)


def _check_per_channel_affine(rng):
    x = Tensor(_rand(rng, 2, 3, 4, 4), requires_grad=True)
    gamma = Tensor(_rand(rng, 2, 3), requires_grad=True)
    beta = Tensor(_rand(rng, 2, 3), requires_grad=True)
    cof = Tensor(_rand(rng, 2, 3, 4, 4))
    errs = [
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.per_channel_affine(v, gamma, beta), cof)), x),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.per_channel_affine(x, v, beta), cof)), gamma),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.per_channel_affine(x, gamma, v), cof)), beta),
    ]
    return max(errs)


def _check_linear(rng):
    x = Tensor(_rand(rng, 3, 4), requires_grad=True)
    w = Tensor(_rand(rng, 2, 4), requires_grad=True)
    b = Tensor(_rand(rng, 2), requires_grad=True)
    cof = Tensor(_rand(rng, 3, 2))
    errs = [
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.linear(v, w, b), cof)), x),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.linear(x, v, b), cof)), w),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.linear(x, w, v), cof)), b),
    ]
    return max(errs)


def _check_relu(rng):
    x = Tensor(_away_from_kinks(_rand(rng, 4, 5)), requires_grad=True)
    cof = Tensor(_rand(rng, 4, 5))
    return T.grad_check(lambda v: T.reduce_sum(T.mul(T.relu(v), cof)), x)


def _check_sigmoid(rng):
    x = Tensor(_rand(rng, 4, 5), requires_grad=True)
    cof = Tensor(_rand(rng, 4, 5))
    return T.grad_check(lambda v: T.reduce_sum(T.mul(T.sigmoid(v), cof)), x)


def _check_concat_channels(rng):
    a = Tensor(_rand(rng, 1, 2, 3, 3), requires_grad=True)
    b = Tensor(_rand(rng, 1, 3, 3, 3), requires_grad=True)
    cof = Tensor(_rand(rng, 1, 5, 3, 3))
    errs = [
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.concat_channels(v, b), cof)), a),
        T.grad_check(lambda v: T.reduce_sum(T.mul(T.concat_channels(a, v), cof)), b),
    ]
    return max(errs)


def _check_reduce_sum(rng):
    x = Tensor(_rand(rng, 3, 4), requires_grad=True)
    return T.grad_check(T.reduce_sum, x)


def _check_slice_cols(rng):
    x = Tensor(_rand(rng, 3, 6), requires_grad=True)
    cof = Tensor(_rand(rng, 3, 3))
    return T.grad_check(lambda v: T.reduce_sum(T.mul(T.slice_cols(v, 1, 4), cof)), x)


def _check_elementwise_arithmetic(rng):
    x = Tensor(_rand(rng, 3, 3) + 3.0, requires_grad=True)  # positive, safe divisor
    y = Tensor(_rand(rng, 3, 3) + 3.0)
    return T.grad_check(lambda v: T.reduce_sum(T.div(T.mul(v, y), T.add(v, y))), x)


def _check_dice_loss(rng):
    target = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(float))
    pred = Tensor(0.05 + 0.9 * rng.random((2, 1, 4, 4)), requires_grad=True)
    return T.grad_check(lambda p: dice_loss(p, target), pred, h=1e-6)


OPERATOR_CHECKS = {
    "conv2d": _check_conv2d,
    "conv_transpose2d": _check_conv_transpose2d,
    "maxpool2d": _check_maxpool2d,
    "per_channel_affine": _check_per_channel_affine,
    "linear": _check_linear,
    "relu": _check_relu,
    "sigmoid": _check_sigmoid,
    "concat_channels": _check_concat_channels,
    "reduce_sum": _check_reduce_sum,
    "slice_cols": _check_slice_cols,
    "elementwise_arithmetic": _check_elementwise_arithmetic,
    "dice_loss": _check_dice_loss,
}


def end_to_end_error(seed: int = 0) -> float:
    """Worst finite-difference error over every parameter of a depth-1 FiLMed
    U-Net under the dice loss."""
    cfg = ModelConfig(depth=1, base_filters=2, n_metadata_classes=3)
    model = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    img = Tensor(rng.random((1, 1, 8, 8)))
    md = one_hot_batch([rng.integers(0, 3)], 3)
    mask = Tensor((rng.random((1, 1, 8, 8)) > 0.6).astype(float))

    def loss_fn(_):
        return dice_loss(unet_forward(model, img, md), mask)

    return max(T.grad_check(loss_fn, p, h=1e-5) for p in model.parameters().values())


def run_gradient_checks(seed: int = 0, rounds: int = 3) -> list[CheckResult]:
    """Randomized operator checks plus the end-to-end network check."""
    results = []
    for name, check in OPERATOR_CHECKS.items():
        rng = np.random.default_rng(seed)
        worst = max(check(rng) for _ in range(rounds))
        results.append(CheckResult(name, float(worst), OPERATOR_TOLERANCE))
    results.append(CheckResult("filmed_unet_end_to_end", float(end_to_end_error(seed)), NETWORK_TOLERANCE))
    return results
