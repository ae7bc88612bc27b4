"""Two-Gaussian toy problem for quick end-to-end distillation runs."""
from __future__ import annotations

import numpy as np

from .distill import DistillConfig, distill, evaluate_distilled
from .models import ToyConfig, build_toy_model


def two_gaussians(n, dim=64, shift=0.375, rng=None):
    """Balanced 2-class sample: N(+shift*1, I) vs N(-shift*1, I) in ``dim`` dimensions.

    With the defaults the class means are 6 standard deviations apart along
    the diagonal, so the Bayes accuracy is about 99.9%.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    y = np.arange(n) % 2
    sign = np.where(y == 0, 1.0, -1.0)[:, None]
    x = rng.standard_normal((n, dim)) + sign * shift
    order = rng.permutation(n)
    return x[order], y[order]


# the residual branch gives the single inner step a direct linear path to the readout
TOY_MODEL = ToyConfig(kind="dense_qnn", n_classes=2, residual=True)


def toy_config(seed=0, **overrides):
    base = dict(
        n_synthetic=2, n_classes=2, inner_steps=1, epochs=3, batch_size=25,
        outer_step=0.1, outer_optimizer="adam", eta_init=1.0, seed=seed,
    )
    return DistillConfig(**{**base, **overrides})


def run_toy(seed=0, n_train=500, n_test=500, config=None, model_config=None):
    """Distil the toy training set into 2 points; returns (test accuracy, result)."""
    rng = np.random.default_rng(seed + 10_000)
    train_x, train_y = two_gaussians(n_train, rng=rng)
    test_x, test_y = two_gaussians(n_test, rng=rng)
    model = build_toy_model(model_config or TOY_MODEL, seed=seed)
    config = config or toy_config(seed)
    result = distill(model, config, train_x, train_y)
    acc = evaluate_distilled(model, result.synthetic, test_x, test_y, config.inner_steps)
    result.accuracy = acc
    return acc, result
