"""Bilevel performance-matching distillation with a fixed initialization.

One outer step: starting from the fixed initial parameters, take ``T`` gradient
steps on the synthetic set with the learned step size, score the result on a
real minibatch, and push that loss back through the unrolled steps into the
synthetic images and the step size.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layers import one_hot

log = logging.getLogger(__name__)

OPTIMIZERS = ("plain_gd", "adam")


class DistillationError(RuntimeError):
    """Raised when a run hits a non-finite value; keeps the last good synthetic set."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class DistillConfig:
    n_synthetic: int = 10
    inner_steps: int = 1
    epochs: int = 3
    outer_step: float = 0.1
    batch_size: int = 256
    seed: int = 0
    eta_init: float = 0.01
    outer_optimizer: str = "plain_gd"
    n_classes: int = 10

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.outer_step >= 0:
            raise ValueError("outer_step must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.outer_optimizer not in OPTIMIZERS:
            raise ValueError(f"outer_optimizer must be one of {OPTIMIZERS}")
        if self.n_synthetic < 1 or self.n_synthetic % self.n_classes:
            raise ValueError(f"n_synthetic={self.n_synthetic} must be a positive multiple of {self.n_classes}")

    @classmethod
    def for_dataset(cls, dataset, **overrides):
        defaults = {
            "mnist": dict(n_synthetic=10, inner_steps=1, epochs=3),
            "cifar10": dict(n_synthetic=100, inner_steps=10, epochs=3),
        }
        if dataset not in defaults:
            raise ValueError(f"unknown dataset {dataset!r}")
        return cls(**{**defaults[dataset], **overrides})

    def to_dict(self):
        return asdict(self)

    def n_outer_steps(self, n_train):
        return self.epochs * math.ceil(n_train / self.batch_size)


@dataclass
class SyntheticDataset:
    images: Tensor  # [N, *input_shape], trainable
    labels: np.ndarray  # one-hot [N, k], fixed
    eta: Tensor  # scalar inner step size, trainable

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def class_ids(self):
        return np.argmax(self.labels, axis=1)

    def copy(self):
        return SyntheticDataset(Tensor(self.images.data.copy()), self.labels.copy(), Tensor(self.eta.data.copy()))


@dataclass
class DistilledResult:
    synthetic: SyntheticDataset
    loss_history: list
    accuracy: float | None
    config: dict
    theta0_seed: int | None
    eta_history: list = field(default_factory=list)


def init_synthetic(config, input_shape, rng=None):
    """Gaussian-noise images with balanced one-hot labels in class order."""
    k = config.n_classes
    if config.n_synthetic % k:
        raise ValueError(f"n_synthetic={config.n_synthetic} is not divisible by {k} classes")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    images = rng.standard_normal((config.n_synthetic,) + tuple(input_shape))
    labels = one_hot(np.repeat(np.arange(k), config.n_synthetic // k), k)
    return SyntheticDataset(Tensor(images), labels, Tensor(np.float64(config.eta_init)))


def inner_step(model, theta, synth, create_graph=True):
    """theta' = theta - eta * grad_theta loss(synthetic, theta).

    Must run inside an active tape with ``theta`` requiring grad. Frozen
    parameters are carried over untouched.
    """
    names = theta.trainable_names
    loss = model.loss(synth.images, synth.labels, theta)
    grads = ad.grad(loss, [theta[n] for n in names], create_graph=create_graph)
    for n, g in zip(names, grads):
        if not np.all(np.isfinite(g.data)):
            raise DistillationError(f"non-finite inner gradient in parameter group {n!r}")
    eta = synth.eta
    return theta.replace({n: theta[n] - eta * g for n, g in zip(names, grads)})


def unroll(model, theta0, synth, inner_steps, create_graph=True):
    theta = theta0
    for _ in range(inner_steps):
        theta = inner_step(model, theta, synth, create_graph)
    return theta


def hypergradients(model, synth, theta0, real_x, real_y, inner_steps):
    """Outer loss and its gradients with respect to the synthetic images and eta."""
    images = Tensor(synth.images.data, requires_grad=True)
    eta = Tensor(synth.eta.data, requires_grad=True)
    leaf = SyntheticDataset(images, synth.labels, eta)
    labels = real_y if np.ndim(real_y) == 2 else one_hot(real_y, model.n_classes)
    with Tape():
        theta = unroll(model, theta0.detached(requires_grad=True), leaf, inner_steps, create_graph=True)
        loss = model.loss(Tensor(real_x), labels, theta)
        if not np.isfinite(loss.data):
            return float(loss.data), None, None
        g_images, g_eta = ad.grad(loss, [images, eta])
    return float(loss.data), g_images.data, float(g_eta.data)


def unrolled_loss(model, images, eta, labels, theta0, real_x, real_y, inner_steps):
    """Outer loss with first-order inner steps only; the finite-difference target."""
    synth = SyntheticDataset(Tensor(np.asarray(images, dtype=np.float64)), labels, Tensor(np.float64(eta)))
    theta = theta0
    for _ in range(inner_steps):
        with Tape():
            theta = inner_step(model, theta.detached(requires_grad=True), synth, create_graph=False)
        theta = theta.detached()
    real_labels = real_y if np.ndim(real_y) == 2 else one_hot(real_y, model.n_classes)
    with ad.no_grad():
        return float(model.loss(Tensor(real_x), real_labels, theta).data)


class OuterOptimizer:
    """Plain gradient descent or Adam over (images, eta)."""

    def __init__(self, kind="plain_gd", lr=0.1, betas=(0.9, 0.999), eps=1e-8):
        if kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.t = 0
        self.m = self.v = None

    def step(self, values, grads):
        if self.kind == "plain_gd":
            return [v - self.lr * g for v, g in zip(values, grads)]
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        b1, b2 = self.betas
        out = []
        for i, (v, g) in enumerate(zip(values, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            out.append(v - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def outer_step(model, synth, theta0, real_x, real_y, config, optimizer=None):
    """One bilevel update. Returns the updated synthetic set and the loss before it."""
    optimizer = optimizer or OuterOptimizer(config.outer_optimizer, config.outer_step)
    loss, g_images, g_eta = hypergradients(model, synth, theta0, real_x, real_y, config.inner_steps)
    if not np.isfinite(loss) or not np.all(np.isfinite(g_images)) or not np.isfinite(g_eta):
        raise DistillationError(f"non-finite outer loss or hypergradient (loss={loss})", last_good=synth.copy())
    images, eta = optimizer.step([synth.images.data, np.asarray(synth.eta.data)], [g_images, np.asarray(g_eta)])
    return SyntheticDataset(Tensor(images), synth.labels, Tensor(np.float64(eta))), loss


def distill(model, config, train_x, train_y, theta0=None, callback=None, checkpoint=None):
    """Run the full outer loop from the fixed initialization ``theta0``.

    ``callback(record)`` receives one dict per outer step; ``checkpoint(synth,
    epoch)`` is called after every epoch.
    """
    theta0 = model.params if theta0 is None else theta0
    rng = np.random.default_rng(config.seed)
    synth = init_synthetic(config, train_x.shape[1:], rng)
    optimizer = OuterOptimizer(config.outer_optimizer, config.outer_step)
    m = len(train_x)
    losses, etas = [], []
    step = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(m)
        for lo in range(0, m, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            eta_before = float(synth.eta.data)
            synth, loss = outer_step(model, synth, theta0, train_x[idx], train_y[idx], config, optimizer)
            losses.append(loss)
            etas.append(eta_before)
            if callback is not None:
                callback(dict(step=step, epoch=epoch, loss=loss, eta=eta_before, time=time.perf_counter() - start))
            step += 1
        log.info("epoch %d: mean outer loss %.4f, eta %.5f", epoch, np.mean(losses[-math.ceil(m / config.batch_size):]), float(synth.eta.data))
        if checkpoint is not None:
            checkpoint(synth, epoch)
    return DistilledResult(synth, losses, None, config.to_dict(), theta0.seed, etas)


def train_on_synthetic(model, synth, inner_steps, theta0=None):
    """Apply the learned inner steps to ``theta0`` without higher-order recording."""
    theta = model.params if theta0 is None else theta0
    if float(synth.eta.data) <= 0:
        log.warning("learned step size is non-positive (%.4g)", float(synth.eta.data))
    plain = SyntheticDataset(Tensor(synth.images.data), synth.labels, Tensor(synth.eta.data))
    for _ in range(inner_steps):
        with Tape():
            theta = inner_step(model, theta.detached(requires_grad=True), plain, create_graph=False)
        theta = theta.detached()
    return theta


def evaluate_distilled(model, synth, test_x, test_y, inner_steps, theta0=None):
    """Accuracy on the test set after T inner steps on the distilled data from theta0."""
    theta = train_on_synthetic(model, synth, inner_steps, theta0)
    return accuracy(model, theta, test_x, test_y)


def accuracy(model, params, x, y):
    pred = model.predict(x, params)
    return float(np.mean(pred == np.asarray(y)))


def train_baseline(model, train_x, train_y, epochs=1, lr=0.05, batch_size=64, seed=0, callback=None):
    """Minibatch gradient descent on real data; frozen parameters stay fixed."""
    rng = np.random.default_rng(seed)
    theta = model.params.detached()
    losses = []
    m = len(train_x)
    for epoch in range(epochs):
        order = rng.permutation(m)
        for lo in range(0, m, batch_size):
            idx = order[lo:lo + batch_size]
            leaves = theta.detached(requires_grad=True)
            names = leaves.trainable_names
            with Tape():
                loss = model.loss(Tensor(train_x[idx]), one_hot(train_y[idx], model.n_classes), leaves)
                grads = ad.grad(loss, [leaves[n] for n in names])
            if not np.isfinite(loss.data):
                raise DistillationError(f"non-finite training loss at epoch {epoch}")
            theta = leaves.replace({n: Tensor(leaves[n].data - lr * g.data) for n, g in zip(names, grads)}).detached()
            losses.append(float(loss.data))
            if callback is not None:
                callback(dict(epoch=epoch, loss=losses[-1]))
    return theta, losses

