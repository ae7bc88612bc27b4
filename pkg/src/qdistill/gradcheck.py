"""Gradient oracle suite: finite differences, parameter shift, hypergradients.

Every check compares an autodiff gradient with an independent estimate and
records the max relative error (see :func:`autodiff.rel_error`).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as nn
from . import quantum as qm
from .autodiff import Tape, Tensor, finite_diff_gradient, rel_error
from .distill import SyntheticDataset, hypergradients, unrolled_loss
from .layers import one_hot
from .models import ModelConfig, ToyConfig, build_model, build_toy_model

LAYER_TOL = 1e-4
SHIFT_TOL = 1e-8
HYPER_TOL = 1e-3
FD_EPS = 1e-5
HYPER_EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    threshold: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.threshold)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_rel_error={self.max_rel_error:.3e} threshold={self.threshold:.0e} ({self.seconds:.1f}s)"


def autodiff_gradients(f, inputs):
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape():
        out = f(*leaves)
        grads = ad.grad(out, leaves)
    return [g.data for g in grads]


def fd_check(f, inputs, eps=FD_EPS):
    """Max relative error between autodiff and central differences over all inputs."""
    auto = autodiff_gradients(f, inputs)
    worst = 0.0
    for i, x in enumerate(inputs):
        def fi(t, i=i):
            args = [Tensor(v) for v in inputs]
            args[i] = t
            return f(*args)

        num = finite_diff_gradient(fi, x, eps).data
        worst = max(worst, rel_error(auto[i], num))
    return worst


def _scalarize(rng, shape_fn):
    """Wrap ``shape_fn`` so its output is contracted with fixed random weights."""
    cache = {}

    def f(*args):
        out = shape_fn(*args)
        if out.shape not in cache:
            cache[out.shape] = rng.uniform(-1, 1, size=out.shape)
        return (out * Tensor(cache[out.shape])).sum()

    return f


def primitive_cases(rng):
    """name -> (function, inputs); inputs drawn in [-2, 2] unless the op needs a domain."""
    u = lambda *s: rng.uniform(-2, 2, size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2, size=s)  # noqa: E731
    away = lambda *s: np.sign(u(*s)) * rng.uniform(0.3, 2, size=s)  # noqa: E731
    perm = rng.permutation(5)
    return {
        "add": (lambda a, b: a + b, [u(3, 4), u(4)]),
        "sub": (lambda a, b: a - b, [u(3, 4), u(3, 1)]),
        "mul": (lambda a, b: a * b, [u(3, 4), u(3, 4)]),
        "div": (lambda a, b: a / b, [u(3, 4), pos(3, 4)]),
        "neg": (lambda a: -a, [u(5)]),
        "matmul": (lambda a, b: a @ b, [u(3, 4), u(4, 2)]),
        "reshape": (lambda a: a.reshape(4, 3) * a.reshape(4, 3), [u(3, 4)]),
        "transpose": (lambda a: a.transpose(1, 0, 2) * a.transpose(1, 0, 2), [u(2, 3, 4)]),
        "getitem": (lambda a: a[1:, ::2] * a[1:, ::2], [u(3, 5)]),
        "embed": (lambda a: ad.embed(a * a, (4, 6), (slice(1, 3), slice(2, 6))), [u(2, 4)]),
        "concatenate": (lambda a, b: ad.concatenate([a, b * b], axis=1), [u(2, 3), u(2, 2)]),
        "sum": (lambda a: a.sum(axis=1) * a.sum(axis=1), [u(3, 4)]),
        "sum_to": (lambda a: ad.sum_to(a * a, (1, 4)), [u(3, 4)]),
        "broadcast_to": (lambda a: ad.broadcast_to(a, (3, 4)) * ad.broadcast_to(a, (3, 4)), [u(1, 4)]),
        "tanh": (ad.tanh, [u(6)]),
        "relu": (lambda a: ad.relu(a) * a, [away(6)]),
        "exp": (ad.exp, [u(6)]),
        "log": (ad.log, [pos(6)]),
        "sqrt": (ad.sqrt, [pos(6)]),
        "power": (lambda a: ad.power(a, 2.5), [pos(6)]),
        "sin": (ad.sin, [u(6)]),
        "cos": (ad.cos, [u(6)]),
        "max": (lambda a: ad.max_(a * a, axis=1), [u(3, 5)]),
        "pad": (lambda a: ad.pad(a * a, ((1, 2), (0, 1))), [u(2, 3)]),
        "flip": (lambda a: ad.flip(a, (1,)) * a, [u(2, 4)]),
        "permute": (lambda a: ad.permute(a, perm, axis=-1) * a, [u(2, 5)]),
        "conv2d": (ad.conv2d, [u(2, 2, 6, 5), u(3, 2, 3, 2)]),
        "avgpool2": (lambda a: ad.avgpool2(a * a), [u(2, 2, 4, 6)]),
        "upsample2": (lambda a: ad.upsample2(a * a), [u(1, 2, 2, 3)]),
    }


def check_primitives(seed=0, names=None):
    rng = np.random.default_rng(seed)
    cases = primitive_cases(rng)
    missing = set(ad.PRIMITIVES) - set(cases)
    if missing:
        raise RuntimeError(f"no gradient check registered for primitives {sorted(missing)}")
    results = []
    for name in names or sorted(cases):
        fn, inputs = cases[name]
        t0 = time.perf_counter()
        err = fd_check(_scalarize(rng, fn), inputs)
        results.append(CheckResult(f"primitive:{name}", err, LAYER_TOL, time.perf_counter() - t0))
    return results


def check_layers(seed=0):
    rng = np.random.default_rng(seed)
    results = []

    def run(name, f, inputs):
        t0 = time.perf_counter()
        err = fd_check(_scalarize(rng, f), inputs)
        results.append(CheckResult(f"layer:{name}", err, LAYER_TOL, time.perf_counter() - t0))

    run("conv2d", lambda x, k, b: nn.conv2d(x, nn.Conv2DLayer(k, b)),
        [rng.uniform(-2, 2, (1, 1, 6, 6)), rng.uniform(-1, 1, (2, 1, 5, 5)), rng.uniform(-1, 1, 2)])
    run("avgpool2", nn.avgpool2, [rng.uniform(-2, 2, (2, 3, 4, 4))])
    run("dense", lambda x, w, b: nn.dense(x, nn.DenseLayer(w, b)),
        [rng.uniform(-2, 2, (3, 5)), rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, 4)])
    run("tanh", nn.tanh, [rng.uniform(-2, 2, (3, 4))])
    labels = one_hot(rng.integers(0, 4, size=3), 4)
    run("softmax_cross_entropy", lambda z: nn.softmax_cross_entropy(z, labels), [rng.uniform(-2, 2, (3, 4))])
    run("amplitude_embed", lambda f: qm.amplitude_embed(f).re, [rng.uniform(-2, 2, (2, 64))])

    ranges = qm.default_ranges(2, 6)

    def qnn(x, ang, coeffs, rw, rb):
        layer = nn.QNNLayer(qm.PQCParams(ang, ranges), qm.HermitianObservable(coeffs), True, rw, rb)
        return nn.qnn_layer_forward(x, layer)

    run("qnn_layer_residual", qnn, [
        rng.uniform(-2, 2, (2, 64)), rng.uniform(0, 2 * np.pi, (2, 6, 3)), rng.uniform(-1, 1, (6, 4)),
        rng.uniform(-0.1, 0.1, (6, 64)), rng.uniform(-0.1, 0.1, 6),
    ])
    return results


def check_lenet(seed=0, variant="q-r-h", per_tensor=12, n_pixels=24):
    """Full quantum LeNet loss: finite differences on sampled parameter and pixel coordinates."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig.from_variant(variant), seed=seed)
    params = model.params
    x = rng.standard_normal((2, 1, 32, 32))
    labels = one_hot(np.array([3, 7]), 10)
    names = params.names()
    leaves = {n: Tensor(params[n].data, requires_grad=True) for n in names}
    xl = Tensor(x, requires_grad=True)
    with Tape():
        loss = model.loss(xl, labels, params.replace(leaves))
        grads = ad.grad(loss, [leaves[n] for n in names] + [xl])
    auto = dict(zip(names + ["__x__"], [g.data for g in grads]))

    def loss_at(name, flat_index, value):
        arrays = {n: params[n].data for n in names}
        xx = x
        if name == "__x__":
            xx = x.copy()
            xx.reshape(-1)[flat_index] = value
        else:
            arrays[name] = arrays[name].copy()
            arrays[name].reshape(-1)[flat_index] = value
        with ad.no_grad():
            p = params.replace({n: Tensor(a) for n, a in arrays.items()})
            return float(model.loss(Tensor(xx), labels, p).data)

    worst = 0.0
    for name in names + ["__x__"]:
        base = x if name == "__x__" else params[name].data
        k = n_pixels if name == "__x__" else per_tensor
        picks = rng.choice(base.size, size=min(k, base.size), replace=False)
        a = auto[name].reshape(-1)[picks]
        num = np.empty(len(picks))
        for j, idx in enumerate(picks):
            v = base.reshape(-1)[idx]
            num[j] = (loss_at(name, idx, v + FD_EPS) - loss_at(name, idx, v - FD_EPS)) / (2 * FD_EPS)
        worst = max(worst, rel_error(a, num))
    return CheckResult(f"lenet:{variant}", worst, LAYER_TOL, time.perf_counter() - t0)


def random_circuit(rng, n_layers=3, n_qubits=6):
    return qm.CircuitSpec(
        features=rng.uniform(-1, 1, 1 << n_qubits),
        angles=rng.uniform(0, 2 * np.pi, (n_layers, n_qubits, 3)),
        ranges=qm.default_ranges(n_layers, n_qubits),
        coeffs=rng.uniform(-1, 1, (n_qubits, 4)),
        readout=rng.uniform(-1, 1, n_qubits),
    )


def autodiff_angle_grad(spec):
    angles = Tensor(spec.angles, requires_grad=True)
    obs = qm.HermitianObservable(Tensor(spec.coeffs))
    with Tape():
        out = qm.qnn_forward(Tensor(spec.features[None]), qm.PQCParams(angles, spec.ranges), obs)
        value = (out[0] * Tensor(spec.readout)).sum()
        (g,) = ad.grad(value, [angles])
    return g.data


def shift_grads(spec):
    grads = np.empty(spec.angles.shape)
    for idx in np.ndindex(*spec.angles.shape):
        grads[idx] = qm.parameter_shift_grad(spec, idx)
    return grads


def check_parameter_shift(trials=100, seed=0, n_layers=3):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        spec = random_circuit(rng, n_layers)
        worst = max(worst, rel_error(autodiff_angle_grad(spec), shift_grads(spec)))
    return CheckResult(f"parameter_shift:{trials}_trials", worst, SHIFT_TOL, time.perf_counter() - t0)


def hyper_problem(kind, seed=0):
    """A <=200-parameter model with a tiny synthetic set and real batch."""
    rng = np.random.default_rng(seed)
    if kind == "mlp":
        model = build_toy_model(ToyConfig(kind="mlp", n_inputs=8, hidden=8, n_classes=3), seed)
        n_syn, n_real, width, k = 3, 20, 8, 3
    else:
        model = build_toy_model(ToyConfig(kind="dense_qnn", pre_dense=False, n_layers=1, n_classes=2), seed)
        n_syn, n_real, width, k = 2, 16, 64, 2
    assert model.params.count() <= 200
    synth = SyntheticDataset(
        Tensor(rng.standard_normal((n_syn, width))),
        one_hot(np.arange(n_syn) % k, k),
        Tensor(np.float64(0.3)),
    )
    real_x = rng.standard_normal((n_real, width))
    real_y = rng.integers(0, k, n_real)
    return model, synth, real_x, real_y


def check_hypergradient(kind="mlp", inner_steps=1, seed=0, eps=HYPER_EPS):
    t0 = time.perf_counter()
    model, synth, real_x, real_y = hyper_problem(kind, seed)
    theta0 = model.params
    _, g_img, g_eta = hypergradients(model, synth, theta0, real_x, real_y, inner_steps)

    def L(images, eta):
        return unrolled_loss(model, images, eta, synth.labels, theta0, real_x, real_y, inner_steps)

    base = synth.images.data
    num = np.empty(base.size)
    for i in range(base.size):
        p = base.copy().reshape(-1)
        m = base.copy().reshape(-1)
        p[i] += eps
        m[i] -= eps
        num[i] = (L(p.reshape(base.shape), float(synth.eta.data)) - L(m.reshape(base.shape), float(synth.eta.data))) / (2 * eps)
    eta = float(synth.eta.data)
    num_eta = (L(base, eta + eps) - L(base, eta - eps)) / (2 * eps)
    err = max(rel_error(g_img.reshape(-1), num), rel_error(np.array([g_eta]), np.array([num_eta])))
    return CheckResult(f"hypergradient:{kind}:T={inner_steps}", err, HYPER_TOL, time.perf_counter() - t0)


def run_all(trials=100, seed=0, lenet=True):
    results = check_primitives(seed) + check_layers(seed)
    if lenet:
        results.append(check_lenet(seed, "q-r-h"))
        results.append(check_lenet(seed, "classical"))
    results.append(check_parameter_shift(trials, seed))
    for kind in ("mlp", "dense_qnn"):
        for t in (1, 2):
            results.append(check_hypergradient(kind, t, seed))
    return results
