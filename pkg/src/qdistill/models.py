"""Classical LeNet, the quantum LeNet variants, and two toy models.

Models are functional: ``model.forward(x, params)`` accepts any parameter
mapping, which is how the distillation loop evaluates the updated parameters
produced by an inner gradient step.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .autodiff import ShapeError, Tensor
from .quantum import HermitianObservable, PQCParams, default_ranges

OBSERVABLES = ("pauliZ", "hermitian_trainable", "hermitian_frozen")
INPUT_SPECS = {"mnist": (1, 32, 32), "cifar10": (3, 32, 32)}
N_QUBITS = 6

VARIANTS = {
    "classical": dict(variant="classical", residual=False, observable="pauliZ"),
    "q-nr-nh": dict(variant="quantum", residual=False, observable="pauliZ"),
    "q-nr-h": dict(variant="quantum", residual=False, observable="hermitian_trainable"),
    "q-r-h": dict(variant="quantum", residual=True, observable="hermitian_trainable"),
    "q-r-h-frozen": dict(variant="quantum", residual=True, observable="hermitian_frozen"),
}

RESIDUAL_INIT_SCALE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "classical"
    residual: bool = False
    observable: str = "pauliZ"
    input_spec: tuple = (1, 32, 32)
    n_classes: int = 10
    n_layers: int = 3
    activation: str = "tanh"

    def __post_init__(self):
        if self.variant not in ("classical", "quantum"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.observable not in OBSERVABLES:
            raise ValueError(f"unknown observable {self.observable!r}")
        if self.variant == "classical" and (self.residual or self.observable != "pauliZ"):
            raise ValueError("residual/Hermitian options only apply to the quantum variant")
        if tuple(self.input_spec) not in INPUT_SPECS.values():
            raise ValueError(f"unsupported input_spec {self.input_spec}; expected one of {list(INPUT_SPECS.values())}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        object.__setattr__(self, "input_spec", tuple(self.input_spec))

    @classmethod
    def from_variant(cls, name, dataset="mnist", **overrides):
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        if dataset not in INPUT_SPECS:
            raise ValueError(f"unknown dataset {dataset!r}")
        return cls(**VARIANTS[name], input_spec=INPUT_SPECS[dataset], **overrides)

    @property
    def variant_name(self):
        for name, fields in VARIANTS.items():
            if all(getattr(self, k) == v for k, v in fields.items()):
                return name
        return "custom"

    def to_dict(self):
        d = asdict(self)
        d["input_spec"] = list(self.input_spec)
        return d


class ModelParams:
    """Ordered named parameter tensors plus the seed that produced them."""

    def __init__(self, tensors, seed=None, frozen=()):
        self.tensors = dict(tensors)
        self.seed = seed
        self.frozen = frozenset(frozen)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def trainable_names(self):
        return [n for n in self.tensors if n not in self.frozen]

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def replace(self, updates):
        merged = dict(self.tensors)
        merged.update(updates)
        return ModelParams(merged, self.seed, self.frozen)

    def detached(self, requires_grad=False):
        """Fresh leaf copies; trainable ones get ``requires_grad`` if asked."""
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad and n not in self.frozen) for n, t in self.tensors.items()},
            self.seed,
            self.frozen,
        )

    def equal(self, other):
        return self.names() == other.names() and all(
            np.array_equal(self[n].data, other[n].data) for n in self.tensors
        )


def _uniform(rng, shape, bound):
    return Tensor(rng.uniform(-bound, bound, size=shape))


def _dense_params(rng, prefix, n_in, n_out):
    bound = 1.0 / np.sqrt(n_in)
    return {f"{prefix}.weights": _uniform(rng, (n_out, n_in), bound), f"{prefix}.bias": _uniform(rng, (n_out,), bound)}


def _conv_params(rng, prefix, c_in, c_out, k=5):
    bound = 1.0 / np.sqrt(c_in * k * k)
    return {f"{prefix}.kernels": _uniform(rng, (c_out, c_in, k, k), bound), f"{prefix}.bias": _uniform(rng, (c_out,), bound)}


def _qnn_params(seed, rng, observable, n_layers, n_qubits=N_QUBITS):
    p = {"qnn.angles": Tensor(rng.uniform(0.0, 2 * np.pi, size=(n_layers, n_qubits, 3)))}
    if observable == "hermitian_frozen":
        # drawn from a separate stream so every other tensor matches the trainable variant
        p["qnn.coeffs"] = Tensor(np.random.default_rng((seed, 1)).uniform(-1.0, 1.0, size=(n_qubits, 4)))
    else:
        p["qnn.coeffs"] = HermitianObservable.pauli_z(n_qubits).coeffs
    return p


def _residual_params(rng, n_qubits=N_QUBITS):
    width = 1 << n_qubits
    return {
        "qnn.res_weights": _uniform(rng, (n_qubits, width), RESIDUAL_INIT_SCALE),
        "qnn.res_bias": Tensor(np.zeros(n_qubits)),
    }


def _qnn_layer(params, ranges, residual, observable):
    obs = HermitianObservable(params["qnn.coeffs"], trainable=observable == "hermitian_trainable")
    return nn.QNNLayer(
        pqc=PQCParams(params["qnn.angles"], list(ranges)),
        obs=obs,
        residual_enabled=residual,
        residual_weights=params["qnn.res_weights"] if residual else None,
        residual_bias=params["qnn.res_bias"] if residual else None,
    )


def _frozen_names(observable):
    return ("qnn.coeffs",) if observable in ("pauliZ", "hermitian_frozen") else ()


class Model:
    """Base: a config, a parameter set, and a pure ``forward``."""

    n_classes = 10

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def forward(self, x, params=None):
        raise NotImplementedError

    def loss(self, x, labels_onehot, params=None):
        return nn.softmax_cross_entropy(self.forward(x, params), labels_onehot)

    def predict(self, x, params=None, batch_size=500):
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(np.argmax(self.forward(Tensor(x[i:i + batch_size]), params).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def with_params(self, params):
        return type(self)(self.config, params)


class LeNet(Model):
    """LeNet-5 feature extractor with a classical or quantum classifier head."""

    def __init__(self, config, params):
        super().__init__(config, params)
        self.n_classes = config.n_classes
        self.ranges = default_ranges(config.n_layers, N_QUBITS)

    def _act(self, x):
        return ad.tanh(x) if self.config.activation == "tanh" else ad.relu(x)

    def features(self, x, params=None):
        """Convolutional extractor output, flattened to [b, 400]."""
        p = self.params if params is None else params
        x = ad.as_tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.input_spec:
            raise ShapeError(f"LeNet: expected images [b, {', '.join(map(str, self.config.input_spec))}], got {x.shape}")
        h = nn.avgpool2(self._act(nn.conv2d(x, nn.Conv2DLayer(p["conv1.kernels"], p["conv1.bias"]))))
        h = nn.avgpool2(self._act(nn.conv2d(h, nn.Conv2DLayer(p["conv2.kernels"], p["conv2.bias"]))))
        return h.reshape(h.shape[0], -1)

    def forward(self, x, params=None):
        p = self.params if params is None else params
        h = self.features(x, p)
        h = self._act(nn.dense(h, nn.DenseLayer(p["fc1.weights"], p["fc1.bias"])))
        h = self._act(nn.dense(h, nn.DenseLayer(p["fc2.weights"], p["fc2.bias"])))
        if self.config.variant == "quantum":
            cfg = self.config
            h = nn.qnn_layer_forward(h, _qnn_layer(p, self.ranges, cfg.residual, cfg.observable))
        return nn.dense(h, nn.DenseLayer(p["fc3.weights"], p["fc3.bias"]))


def init_params(config, seed):
    """Deterministic initial parameters for a LeNet config."""
    rng = np.random.default_rng(seed)
    c_in = config.input_spec[0]
    k = config.n_classes
    p = {}
    p.update(_conv_params(rng, "conv1", c_in, 6))
    p.update(_conv_params(rng, "conv2", 6, 16))
    p.update(_dense_params(rng, "fc1", 400, 120))
    if config.variant == "classical":
        p.update(_dense_params(rng, "fc2", 120, 84))
        p.update(_dense_params(rng, "fc3", 84, k))
        return ModelParams(p, seed)
    p.update(_dense_params(rng, "fc2", 120, 1 << N_QUBITS))
    p.update(_qnn_params(seed, rng, config.observable, config.n_layers))
    if config.residual:
        p.update(_residual_params(rng))
    p.update(_dense_params(rng, "fc3", N_QUBITS, k))
    order = [n for n in p if not n.startswith("fc3")] + ["fc3.weights", "fc3.bias"]
    return ModelParams({n: p[n] for n in order}, seed, _frozen_names(config.observable))


def build_model(config, seed=0):
    return LeNet(config, init_params(config, seed))


# ---------------------------------------------------------------------------
# toy models used by the oracle suite and the toy distillation task


@dataclass(frozen=True)
class ToyConfig:
    kind: str = "dense_qnn"  # dense_qnn | mlp
    n_inputs: int = 64
    n_classes: int = 2
    hidden: int = 8
    n_layers: int = 1
    residual: bool = False
    observable: str = "hermitian_trainable"
    pre_dense: bool = True

    def to_dict(self):
        return asdict(self)


class DenseQNN(Model):
    """[dense(n_in -> 64) -> tanh ->] QNN(64 -> 6) -> dense(6 -> k)."""

    def __init__(self, config, params):
        super().__init__(config, params)
        self.n_classes = config.n_classes
        self.ranges = default_ranges(config.n_layers, N_QUBITS)

    def forward(self, x, params=None):
        p = self.params if params is None else params
        h = ad.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.config.n_inputs:
            raise ShapeError(f"DenseQNN: expected [b, {self.config.n_inputs}] input, got {h.shape}")
        if self.config.pre_dense:
            h = ad.tanh(nn.dense(h, nn.DenseLayer(p["fc1.weights"], p["fc1.bias"])))
        h = nn.qnn_layer_forward(h, _qnn_layer(p, self.ranges, self.config.residual, self.config.observable))
        return nn.dense(h, nn.DenseLayer(p["out.weights"], p["out.bias"]))


class MLP(Model):
    """dense(n_in -> hidden) -> tanh -> dense(hidden -> k)."""

    def __init__(self, config, params):
        super().__init__(config, params)
        self.n_classes = config.n_classes

    def forward(self, x, params=None):
        p = self.params if params is None else params
        h = ad.tanh(nn.dense(x, nn.DenseLayer(p["fc1.weights"], p["fc1.bias"])))
        return nn.dense(h, nn.DenseLayer(p["out.weights"], p["out.bias"]))


def build_toy_model(config, seed=0):
    rng = np.random.default_rng(seed)
    p = {}
    if config.kind == "mlp":
        p.update(_dense_params(rng, "fc1", config.n_inputs, config.hidden))
        p.update(_dense_params(rng, "out", config.hidden, config.n_classes))
        return MLP(config, ModelParams(p, seed))
    if config.kind != "dense_qnn":
        raise ValueError(f"unknown toy model kind {config.kind!r}")
    if config.pre_dense:
        p.update(_dense_params(rng, "fc1", config.n_inputs, 1 << N_QUBITS))
    elif config.n_inputs != 1 << N_QUBITS:
        raise ValueError("without the pre-QNN dense layer the input width must be 64")
    p.update(_qnn_params(seed, rng, config.observable, config.n_layers))
    if config.residual:
        p.update(_residual_params(rng))
    p.update(_dense_params(rng, "out", N_QUBITS, config.n_classes))
    return DenseQNN(config, ModelParams(p, seed, _frozen_names(config.observable)))


# ---------------------------------------------------------------------------
# QDL1 checkpoints

CHECKPOINT_MAGIC = b"QDL1"


def save_params(path, params):
    """Write ``params`` as a QDL1 checkpoint (little-endian, float64)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path, seed=None, frozen=()):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad QDL1 header")
    pos = 4
    tensors = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(blob):
                raise ValueError("truncated QDL1 checkpoint")
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            tensors[name] = Tensor(data.astype(np.float64))
    except struct.error:
        raise ValueError("truncated QDL1 checkpoint") from None
    return ModelParams(tensors, seed, frozen)

