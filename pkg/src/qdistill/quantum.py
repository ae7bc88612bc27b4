"""Differentiable dense statevector simulation of the QNN layer.

Complex amplitudes are carried as two real tensors (``re``, ``im``) so that the
autodiff engine stays purely real. Basis index bit order: qubit 0 is the most
significant bit.

The module also contains a small complex128 reference simulator
(:func:`reference_expectations`) that shares no code with the tape path; the
parameter-shift oracle is built on it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

EMBED_EPS = 1e-12

PAULI_I = np.eye(2, dtype=complex)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


@dataclass
class StateVector:
    """Amplitudes of an ``n_qubits`` register; ``re``/``im`` have shape [..., 2**n]."""

    n_qubits: int
    re: Tensor
    im: Tensor

    @property
    def dim(self):
        return 1 << self.n_qubits

    def norm_sq(self):
        return np.sum(self.re.data ** 2 + self.im.data ** 2, axis=-1)

    def to_complex(self):
        return self.re.data + 1j * self.im.data

    @classmethod
    def basis(cls, n_qubits, index=0):
        re = np.zeros(1 << n_qubits)
        re[index] = 1.0
        return cls(n_qubits, Tensor(re), Tensor(np.zeros(1 << n_qubits)))

    @classmethod
    def from_complex(cls, amplitudes):
        amplitudes = np.asarray(amplitudes, dtype=complex)
        n = int(np.log2(amplitudes.shape[-1]))
        if 1 << n != amplitudes.shape[-1]:
            raise ValueError(f"state length {amplitudes.shape[-1]} is not a power of two")
        return cls(n, Tensor(amplitudes.real.copy()), Tensor(amplitudes.imag.copy()))


@dataclass
class HermitianObservable:
    """Per-qubit single-qubit observable ``a0 I + ax X + ay Y + az Z``.

    ``coeffs`` has shape [n_qubits, 4] with columns (a0, ax, ay, az).
    """

    coeffs: Tensor
    trainable: bool = True

    @property
    def n_qubits(self):
        return self.coeffs.shape[0]

    @classmethod
    def pauli_z(cls, n_qubits, trainable=False):
        c = np.zeros((n_qubits, 4))
        c[:, 3] = 1.0
        return cls(Tensor(c), trainable)

    def matrix(self, qubit):
        a0, ax, ay, az = self.coeffs.data[qubit]
        return a0 * PAULI_I + ax * PAULI_X + ay * PAULI_Y + az * PAULI_Z


def default_ranges(n_layers, n_qubits):
    if n_qubits < 2:
        return [0] * n_layers
    return [(l % (n_qubits - 1)) + 1 for l in range(n_layers)]


@dataclass
class PQCParams:
    """Strongly-entangling-layer parameters: Rot angles [L, n, 3] and CNOT ranges."""

    angles: Tensor
    ranges: list = field(default_factory=list)

    def __post_init__(self):
        L, n, three = self.angles.shape
        if three != 3:
            raise ValueError(f"angles must have shape [L, n, 3], got {self.angles.shape}")
        if not self.ranges:
            self.ranges = default_ranges(L, n)
        if len(self.ranges) != L:
            raise ValueError(f"need {L} entangler ranges, got {len(self.ranges)}")
        if n > 1 and any(not 1 <= r <= n - 1 for r in self.ranges):
            raise ValueError(f"entangler ranges must lie in [1, {n - 1}], got {self.ranges}")

    @property
    def n_layers(self):
        return self.angles.shape[0]

    @property
    def n_qubits(self):
        return self.angles.shape[1]

    @classmethod
    def random(cls, n_layers, n_qubits, rng, ranges=None):
        angles = rng.uniform(0.0, 2 * np.pi, size=(n_layers, n_qubits, 3))
        return cls(Tensor(angles), list(ranges) if ranges else [])


# ---------------------------------------------------------------------------
# tape path


def amplitude_embed(features, n_qubits=6):
    """Normalise ``features`` ([2**n] or [b, 2**n]) into real amplitudes."""
    features = ad.as_tensor(features)
    dim = 1 << n_qubits
    if features.shape[-1] != dim or features.ndim not in (1, 2):
        raise ValueError(f"amplitude_embed: expected {dim} features, got shape {features.shape}")
    norm = ad.sqrt((features * features).sum(axis=-1, keepdims=True) + EMBED_EPS)
    re = features / norm
    return StateVector(n_qubits, re, Tensor(np.zeros(re.shape)))


def _check_qubit(qubit, n):
    if not 0 <= qubit < n:
        raise IndexError(f"qubit {qubit} out of range for {n} qubits")


def rot_entries(alpha, beta, gamma):
    """Real and imaginary parts of Rot = RZ(gamma) RY(beta) RZ(alpha).

    Works elementwise on angle tensors of any common shape and returns two
    lists ``[u00, u01, u10, u11]``.
    """
    half_b = beta * 0.5
    c, s = ad.cos(half_b), ad.sin(half_b)
    plus = (alpha + gamma) * 0.5
    minus = (alpha - gamma) * 0.5
    cp, sp = ad.cos(plus), ad.sin(plus)
    cm, sm = ad.cos(minus), ad.sin(minus)
    re = [c * cp, -(s * cm), s * cm, c * cp]
    im = [-(c * sp), -(s * sm), -(s * sm), c * sp]
    return re, im


def _cmul(ar, ai, br, bi):
    return ar * br - ai * bi, ar * bi + ai * br


def apply_rot(state, qubit, alpha, beta, gamma):
    """Apply Rot(alpha, beta, gamma) = RZ(gamma) RY(beta) RZ(alpha) to one qubit."""
    n = state.n_qubits
    _check_qubit(qubit, n)
    (u00r, u01r, u10r, u11r), (u00i, u01i, u10i, u11i) = rot_entries(
        ad.as_tensor(alpha), ad.as_tensor(beta), ad.as_tensor(gamma)
    )
    lead = state.re.shape[:-1]
    shape = lead + (1 << qubit, 2, 1 << (n - qubit - 1))
    re = state.re.reshape(shape)
    im = state.im.reshape(shape)
    sel0 = (Ellipsis, slice(None), slice(0, 1), slice(None))
    sel1 = (Ellipsis, slice(None), slice(1, 2), slice(None))
    ar, ai, br, bi = re[sel0], im[sel0], re[sel1], im[sel1]
    x0r, x0i = _cmul(u00r, u00i, ar, ai)
    y0r, y0i = _cmul(u01r, u01i, br, bi)
    x1r, x1i = _cmul(u10r, u10i, ar, ai)
    y1r, y1i = _cmul(u11r, u11i, br, bi)
    new_re = ad.concatenate([x0r + y0r, x1r + y1r], axis=-2)
    new_im = ad.concatenate([x0i + y0i, x1i + y1i], axis=-2)
    full = lead + (1 << n,)
    return StateVector(n, new_re.reshape(full), new_im.reshape(full))


def cnot_index(control, target, n_qubits):
    """Gather index realising CNOT: ``new[i] = old[index[i]]``."""
    if control == target:
        raise ValueError("cnot: control and target must differ")
    _check_qubit(control, n_qubits)
    _check_qubit(target, n_qubits)
    idx = np.arange(1 << n_qubits)
    cbit = 1 << (n_qubits - 1 - control)
    tbit = 1 << (n_qubits - 1 - target)
    return np.where(idx & cbit, idx ^ tbit, idx)


def apply_cnot(state, control, target):
    idx = cnot_index(control, target, state.n_qubits)
    return StateVector(state.n_qubits, ad.permute(state.re, idx), ad.permute(state.im, idx))


def entangler_index(n_qubits, r):
    """Composite gather index of the CNOT ring CNOT(q, (q + r) mod n), q = 0..n-1."""
    idx = np.arange(1 << n_qubits)
    if n_qubits < 2:
        return idx
    for q in range(n_qubits):
        idx = idx[cnot_index(q, (q + r) % n_qubits, n_qubits)]
    return idx


def _kron(ar, ai, br, bi):
    """Complex Kronecker product of square matrices held as re/im tensors."""
    m, k = ar.shape[0], br.shape[0]

    def real_kron(x, y):
        return (x.reshape(m, 1, m, 1) * y.reshape(1, k, 1, k)).reshape(m * k, m * k)

    re = real_kron(ar, br) - real_kron(ai, bi)
    im = real_kron(ar, bi) + real_kron(ai, br)
    return re, im


def layer_unitaries(params):
    """Per-layer Rot tensor products as (re, im) pairs of [2**n, 2**n] tensors."""
    ang = params.angles
    L, n = params.n_layers, params.n_qubits
    re, im = rot_entries(ang[:, :, 0], ang[:, :, 1], ang[:, :, 2])
    ure = ad.stack(re, axis=-1).reshape(L, n, 2, 2)
    uim = ad.stack(im, axis=-1).reshape(L, n, 2, 2)
    out = []
    for l in range(L):
        kr, ki = ure[l, 0], uim[l, 0]
        for q in range(1, n):
            kr, ki = _kron(kr, ki, ure[l, q], uim[l, q])
        out.append((kr, ki))
    return out


def apply_strongly_entangling(state, params):
    """Each layer: Rot on every qubit, then the CNOT ring with that layer's range."""
    n = state.n_qubits
    if params.n_qubits != n:
        raise ValueError(f"PQC built for {params.n_qubits} qubits, state has {n}")
    re, im = state.re, state.im
    real_input = not np.any(im.data) and not im.requires_grad
    for (kr, ki), r in zip(layer_unitaries(params), params.ranges):
        krt, kit = kr.T, ki.T
        if real_input:
            re, im = re @ krt, re @ kit
            real_input = False
        else:
            re, im = re @ krt - im @ kit, re @ kit + im @ krt
        idx = entangler_index(n, r)
        re, im = ad.permute(re, idx), ad.permute(im, idx)
    return StateVector(n, re, im)


def _pauli_tables(n):
    """Constant matrices for vectorised per-qubit <X>, <Y>, <Z>."""
    dim = 1 << n
    idx = np.arange(dim)
    zsign = np.empty((dim, n))
    xcat = np.zeros((dim, n * dim))
    ycat = np.zeros((dim, n * dim))
    for q in range(n):
        bit = 1 << (n - 1 - q)
        sign = np.where(idx & bit, -1.0, 1.0)
        zsign[:, q] = sign
        # (P v)_i = v_{i^bit};  (M v)_i = sign_i v_{i^bit};  columns hold transposes
        p = np.zeros((dim, dim))
        p[idx, idx ^ bit] = 1.0
        m = sign[:, None] * p
        xcat[:, q * dim:(q + 1) * dim] = p.T
        ycat[:, q * dim:(q + 1) * dim] = m.T
    return Tensor(zsign), Tensor(xcat), Tensor(ycat)


_TABLES = {}


def pauli_expectations(state):
    """Per-qubit <X>, <Y>, <Z>, each of shape [..., n]."""
    n = state.n_qubits
    if n not in _TABLES:
        _TABLES[n] = _pauli_tables(n)
    zsign, xcat, ycat = _TABLES[n]
    re, im = state.re, state.im
    lead = re.shape[:-1]
    split = lead + (n, 1 << n)
    re_b = re.reshape(lead + (1, 1 << n))
    im_b = im.reshape(lead + (1, 1 << n))
    ex = ((re @ xcat).reshape(split) * re_b).sum(axis=-1) + ((im @ xcat).reshape(split) * im_b).sum(axis=-1)
    ey = ((im @ ycat).reshape(split) * re_b).sum(axis=-1) - ((re @ ycat).reshape(split) * im_b).sum(axis=-1)
    ez = (re * re + im * im) @ zsign
    return ex, ey, ez


def expectations(state, obs):
    """<psi| O_q |psi> for every qubit q, shape [..., n]."""
    if obs.n_qubits != state.n_qubits:
        raise ValueError(f"observable has {obs.n_qubits} qubits, state has {state.n_qubits}")
    ex, ey, ez = pauli_expectations(state)
    c = obs.coeffs
    return c[:, 0] + c[:, 1] * ex + c[:, 2] * ey + c[:, 3] * ez


def expectation(state, qubit, obs):
    _check_qubit(qubit, state.n_qubits)
    return expectations(state, obs)[..., qubit]


def qnn_forward(features, params, obs):
    """Embed -> strongly entangling layers -> per-qubit Hermitian expectations."""
    features = ad.as_tensor(features)
    n = params.n_qubits
    if features.ndim != 2 or features.shape[1] != 1 << n:
        raise ValueError(f"qnn_forward: expected [batch, {1 << n}] features, got {features.shape}")
    state = amplitude_embed(features, n)
    state = apply_strongly_entangling(state, params)
    return expectations(state, obs)


# ---------------------------------------------------------------------------
# reference simulator and parameter-shift oracle


def rot_matrix(alpha, beta, gamma):
    rz = lambda t: np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])  # noqa: E731
    ry = np.array([[np.cos(beta / 2), -np.sin(beta / 2)], [np.sin(beta / 2), np.cos(beta / 2)]])
    return rz(gamma) @ ry @ rz(alpha)


def reference_state(features, angles, ranges):
    """Gate-by-gate complex128 simulation of one sample."""
    features = np.asarray(features, dtype=np.float64)
    L, n, _ = angles.shape
    state = (features / np.sqrt(np.sum(features ** 2) + EMBED_EPS)).astype(complex)
    for l in range(L):
        for q in range(n):
            kernels.apply_1q(state, q, n, rot_matrix(*angles[l, q]))
        if n > 1:
            for q in range(n):
                kernels.apply_cnot(state, q, (q + ranges[l]) % n, n)
    return state


def reference_expectations(features, angles, ranges, coeffs):
    """Per-qubit expectation values from an explicit complex simulation."""
    state = reference_state(features, angles, ranges)
    n = angles.shape[1]
    out = np.empty(n)
    for q in range(n):
        a0, ax, ay, az = coeffs[q]
        o = a0 * PAULI_I + ax * PAULI_X + ay * PAULI_Y + az * PAULI_Z
        phi = state.copy()
        kernels.apply_1q(phi, q, n, o)
        out[q] = np.vdot(state, phi).real
    return out


@dataclass
class CircuitSpec:
    """Everything needed to evaluate one readout of the QNN circuit."""

    features: np.ndarray
    angles: np.ndarray
    ranges: list
    coeffs: np.ndarray
    readout: np.ndarray  # weights over qubits; the scalar is readout . expectations

    def value(self, angles=None):
        a = self.angles if angles is None else angles
        return float(self.readout @ reference_expectations(self.features, a, self.ranges, self.coeffs))


def parameter_shift_grad(spec, angle_index):
    """d(readout)/d(angle) from two circuit evaluations shifted by +-pi/2.

    Each Euler angle of Rot sits in exactly one Pauli rotation, so the
    two-term shift rule is exact.
    """
    angle_index = tuple(angle_index)
    if len(angle_index) != 3 or any(
        not 0 <= i < s for i, s in zip(angle_index, spec.angles.shape)
    ):
        raise IndexError(f"angle index {angle_index} out of range for shape {spec.angles.shape}")
    plus = spec.angles.copy()
    minus = spec.angles.copy()
    plus[angle_index] += np.pi / 2
    minus[angle_index] -= np.pi / 2
    return 0.5 * (spec.value(plus) - spec.value(minus))
