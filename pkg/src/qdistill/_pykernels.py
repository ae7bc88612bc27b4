"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels`` must agree with them to
rounding error.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def correlate2d(x, w):
    """Valid, stride-1 cross-correlation.

    x: [B, C, H, W], w: [O, C, kh, kw] -> [B, O, H - kh + 1, W - kw + 1]
    """
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # [B, C, Ho, Wo, kh, kw]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, O]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def apply_1q(state, qubit, n_qubits, u):
    """Apply a 2x2 complex matrix to ``qubit`` of a complex statevector, in place.

    Qubit 0 is the most significant bit of the basis index.
    """
    view = state.reshape(1 << qubit, 2, 1 << (n_qubits - qubit - 1))
    a = view[:, 0, :].copy()
    b = view[:, 1, :]
    view[:, 0, :] = u[0, 0] * a + u[0, 1] * b
    view[:, 1, :] = u[1, 0] * a + u[1, 1] * b
    return state


def apply_cnot(state, control, target, n_qubits):
    """Flip ``target`` on basis states whose ``control`` bit is set, in place."""
    cbit = 1 << (n_qubits - 1 - control)
    tbit = 1 << (n_qubits - 1 - target)
    idx = np.arange(state.shape[0])
    sel = idx[(idx & cbit != 0) & (idx & tbit == 0)]
    tmp = state[sel].copy()
    state[sel] = state[sel | tbit]
    state[sel | tbit] = tmp
    return state
