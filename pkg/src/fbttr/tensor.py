"""Dense N-way tensor primitives.

Every tensor is a float64 numpy array in row-major (first index
slowest-varying) layout.  Mode numbering is 1-based throughout, matching
the usual multilinear-algebra convention: mode 1 of a data tensor is the
sample mode.

Unfolding convention: ``unfold(t, n)`` has one row per mode-n index and
enumerates the remaining modes in increasing mode order with the earliest
remaining mode varying fastest.  Under this convention

    unfold(G x1 A1 x2 A2 ... xN AN, 1) = A1 @ unfold(G, 1) @ kron(AN, ..., A2).T

which is the identity the regression predictor construction relies on.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

MAX_ORDER = 8

__all__ = [
    "as_tensor",
    "as_matrix",
    "unfold",
    "fold",
    "vec",
    "mode_n_product",
    "multilinear_product",
    "kronecker",
    "kron_factors",
    "frobenius_norm",
    "cross_covariance",
    "outer",
]


def as_tensor(data, min_order: int = 1) -> np.ndarray:
    """Validate and coerce ``data`` to a float64 C-contiguous ndarray.

    Rejects NaN entries, empty extents, and order > 8.
    """
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim < min_order:
        raise ValueError(f"tensor order {a.ndim} below required minimum {min_order}")
    if a.ndim > MAX_ORDER:
        raise ValueError(f"tensor order {a.ndim} exceeds supported maximum {MAX_ORDER}")
    if a.ndim == 0:
        a = a.reshape(1)
    if any(s < 1 for s in a.shape):
        raise ValueError(f"all extents must be >= 1, got shape {a.shape}")
    if np.isnan(a).any():
        raise ValueError("tensor contains NaN")
    return a


def as_matrix(data) -> np.ndarray:
    """Validate ``data`` as an order-2 tensor."""
    a = as_tensor(data)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got order-{a.ndim} tensor")
    return a


def _check_mode(t: np.ndarray, mode: int) -> None:
    if not 1 <= mode <= t.ndim:
        raise ValueError(f"mode {mode} out of range for order-{t.ndim} tensor")


def unfold(t, mode: int) -> np.ndarray:
    """Mode-n unfolding (1-based mode).

    Returns an ``I_mode x prod(other extents)`` matrix.  Columns enumerate
    the remaining modes in increasing order, earliest mode fastest.
    """
    t = as_tensor(t)
    _check_mode(t, mode)
    moved = np.moveaxis(t, mode - 1, 0)
    return moved.reshape(t.shape[mode - 1], -1, order="F")


def fold(m, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold`: rebuild the tensor of ``shape`` from its mode-n unfolding."""
    m = as_matrix(m)
    shape = tuple(int(s) for s in shape)
    if not 1 <= mode <= len(shape):
        raise ValueError(f"mode {mode} out of range for shape {shape}")
    rest = [s for i, s in enumerate(shape) if i != mode - 1]
    expected = (shape[mode - 1], int(np.prod(rest)) if rest else 1)
    if m.shape != expected:
        raise ValueError(f"matrix shape {m.shape} inconsistent with fold({mode}, {shape}), expected {expected}")
    moved = m.reshape([shape[mode - 1]] + rest, order="F")
    return np.ascontiguousarray(np.moveaxis(moved, 0, mode - 1))


def vec(t) -> np.ndarray:
    """Row-vectorisation consistent with the unfolding convention.

    For a core with mode-1 extent 1 this is the single row of its mode-1
    unfolding, as a 1-D array.
    """
    t = as_tensor(t)
    if t.shape[0] != 1:
        raise ValueError(f"vec expects mode-1 extent 1, got shape {t.shape}")
    return unfold(t, 1).ravel()


def mode_n_product(t, m, mode: int) -> np.ndarray:
    """Mode-n product: contract ``m`` (rows x I_mode) against mode ``mode`` of ``t``."""
    t = as_tensor(t)
    m = as_matrix(m)
    _check_mode(t, mode)
    if m.shape[1] != t.shape[mode - 1]:
        raise ValueError(
            f"mode-{mode} product needs cols(m)={t.shape[mode - 1]}, got {m.shape[1]}"
        )
    out = np.tensordot(m, t, axes=(1, mode - 1))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode - 1))


def multilinear_product(t, factors: Mapping[int, np.ndarray]) -> np.ndarray:
    """Apply a mode->matrix map of mode-n products; order of application is immaterial."""
    out = as_tensor(t)
    for mode in sorted(factors):
        out = mode_n_product(out, factors[mode], mode)
    return out


def kronecker(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    return np.kron(a, b)


def kron_factors(factors) -> np.ndarray:
    """kron(P_N, ..., P_2) for a factor list given in increasing mode order 2..N."""
    mats = [as_matrix(f) for f in factors]
    if not mats:
        return np.array([[1.0]])
    out = mats[-1]
    for m in reversed(mats[:-1]):
        out = np.kron(out, m)
    return out


def frobenius_norm(t) -> float:
    return float(np.linalg.norm(np.asarray(t, dtype=np.float64).ravel()))


def cross_covariance(x, y) -> np.ndarray:
    """Contract predictor tensor and response matrix over the shared sample mode.

    ``x`` is samples-first (I_1 x I_2 x ... x I_N), ``y`` is I_1 x M.  The
    result has shape M x I_2 x ... x I_N with entry
    (m, i_2..i_N) = sum_s y[s, m] * x[s, i_2..i_N].  No centering is applied;
    z-scoring is the caller's responsibility.
    """
    x = as_tensor(x, min_order=2)
    y = as_matrix(y)
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"sample count mismatch: x has {x.shape[0]}, y has {y.shape[0]}")
    out = np.tensordot(y, x, axes=(0, 0))
    return np.ascontiguousarray(out)


def outer(*vectors) -> np.ndarray:
    """Outer product of 1-D vectors; exposed for tests and synthetic construction."""
    vs = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    out = vs[0]
    for v in vs[1:]:
        out = np.multiply.outer(out, v)
    return out
