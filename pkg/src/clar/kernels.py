"""Dense float64 primitives shared by the matching, encoder and metric code.

Matrices are plain 2-D ``numpy.ndarray`` objects and vectors are 1-D arrays.
Every function returns a new array and never mutates its inputs.
"""

import numpy as np

from .errors import ClarError, ShapeError

DEFAULT_EPS = 1e-12


def as_matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("as_matrix", arr.shape, detail="expected a 2-D matrix")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def l2_normalize_rows(m, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Divide each row by ``max(||row||, eps)``; zero rows stay zero."""
    if eps <= 0:
        raise ClarError(f"l2_normalize_rows: eps must be positive, got {eps}")
    m = as_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    return m / np.maximum(norms, eps)[:, None]


def l2_normalize(v, eps: float = DEFAULT_EPS) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return l2_normalize_rows(v[None, :], eps)[0]


def row_prefix_sums(m) -> np.ndarray:
    """Running sums down each column: ``out[t, j] = sum(m[:t+1, j])``."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return m.copy()
    return np.cumsum(as_matrix(m), axis=0)


def masked_mean_pool(m, valid_len: int) -> np.ndarray:
    m = as_matrix(m)
    if valid_len < 1:
        raise ClarError("masked_mean_pool: empty pool (valid_len must be >= 1)")
    if valid_len > m.shape[0]:
        raise ShapeError("masked_mean_pool", m.shape, detail=f"valid_len={valid_len} exceeds rows")
    return m[:valid_len].sum(axis=0) / valid_len


def softmax_row(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return v.copy()
    z = np.exp(v - v.max())
    return z / z.sum()


def log_softmax_row(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())
