"""Dense float64 tensor primitives: products, regroupings, decompositions.

Row-major (C) memory order is the convention for every vectorization,
unrolling, and regrouping operation in this package. All functions accept
array-likes, validate them to contiguous float64, and return numpy arrays;
inputs are never mutated.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "NumericalError",
    "SYM_EIG_MAX_SIZE",
    "as_tensor",
    "matmul",
    "hadamard",
    "kronecker",
    "nmode_product",
    "vec_rowmajor",
    "unvec",
    "unroll_conv",
    "reroll_conv",
    "conv2d",
    "svd",
    "numerical_rank",
    "sym_eig",
]

# eigensolver guard; desk-scale inputs only
SYM_EIG_MAX_SIZE = 4096


class ShapeError(ValueError):
    """Input extents do not satisfy an operation's preconditions."""


class NumericalError(ValueError):
    """A decomposition failed to converge or produced invalid output."""


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting NaN/Inf elements."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite elements")
    return arr


def _require_rank(arr: np.ndarray, rank: int, name: str) -> None:
    if arr.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {arr.shape}")


def matmul(a, b) -> np.ndarray:
    """Matrix product of a (m x k) and b (k x n)."""
    am, bm = as_tensor(a), as_tensor(b)
    _require_rank(am, 2, "left operand")
    _require_rank(bm, 2, "right operand")
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {am.shape} x {bm.shape}")
    return am @ bm


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two tensors of identical shape."""
    am, bm = as_tensor(a), as_tensor(b)
    if am.shape != bm.shape:
        raise ShapeError(f"hadamard requires identical shapes: {am.shape} vs {bm.shape}")
    return am * bm


def kronecker(a, b) -> np.ndarray:
    """Kronecker product of two matrices.

    Block (i, j) of the result is a[i, j] * b, so the result has shape
    (a_rows * b_rows, a_cols * b_cols) with row index i * b_rows + p and
    column index j * b_cols + q.
    """
    am, bm = as_tensor(a), as_tensor(b)
    _require_rank(am, 2, "left operand")
    _require_rank(bm, 2, "right operand")
    return np.kron(am, bm)


def nmode_product(t, m, mode: int) -> np.ndarray:
    """Contract mode `mode` of tensor `t` with the rows of matrix `m`.

    With t of shape (..., i_n, ...) and m of shape (i_n, j_n), the result
    replaces extent i_n by j_n at the same axis position:

        out[..., j, ...] = sum_i t[..., i, ...] * m[i, j]

    Modes are 0-based. For a matrix t, nmode_product(t, m, 0) == m.T @ t.
    """
    td, md = as_tensor(t), as_tensor(m)
    _require_rank(md, 2, "mode factor")
    if not 0 <= mode < td.ndim:
        raise ShapeError(f"mode {mode} out of range for tensor of rank {td.ndim}")
    if td.shape[mode] != md.shape[0]:
        raise ShapeError(
            f"mode-{mode} extent {td.shape[mode]} does not match factor rows {md.shape}"
        )
    contracted = np.tensordot(td, md, axes=([mode], [0]))
    # tensordot appends the new axis last; restore it to the contracted position
    return np.ascontiguousarray(np.moveaxis(contracted, -1, mode))


def vec_rowmajor(m) -> np.ndarray:
    """Flatten a matrix row by row into a vector."""
    mm = as_tensor(m)
    _require_rank(mm, 2, "matrix")
    return mm.reshape(-1)


def unvec(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of vec_rowmajor: reshape a vector into a rows x cols matrix."""
    vv = as_tensor(v)
    _require_rank(vv, 1, "vector")
    if rows < 1 or cols < 1:
        raise ShapeError(f"target extents must be positive, got ({rows}, {cols})")
    if vv.shape[0] != rows * cols:
        raise ShapeError(f"vector length {vv.shape[0]} != {rows} * {cols}")
    return vv.reshape(rows, cols)


def unroll_conv(kernel) -> np.ndarray:
    """Flatten a conv kernel stack (out, in, k, k) to a matrix (out, in*k*k).

    Column index runs row-major over (in, k, k), so channel blocks stay
    contiguous and each block holds one k x k kernel flattened row by row.
    """
    km = as_tensor(kernel)
    _require_rank(km, 4, "kernel stack")
    if km.shape[2] != km.shape[3]:
        raise ShapeError(f"kernel must be square, got shape {km.shape}")
    out_c = km.shape[0]
    return km.reshape(out_c, -1)


def reroll_conv(m, in_channels: int, kernel: int) -> np.ndarray:
    """Inverse of unroll_conv: reshape (out, in*k*k) back to (out, in, k, k)."""
    mm = as_tensor(m)
    _require_rank(mm, 2, "unrolled kernel")
    if in_channels < 1 or kernel < 1:
        raise ShapeError(f"extents must be positive, got in={in_channels}, k={kernel}")
    if mm.shape[1] != in_channels * kernel * kernel:
        raise ShapeError(
            f"column count {mm.shape[1]} != {in_channels} * {kernel}^2"
        )
    return mm.reshape(mm.shape[0], in_channels, kernel, kernel)


def conv2d(kernel, image) -> np.ndarray:
    """Valid 2-D cross-correlation, stride 1, no padding.

    kernel: (out, in, k, k), image: (in, H, W) -> (out, H-k+1, W-k+1).
    """
    km, xm = as_tensor(kernel), as_tensor(image)
    _require_rank(km, 4, "kernel stack")
    _require_rank(xm, 3, "image")
    if km.shape[2] != km.shape[3]:
        raise ShapeError(f"kernel must be square, got shape {km.shape}")
    k = km.shape[2]
    if km.shape[1] != xm.shape[0]:
        raise ShapeError(
            f"kernel input channels {km.shape} do not match image channels {xm.shape}"
        )
    if xm.shape[1] < k or xm.shape[2] < k:
        raise ShapeError(f"image {xm.shape} smaller than kernel window {k}x{k}")
    windows = sliding_window_view(xm, (k, k), axis=(1, 2))
    return np.einsum("oiab,ihwab->ohw", km, windows, optimize=True)


def svd(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin singular value decomposition.

    Returns (U, S, V) with A == U @ diag(S) @ V.T, singular values sorted
    descending, and orthonormal columns in U and V. Convergence failures of
    the underlying iteration are reported as NumericalError.
    """
    am = as_tensor(a)
    _require_rank(am, 2, "matrix")
    try:
        u, s, vh = np.linalg.svd(am, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from None
    return u, s, np.ascontiguousarray(vh.T)


def numerical_rank(a, rel_tol: float = 1e-10) -> int:
    """Count singular values above rel_tol times the largest one."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    _, s, _ = svd(a)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def sym_eig(k) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, sorted descending.

    The input must be square, no larger than SYM_EIG_MAX_SIZE, and symmetric
    within 1e-10 (relative to its largest magnitude entry).
    """
    km = as_tensor(k)
    _require_rank(km, 2, "matrix")
    if km.shape[0] != km.shape[1]:
        raise ShapeError(f"matrix must be square, got shape {km.shape}")
    n = km.shape[0]
    if n > SYM_EIG_MAX_SIZE:
        raise ShapeError(f"matrix size {n} exceeds eigensolver cap {SYM_EIG_MAX_SIZE}")
    scale = max(1.0, float(np.max(np.abs(km)))) if km.size else 1.0
    if float(np.max(np.abs(km - km.T))) > 1e-10 * scale:
        raise ShapeError("matrix is not symmetric within tolerance 1e-10")
    try:
        values = np.linalg.eigvalsh(km)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition did not converge: {exc}") from None
    return values[::-1].copy()
