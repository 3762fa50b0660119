"""Dense tensor algebra: unfolding, n-mode products and Tucker decompositions.

Tensors are plain ``float64`` numpy arrays in C (row-major) order. All
functions are pure: inputs are never modified.

Unfolding convention: the mode-``n`` unfolding of ``x`` has shape
``(x.shape[n], prod(other dims))`` and its columns enumerate the remaining
modes in increasing index order with the last index varying fastest.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Sequence

import numpy as np

from .errors import DimensionMismatchError, ModeIndexError, RankError, SVDError

__all__ = [
    "as_tensor",
    "Unfolding",
    "unfold",
    "refold",
    "mode_product",
    "multi_mode_product",
    "tucker_reconstruct",
    "TuckerTensor",
    "hosvd",
    "hooi",
    "left_singular_vectors",
    "jacobi_svd",
    "frobenius_norm",
]


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim < 1:
        raise DimensionMismatchError("tensor order must be >= 1")
    return arr


def _check_mode(x: np.ndarray, n: int) -> int:
    if not isinstance(n, (int, np.integer)) or not 0 <= n < x.ndim:
        raise ModeIndexError(f"mode {n} out of range for tensor of order {x.ndim}")
    return int(n)


@dataclass(frozen=True)
class Unfolding:
    """Mode-``mode`` matricization of a tensor of shape ``source_shape``."""

    source_shape: tuple
    mode: int
    matrix: np.ndarray

    def refold(self) -> np.ndarray:
        return refold(self)


def unfold(x, n: int) -> Unfolding:
    x = as_tensor(x)
    n = _check_mode(x, n)
    matrix = np.moveaxis(x, n, 0).reshape(x.shape[n], -1)
    return Unfolding(tuple(x.shape), n, np.ascontiguousarray(matrix))


def refold(unfolding: Unfolding) -> np.ndarray:
    shape = list(unfolding.source_shape)
    n = unfolding.mode
    moved = [shape[n]] + shape[:n] + shape[n + 1:]
    if unfolding.matrix.shape != (shape[n], int(np.prod(moved[1:], dtype=np.int64))):
        raise DimensionMismatchError(
            f"matrix of shape {unfolding.matrix.shape} cannot refold to {tuple(shape)}"
        )
    return np.ascontiguousarray(np.moveaxis(unfolding.matrix.reshape(moved), 0, n))


def mode_product(x, m, n: int) -> np.ndarray:
    """n-mode product ``x ×_n m``.

    ``m`` has shape ``(R, x.shape[n])``; mode ``n`` of the result has size ``R``.
    """
    x = as_tensor(x)
    m = np.asarray(m, dtype=np.float64)
    n = _check_mode(x, n)
    if m.ndim != 2:
        raise DimensionMismatchError(f"mode_product expects a matrix, got order {m.ndim}")
    if m.shape[1] != x.shape[n]:
        raise DimensionMismatchError(
            f"matrix has {m.shape[1]} columns but mode {n} has size {x.shape[n]}"
        )
    out = np.tensordot(m, x, axes=(1, n))
    return np.ascontiguousarray(np.moveaxis(out, 0, n))


def multi_mode_product(x, matrices: Sequence, modes: Sequence[int] | None = None) -> np.ndarray:
    if modes is None:
        modes = range(len(matrices))
    out = as_tensor(x)
    for m, n in zip(matrices, modes):
        out = mode_product(out, m, n)
    return out


def tucker_reconstruct(core, factors: Sequence) -> np.ndarray:
    core = as_tensor(core)
    if len(factors) != core.ndim:
        raise DimensionMismatchError(
            f"need {core.ndim} factors for a core of order {core.ndim}, got {len(factors)}"
        )
    for k, f in enumerate(factors):
        f = np.asarray(f)
        if f.ndim != 2 or f.shape[1] != core.shape[k]:
            raise DimensionMismatchError(
                f"factor {k} has shape {f.shape}, expected (*, {core.shape[k]})"
            )
    return multi_mode_product(core, factors)


def frobenius_norm(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x)))


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every column made positive, for reproducibility
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def jacobi_svd(a, tol: float = 1e-14, max_sweeps: int = 60):
    """One-sided (Hestenes) Jacobi SVD of ``a`` (m x n).

    Returns ``(u, s, vt)`` with ``u`` of shape (m, m) orthogonal, singular
    values ``s`` (length m, descending) and ``vt`` (m, n) such that
    ``a == u @ diag(s) @ vt`` for the nonzero part. Columns of ``aᵀ`` are
    orthogonalised by plane rotations; the accumulated rotation is ``u``.
    """
    a = np.asarray(a, dtype=np.float64)
    m = a.shape[0]
    b = np.array(a.T, order="F")
    v = np.eye(m)
    # columns with squared norm below this floor are treated as exact zeros
    floor = (np.finfo(np.float64).eps ** 2) * max(float(np.sum(b * b)), np.finfo(np.float64).tiny)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(m - 1):
            for q in range(p + 1, m):
                bp, bq = b[:, p], b[:, q]
                alpha = float(bp @ bp)
                beta = float(bq @ bq)
                if alpha <= floor or beta <= floor:
                    continue
                gamma = float(bp @ bq)
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                bp = bp.copy()
                b[:, p] = c * bp - s * bq
                b[:, q] = s * bp + c * bq
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            break
    else:
        raise np.linalg.LinAlgError("Jacobi SVD did not converge")
    sing = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    v = v[:, order]
    b = b[:, order]
    with np.errstate(divide="ignore", invalid="ignore"):
        vt = np.where(sing > 0, b / np.where(sing > 0, sing, 1.0), 0.0).T
    return v, sing, vt


def left_singular_vectors(matrix, rank: int, backend: str = "numpy") -> np.ndarray:
    """Leading ``rank`` left singular vectors of ``matrix`` (sign-normalised)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rows = matrix.shape[0]
    if backend == "numpy":
        # a complete left basis is only missing when the matrix is tall
        u, _, _ = np.linalg.svd(matrix, full_matrices=matrix.shape[1] < rows)
    elif backend == "jacobi":
        u, _, _ = jacobi_svd(matrix)
    else:
        raise ValueError(f"unknown SVD backend {backend!r}")
    if u.shape[1] < rows:
        raise np.linalg.LinAlgError("incomplete left singular basis")
    return _fix_signs(np.ascontiguousarray(u[:, :rank]))


@dataclass
class TuckerTensor:
    """Core plus per-mode factors. Iterates as ``(core, factors)``."""

    core: np.ndarray
    factors: List[np.ndarray]
    relative_error: float = 0.0

    def __iter__(self) -> Iterator:
        yield self.core
        yield self.factors

    @property
    def ranks(self) -> tuple:
        return tuple(self.core.shape)

    def to_tensor(self) -> np.ndarray:
        return tucker_reconstruct(self.core, self.factors)


def _check_ranks(x: np.ndarray, ranks: Sequence[int]) -> list:
    ranks = [int(r) for r in ranks]
    if len(ranks) != x.ndim:
        raise RankError(f"need {x.ndim} ranks, got {len(ranks)}")
    for k, (r, d) in enumerate(zip(ranks, x.shape)):
        if r < 1 or r > d:
            raise RankError(f"rank {r} for mode {k} must lie in [1, {d}]")
    return ranks


def _truncation_error(x: np.ndarray, core: np.ndarray) -> float:
    # with orthonormal factors, ||x - recon||^2 = ||x||^2 - ||core||^2
    xx = float(np.sum(x * x))
    if xx == 0.0:
        return 0.0
    gap = max(xx - float(np.sum(core * core)), 0.0)
    return float(np.sqrt(gap / xx))


def hosvd(x, ranks: Sequence[int], backend: str = "numpy") -> TuckerTensor:
    """Truncated higher-order SVD.

    Factor ``k`` holds the leading ``ranks[k]`` left singular vectors of the
    mode-``k`` unfolding; the core is ``x`` projected onto them. The
    returned ``relative_error`` is computed from norms alone.
    """
    x = as_tensor(x)
    ranks = _check_ranks(x, ranks)
    factors = []
    for k, r in enumerate(ranks):
        try:
            factors.append(left_singular_vectors(unfold(x, k).matrix, r, backend))
        except np.linalg.LinAlgError as exc:
            raise SVDError(k, str(exc)) from exc
    core = multi_mode_product(x, [f.T for f in factors])
    return TuckerTensor(core, factors, _truncation_error(x, core))


def hooi(x, ranks: Sequence[int], n_iter: int = 0, backend: str = "numpy") -> TuckerTensor:
    """Higher-order orthogonal iteration started from the HOSVD.

    ``n_iter=0`` returns the plain HOSVD.
    """
    x = as_tensor(x)
    result = hosvd(x, ranks, backend)
    factors = list(result.factors)
    for _ in range(n_iter):
        for k in range(x.ndim):
            others = [f.T for j, f in enumerate(factors) if j != k]
            modes = [j for j in range(x.ndim) if j != k]
            y = multi_mode_product(x, others, modes)
            try:
                factors[k] = left_singular_vectors(unfold(y, k).matrix, result.ranks[k], backend)
            except np.linalg.LinAlgError as exc:
                raise SVDError(k, str(exc)) from exc
    if n_iter:
        core = multi_mode_product(x, [f.T for f in factors])
        result = TuckerTensor(core, factors, _truncation_error(x, core))
    return result
