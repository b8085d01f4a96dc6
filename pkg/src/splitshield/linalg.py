"""Dense matrix/vector helpers and a deterministic one-sided Jacobi SVD.

Matrices and vectors are plain float64 numpy arrays (row-major). The
validating coercers below are the entry points other modules use; internal
arithmetic is ordinary numpy.
"""

from dataclasses import dataclass

import numpy as np

from ._kernels import jacobi_sweep
from .errors import DimensionError, InvalidMatrix, NumericalFailure

# Convergence: a sweep applying no rotation means every off-diagonal Gram
# entry is at most OFFDIAG_REL * ||W||_F^2.
OFFDIAG_REL = 1e-12
MAX_SWEEPS = 100


def as_matrix(a) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array."""
    w = np.ascontiguousarray(a, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise InvalidMatrix(f"expected a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidMatrix("matrix contains NaN or Inf")
    return w


def as_vector(a) -> np.ndarray:
    """Coerce to a finite float64 1-D array."""
    x = np.ascontiguousarray(a, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidMatrix(f"expected a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidMatrix("vector contains NaN or Inf")
    return x


def matvec(w, x) -> np.ndarray:
    w = as_matrix(w)
    x = as_vector(x)
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: {w.shape} x {x.shape}")
    return w @ x


def frobenius_norm(w) -> float:
    return float(np.linalg.norm(as_matrix(w)))


def l2_norm(x) -> float:
    return float(np.linalg.norm(as_vector(x)))


def dot(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot: {a.shape} vs {b.shape}")
    return float(a @ b)


@dataclass(frozen=True)
class SvdBasis:
    """Full SVD of an m x n weight matrix: W = U diag(s) V^T.

    u: (m, m) orthonormal columns; v: (n, n) orthonormal columns;
    s: min(m, n) non-negative singular values, non-increasing. Zero singular
    values keep their index slots so coefficient positions stay aligned.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    m: int
    n: int

    def right_vector(self, k: int) -> np.ndarray:
        """k-th right-singular vector (0-based), a column of v."""
        return self.v[:, k]


def _complete_basis(cols: np.ndarray, dim: int) -> np.ndarray:
    """Extend orthonormal columns (dim x r) to a full (dim x dim) basis.

    Deterministic: standard basis vectors are tried in index order and
    re-orthogonalized twice against the accepted set.
    """
    r = cols.shape[1]
    if r == dim:
        return cols
    q = np.empty((dim, dim), dtype=np.float64)
    q[:, :r] = cols
    have = r
    for idx in range(dim):
        if have == dim:
            break
        cand = np.zeros(dim)
        cand[idx] = 1.0
        cand -= q[:, :have] @ (q[:, :have].T @ cand)
        nrm = np.linalg.norm(cand)
        if nrm <= 1e-6:
            continue
        cand /= nrm
        cand -= q[:, :have] @ (q[:, :have].T @ cand)
        cand /= np.linalg.norm(cand)
        q[:, have] = cand
        have += 1
    if have != dim:
        raise NumericalFailure("basis completion exhausted candidates")
    return q


def _fix_signs(u: np.ndarray, v: np.ndarray, k_paired: int) -> None:
    """Flip vector signs in place for cross-platform determinism.

    Paired columns (k < k_paired) flip together so U diag(s) V^T is preserved;
    each flip makes the largest-magnitude entry of v_k positive. Unpaired
    completion columns are normalized by their own largest entry.
    """
    for k in range(v.shape[1]):
        lead = np.argmax(np.abs(v[:, k]))
        if v[lead, k] < 0.0:
            v[:, k] = -v[:, k]
            if k < k_paired:
                u[:, k] = -u[:, k]
    for k in range(k_paired, u.shape[1]):
        lead = np.argmax(np.abs(u[:, k]))
        if u[lead, k] < 0.0:
            u[:, k] = -u[:, k]


def svd(w, sweep_fn=None) -> SvdBasis:
    """One-sided Jacobi SVD with full U and V factors.

    Columns of the wider-side working matrix are rotated until all
    off-diagonal Gram entries fall below OFFDIAG_REL * ||W||_F^2; raises
    NumericalFailure beyond MAX_SWEEPS sweeps. Deterministic for identical
    input bits. ``sweep_fn`` overrides the kernel (used by benchmarks).
    """
    w = as_matrix(w)
    if sweep_fn is None:
        sweep_fn = jacobi_sweep
    m, n = w.shape
    transposed = n > m
    b = w.T if transposed else w  # b is p x q with p >= q
    p, q = b.shape

    bt = b.T.copy()  # row i = column i of b; copy so the input is never mutated
    vt = np.eye(q)
    fro2 = float(np.sum(w * w))
    thresh = OFFDIAG_REL * fro2
    for _ in range(MAX_SWEEPS):
        if sweep_fn(bt, vt, thresh) == 0:
            break
    else:
        raise NumericalFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")

    sigma = np.linalg.norm(bt, axis=1)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    bt = bt[order]
    vt = vt[order]

    # Left factor of b: normalized rotated columns above the rank tolerance
    # (a prefix, since sigma is sorted), completed columns elsewhere.
    rank_tol = max(p, q) * np.finfo(np.float64).eps * sigma[0]
    r = int(np.count_nonzero(sigma > rank_tol))
    thin = (bt[:r] / sigma[:r, None]).T
    left = _complete_basis(thin, p)
    right = vt.T  # q x q, columns are right-singular vectors of b

    if transposed:
        u, v = right, left  # W = right . diag(sigma) . left^T
    else:
        u, v = left, right

    _fix_signs(u, v, k_paired=min(m, n))
    return SvdBasis(u=u, s=sigma, v=v, m=m, n=n)
