"""Block vectors and small dense SPD kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefinite, StructuralError


class BlockVec:
    """Ordered collection of named dense arrays.

    Instances are treated as immutable: every operation returns a new
    ``BlockVec`` and never writes into the arrays of its operands.
    """

    __slots__ = ("names", "blocks")

    def __init__(self, names, blocks):
        names = tuple(names)
        blocks = tuple(np.asarray(b, dtype=float) for b in blocks)
        if len(names) != len(blocks):
            raise StructuralError("number of names and blocks differ")
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate block names in {names}")
        self.names = names
        self.blocks = blocks

    @classmethod
    def from_dict(cls, mapping):
        return cls(list(mapping.keys()), list(mapping.values()))

    @classmethod
    def zeros(cls, specs):
        return cls([name for name, _ in specs], [np.zeros(shape) for _, shape in specs])

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, key):
        if isinstance(key, str):
            try:
                key = self.names.index(key)
            except ValueError:
                raise KeyError(key) from None
        return self.blocks[key]

    def __repr__(self):
        shapes = ", ".join(f"{n}{b.shape}" for n, b in zip(self.names, self.blocks))
        return f"BlockVec({shapes})"

    @property
    def specs(self):
        return [(n, b.shape) for n, b in zip(self.names, self.blocks)]

    def as_dict(self):
        return dict(zip(self.names, self.blocks))

    def copy(self):
        return BlockVec(self.names, [b.copy() for b in self.blocks])

    def replace(self, index, value):
        """Return a copy with block ``index`` (position or name) set to ``value``."""
        if isinstance(index, str):
            index = self.names.index(index)
        value = np.asarray(value, dtype=float)
        if value.shape != self.blocks[index].shape:
            raise StructuralError(
                f"block {self.names[index]!r}: shape {value.shape} != {self.blocks[index].shape}"
            )
        blocks = list(self.blocks)
        blocks[index] = value
        return BlockVec(self.names, blocks)

    def _check(self, other):
        if not isinstance(other, BlockVec):
            raise StructuralError(f"expected BlockVec, got {type(other).__name__}")
        if self.names != other.names:
            raise StructuralError(f"block names differ: {self.names} vs {other.names}")
        for n, a, b in zip(self.names, self.blocks, other.blocks):
            if a.shape != b.shape:
                raise StructuralError(f"block {n!r}: shape {a.shape} != {b.shape}")

    def conforms(self, specs):
        """True if names and shapes match ``specs`` (a list of (name, shape))."""
        return [(n, tuple(s)) for n, s in specs] == [(n, b.shape) for n, b in zip(self.names, self.blocks)]

    def __add__(self, other):
        self._check(other)
        return BlockVec(self.names, [a + b for a, b in zip(self.blocks, other.blocks)])

    def __sub__(self, other):
        self._check(other)
        return BlockVec(self.names, [a - b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, scalar):
        return BlockVec(self.names, [scalar * a for a in self.blocks])

    __rmul__ = __mul__

    def axpy(self, a, other):
        """Return ``self + a * other``."""
        self._check(other)
        return BlockVec(self.names, [x + a * y for x, y in zip(self.blocks, other.blocks)])

    def dot(self, other):
        self._check(other)
        return float(sum(np.vdot(a, b) for a, b in zip(self.blocks, other.blocks)))

    def sq_norm(self):
        return float(sum(np.vdot(a, a) for a in self.blocks))

    def max_abs_diff(self, other):
        self._check(other)
        return max((float(np.max(np.abs(a - b))) if a.size else 0.0)
                   for a, b in zip(self.blocks, other.blocks))


def extrapolate(x, x_prev, coeff):
    """Inertial point ``x + coeff * (x - x_prev)``, blockwise.

    Works on a :class:`BlockVec` pair or on two plain arrays.
    """
    if isinstance(x, BlockVec):
        x._check(x_prev)
        return BlockVec(x.names, [extrapolate(a, b, coeff) for a, b in zip(x.blocks, x_prev.blocks)])
    x = np.asarray(x, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if x.shape != x_prev.shape:
        raise StructuralError(f"shape {x.shape} != {x_prev.shape}")
    if coeff == 0:
        return x
    return x + coeff * (x - x_prev)


@dataclass(frozen=True)
class SpdFactor:
    """Cholesky factor ``A = L L^T`` of a symmetric positive definite matrix."""

    dim: int
    lower_triangular: np.ndarray
    log_det: float

    def reconstruct(self):
        L = self.lower_triangular
        return L @ L.T


def _find_failing_pivot(A):
    # Plain column Cholesky, only used to report where numpy gave up.
    d = A.shape[0]
    L = np.zeros_like(A)
    for j in range(d):
        v = A[j, j] - L[j, :j] @ L[j, :j]
        if not v > 0:
            return j, float(v)
        L[j, j] = np.sqrt(v)
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return d - 1, float("nan")


def cholesky_spd(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise StructuralError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite(0, float("nan"))
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(*_find_failing_pivot(A)) from None
    diag = np.diag(L)
    if not np.all(diag > 0):
        raise NotPositiveDefinite(int(np.argmin(diag)), float(np.min(diag)))
    return SpdFactor(A.shape[0], L, float(2.0 * np.sum(np.log(diag))))


def solve_spd(F, b):
    """Solve ``(L L^T) y = b`` by forward and back substitution."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != F.dim:
        raise StructuralError(f"right-hand side has length {b.shape[0]}, factor has dim {F.dim}")
    w = solve_triangular(F.lower_triangular, b, lower=True)
    return solve_triangular(F.lower_triangular, w, lower=True, trans="T")


def sym_eigen(A, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as orthonormal columns, so that
    ``A = P @ diag(lam) @ P.T``.  Sweeps stop once the off-diagonal
    Frobenius norm drops below ``tol`` times the Frobenius norm of ``A``.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise StructuralError(f"expected a square matrix, got shape {A.shape}")
    A = 0.5 * (A + A.T)
    d = A.shape[0]
    P = np.eye(d)
    scale = np.linalg.norm(A)
    if scale == 0.0 or d == 1:
        return np.diag(A).copy(), P
    for _ in range(max_sweeps):
        # direct norm; sum(A*A) - sum(diag**2) cancels when the diagonal dominates
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-18 * abs(diff):
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                # A <- J^T A J with J the rotation in the (p, q) plane
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                pp = P[:, p].copy()
                pq = P[:, q].copy()
                P[:, p] = c * pp - s * pq
                P[:, q] = s * pp + c * pq
    lam = np.diag(A).copy()
    order = np.argsort(-lam, kind="stable")
    return lam[order], P[:, order]


def sym_sqrt_psd(A):
    """Symmetric square root of a positive semidefinite matrix."""
    lam, P = sym_eigen(A)
    return (P * np.sqrt(np.clip(lam, 0.0, None))) @ P.T
