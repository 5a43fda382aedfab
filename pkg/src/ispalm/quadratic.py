"""Least-squares finite sums with a known minimizer, split into vector blocks.

``h_i(x) = 1/2 |M_i x - c_i|^2`` with ``M_i`` of shape ``(r, D)`` and ``x``
the concatenation of the blocks.  Used as a test bed where gradients,
curvature and the optimum are available in closed form.
"""

from __future__ import annotations

import numpy as np

from .errors import StructuralError
from .estimators import FiniteSumProblem
from .linalg import BlockVec
from .rng import as_generator


class QuadraticProblem(FiniteSumProblem):
    def __init__(self, M, c, block_sizes):
        M = np.asarray(M, dtype=float)
        c = np.asarray(c, dtype=float)
        if M.ndim == 2:
            M = M[:, None, :]
        if c.ndim == 1:
            c = c[:, None]
        if M.shape[:2] != c.shape or M.shape[2] != sum(block_sizes):
            raise StructuralError(f"inconsistent shapes M{M.shape}, c{c.shape}, blocks {block_sizes}")
        self.M = M
        self.c = c
        self.n = M.shape[0]
        self.block_sizes = tuple(int(s) for s in block_sizes)
        self.block_specs = [(f"x{j}", (s,)) for j, s in enumerate(self.block_sizes)]
        offsets = np.cumsum((0,) + self.block_sizes)
        self._slices = [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]

    def _flat(self, point):
        return np.concatenate([np.ravel(b) for b in point])

    def _residual(self, point, indices):
        M = self.M if indices is None else self.M[indices]
        c = self.c if indices is None else self.c[indices]
        return M, np.einsum("nrd,d->nr", M, self._flat(point)) - c

    def eval_batch(self, point, indices=None):
        _, r = self._residual(point, indices)
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))

    def grad_block_batch(self, point, block, indices=None):
        M, r = self._residual(point, indices)
        sl = self._slices[self.block_index(block)]
        return np.einsum("nrd,nr->d", M[:, :, sl], r) / M.shape[0]

    def hessian(self):
        return np.einsum("nri,nrj->ij", self.M, self.M) / self.n

    def minimizer(self):
        """Least-norm minimizer of ``H`` as a :class:`BlockVec`."""
        A = self.M.reshape(-1, self.M.shape[2])
        x = np.linalg.lstsq(A, self.c.reshape(-1), rcond=None)[0]
        return self.split(x)

    def min_value(self):
        return self.eval_batch(self.minimizer())

    def split(self, flat):
        return BlockVec([n for n, _ in self.block_specs], [np.array(flat[sl]) for sl in self._slices])


def random_quadratic(rng, n, block_sizes, rows=1, noise=1.0):
    """Random instance with Gaussian ``M_i`` and ``c_i``."""
    gen = as_generator(rng, "quadratic")
    D = sum(block_sizes)
    M = gen.standard_normal((n, rows, D))
    c = noise * gen.standard_normal((n, rows))
    return QuadraticProblem(M, c, block_sizes)
