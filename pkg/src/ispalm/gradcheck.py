"""Finite-difference checks of analytic block gradients."""

from __future__ import annotations

import numpy as np


def _directions(shape, symmetric):
    """Unit coordinate directions; for stacks of symmetric matrices, ``E_ij + E_ji`` pairs."""
    if not symmetric:
        for idx in np.ndindex(*shape):
            e = np.zeros(shape)
            e[idx] = 1.0
            yield e
        return
    *lead, d, _ = shape
    for k in np.ndindex(*lead):
        for i in range(d):
            for j in range(i, d):
                e = np.zeros(shape)
                e[k + (i, j)] = 1.0
                e[k + (j, i)] = 1.0
                yield e


def fd_block_gradient(problem, point, block, indices=None, h_scale=1e-5):
    """Central differences of ``eval_batch`` along each direction of a block.

    Returns ``(fd, analytic)`` as flat arrays of directional derivatives, with
    step ``h = h_scale * (1 + |x_block|)``.
    """
    j = problem.block_index(block)
    xj = point[j]
    symmetric = problem.block_names[j] in getattr(problem, "symmetric_blocks", ())
    h = h_scale * (1.0 + float(np.linalg.norm(xj)))
    g = np.asarray(problem.grad_block_batch(point, j, indices))
    fd, an = [], []
    for e in _directions(xj.shape, symmetric):
        fp = problem.eval_batch(point.replace(j, xj + h * e), indices)
        fm = problem.eval_batch(point.replace(j, xj - h * e), indices)
        fd.append((fp - fm) / (2.0 * h))
        an.append(float(np.vdot(g, e)))
    return np.array(fd), np.array(an)


def relative_error(fd, an):
    """``|fd - an| / max(|fd|, |an|)``; zero when both vanish."""
    scale = max(float(np.linalg.norm(fd)), float(np.linalg.norm(an)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(fd - an)) / scale


def check_gradients(problem, point, indices=None, h_scale=1e-5):
    """Map block name to the relative FD error of its analytic gradient."""
    return {
        name: relative_error(*fd_block_gradient(problem, point, j, indices, h_scale))
        for j, name in enumerate(problem.block_names)
    }


class ScaledGradient:
    """Wrap a problem and scale the analytic gradient of one block (negative control)."""

    def __init__(self, problem, block, factor):
        self._problem = problem
        self._block = problem.block_index(block)
        self._factor = factor

    def __getattr__(self, name):
        return getattr(self._problem, name)

    def grad_block_batch(self, point, block, indices=None):
        g = self._problem.grad_block_batch(point, block, indices)
        return g * self._factor if self._problem.block_index(block) == self._block else g
