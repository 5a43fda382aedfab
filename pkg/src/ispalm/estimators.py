"""Gradient oracles for finite-sum objectives ``H = (1/n) sum_i h_i``.

Three estimators are provided: the exact full gradient, the plain
minibatch (SGD) estimate and the recursive SARAH estimate with a random
full refresh.  Minibatches are uniform size-``b`` subsets drawn without
replacement and returned sorted, so a batch of size ``n`` is exactly
``arange(n)`` and batch means are reduced in index order by numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError, StructuralError, UsageError
from .linalg import BlockVec
from .rng import as_generator


class FiniteSumProblem:
    """Base class for objectives of the form ``H(x) = (1/n) sum_i h_i(x)``.

    Subclasses set ``n`` and ``block_specs`` (list of ``(name, shape)``) and
    implement :meth:`eval_batch` and :meth:`grad_block_batch`.  ``indices``
    is ``None`` for the full sample set or a sorted integer array.
    """

    n: int
    block_specs: list

    def eval_batch(self, point, indices=None):
        raise NotImplementedError

    def grad_block_batch(self, point, block, indices=None):
        raise NotImplementedError

    @property
    def num_blocks(self):
        return len(self.block_specs)

    @property
    def block_names(self):
        return [name for name, _ in self.block_specs]

    def block_index(self, block):
        if isinstance(block, str):
            return self.block_names.index(block)
        return int(block)

    def check_point(self, point):
        if not isinstance(point, BlockVec) or not point.conforms(self.block_specs):
            raise StructuralError(f"point {point!r} does not conform to {self.block_specs}")


def _locate_nonfinite(problem, point, block, indices):
    # Bisect down to a single offending sample; only runs on the failure path.
    idx = np.arange(problem.n) if indices is None else np.asarray(indices)
    while len(idx) > 1:
        half = idx[: len(idx) // 2]
        g = problem.grad_block_batch(point, block, half)
        idx = half if not np.all(np.isfinite(g)) else idx[len(idx) // 2:]
    return int(idx[0]) if len(idx) == 1 else None


def _checked(problem, point, block, indices):
    g = np.asarray(problem.grad_block_batch(point, block, indices), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericalError(
            "nonfinite gradient", block=block,
            sample=_locate_nonfinite(problem, point, block, indices),
        )
    return g


def full_gradient(problem, point, block):
    """Exact block gradient ``(1/n) sum_i grad h_i(point)``."""
    return _checked(problem, point, problem.block_index(block), None)


def sgd_estimate(problem, point, block, batch):
    """Mean of the per-sample block gradients over ``batch``."""
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ConfigError("minibatch must be nonempty")
    return _checked(problem, point, problem.block_index(block), batch)


def draw_minibatch(rng, n, b):
    """Uniform random size-``b`` subset of ``range(n)``, sorted ascending."""
    n = int(n)
    b = int(b)
    if not 1 <= b <= n:
        raise ConfigError(f"batch size must satisfy 1 <= b <= n, got b={b}, n={n}")
    if b == n:
        return np.arange(n)
    gen = as_generator(rng, "batch")
    return np.sort(gen.choice(n, size=b, replace=False))


def bernoulli_refresh(rng, p):
    """Draw the SARAH refresh event, true with probability ``1/p``."""
    if not p > 1:
        raise ConfigError(f"SARAH parameter p must exceed 1, got {p}")
    gen = as_generator(rng, "refresh")
    return bool(gen.random() < 1.0 / p)


@dataclass(frozen=True)
class SarahState:
    """Memory of the recursive estimator for one block.

    ``prev_point`` is the point at which ``prev_estimate`` was evaluated.
    ``last_batch`` and ``last_batch_grad`` expose the minibatch of the most
    recent call (and the minibatch gradient at its evaluation point when the
    recursive branch computed one) so callers can reuse them.
    """

    refresh_prob_inv: float
    batch_size: int
    step_counter: int = 0
    prev_estimate: Optional[np.ndarray] = None
    prev_point: Optional[BlockVec] = None
    last_batch: Optional[np.ndarray] = None
    last_batch_grad: Optional[np.ndarray] = None
    last_full: bool = False

    def __post_init__(self):
        if not self.refresh_prob_inv > 1:
            raise ConfigError(f"SARAH parameter p must exceed 1, got {self.refresh_prob_inv}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")


def sarah_step(state, problem, block, eval_point, rng, force_full=False):
    """One SARAH estimate of the gradient of ``block`` at ``eval_point``.

    ``rng`` is an :class:`~ispalm.rng.Rng`; the refresh draw and the
    minibatch draw come from the per-block streams ``refresh/<block>`` and
    ``batch/<block>`` and are consumed on every call, whichever branch is
    taken.  Returns ``(estimate, new_state)``.
    """
    if state is None:
        raise UsageError("SARAH state is not initialized")
    block = problem.block_index(block)
    if state.step_counter > 0 and (state.prev_estimate is None or state.prev_point is None):
        raise UsageError("SARAH state has a step counter but no stored estimate")
    refresh = bernoulli_refresh(rng.stream(f"refresh/{block}"), state.refresh_prob_inv)
    batch = draw_minibatch(rng.stream(f"batch/{block}"), problem.n, min(state.batch_size, problem.n))
    batch_grad = None
    full = state.step_counter == 0 or force_full or refresh
    if full:
        estimate = full_gradient(problem, eval_point, block)
    else:
        batch_grad = sgd_estimate(problem, eval_point, block, batch)
        prev_grad = sgd_estimate(problem, state.prev_point, block, batch)
        estimate = (batch_grad - prev_grad) + state.prev_estimate
    new_state = replace(
        state,
        step_counter=state.step_counter + 1,
        prev_estimate=estimate,
        prev_point=eval_point,
        last_batch=batch,
        last_batch_grad=batch_grad,
        last_full=full,
    )
    return estimate, new_state
