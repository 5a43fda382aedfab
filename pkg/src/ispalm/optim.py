"""PALM, iPALM, SPRING and iSPALM over a :class:`FiniteSumProblem`.

All four methods minimize ``F(x) = H(x) + sum_j f_j(x_j)`` block by block
in declared block order (Gauss-Seidel).  The step size of block ``j`` is
``tau_j = s1 * L_j`` where ``L_j`` is the curvature of ``H`` along the
normalized block gradient, estimated by central differences of the
gradient.  The stochastic variants estimate that curvature on the current
minibatch only.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .estimators import SarahState, full_gradient, sarah_step, sgd_estimate
from .linalg import BlockVec, extrapolate
from .rng import Rng

ALGORITHMS = ("PALM", "iPALM", "SPRING", "iSPALM")
_ALIASES = {
    "palm": "PALM",
    "ipalm": "iPALM",
    "spring": "SPRING",
    "spring-sarah": "SPRING",
    "spalm": "SPRING",
    "ispalm": "iSPALM",
    "ispalm-sarah": "iSPALM",
}
STOCHASTIC = ("SPRING", "iSPALM")
INERTIAL = ("iPALM", "iSPALM")


# -- proximal operators -----------------------------------------------------


class ProxOp:
    """Proximal map of a block term ``f``: ``argmin_y tau/2 |x - y|^2 + f(y)``."""

    is_zero = False

    def apply(self, x, tau):
        raise NotImplementedError

    def value(self, x):
        raise NotImplementedError

    def __call__(self, x, tau):
        return self.apply(x, tau)


class ZeroProx(ProxOp):
    is_zero = True

    def apply(self, x, tau):
        return x

    def value(self, x):
        return 0.0


class SoftThreshold(ProxOp):
    """``f = lam * |x|_1``; its prox shrinks every entry towards 0 by ``lam / tau``."""

    def __init__(self, lam):
        if lam < 0:
            raise ConfigError("lam must be nonnegative")
        self.lam = float(lam)

    def apply(self, x, tau):
        return np.sign(x) * np.maximum(np.abs(x) - self.lam / tau, 0.0)

    def value(self, x):
        return self.lam * float(np.sum(np.abs(x)))


class BoxProx(ProxOp):
    """Indicator of the box ``[lo, hi]``; the prox is entrywise clipping."""

    def __init__(self, lo, hi):
        if lo > hi:
            raise ConfigError("empty box")
        self.lo = lo
        self.hi = hi

    def apply(self, x, tau):
        return np.clip(x, self.lo, self.hi)

    def value(self, x):
        inside = np.all((x >= self.lo) & (x <= self.hi))
        return 0.0 if inside else math.inf


class FunctionProx(ProxOp):
    """Wrap a plain ``prox(x, tau)`` callable and an optional value function."""

    def __init__(self, prox, value=None):
        self._prox = prox
        self._value = value

    def apply(self, x, tau):
        return self._prox(x, tau)

    def value(self, x):
        return 0.0 if self._value is None else float(self._value(x))


def _prox_list(prox, num_blocks):
    if prox is None:
        return [ZeroProx()] * num_blocks
    if isinstance(prox, ProxOp):
        return [prox] * num_blocks
    prox = [ZeroProx() if p is None else p for p in prox]
    if len(prox) != num_blocks:
        raise ConfigError(f"{len(prox)} prox operators for {num_blocks} blocks")
    return prox


def _per_block(value, num_blocks):
    if np.ndim(value) == 0:
        return [float(value)] * num_blocks
    value = [float(v) for v in value]
    if len(value) != num_blocks:
        raise ConfigError(f"{len(value)} coefficients for {num_blocks} blocks")
    return value


# -- configuration and trace records -----------------------------------------


def canonical_algorithm(name):
    if name in ALGORITHMS:
        return name
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ConfigError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}") from None


@dataclass
class SolverConfig:
    algorithm: str = "iSPALM"
    step_scale: Optional[float] = None
    inertial_scale: float = 0.45
    batch_size: int = 1
    sarah_p: float = 20.0
    epochs: int = 10
    steps_per_epoch: Optional[int] = None
    lipschitz_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.algorithm = canonical_algorithm(self.algorithm)
        if self.step_scale is None:
            self.step_scale = 3.0 if self.stochastic else 1.0

    @property
    def stochastic(self):
        return self.algorithm in STOCHASTIC

    @property
    def inertial(self):
        return self.algorithm in INERTIAL

    def validate(self, n=None):
        if not self.step_scale > 0:
            raise ConfigError(f"step_scale must be positive, got {self.step_scale}")
        if not 0 <= self.inertial_scale < 1:
            raise ConfigError(f"inertial_scale must lie in [0, 1), got {self.inertial_scale}")
        if self.inertial and self.inertial_scale >= 0.5:
            warnings.warn(
                f"{self.algorithm}: inertial_scale={self.inertial_scale} >= 0.5 lets the inertial "
                "parameters exceed 1/2, which is known to destabilize the iteration",
                RuntimeWarning,
                stacklevel=2,
            )
        if self.stochastic:
            if self.batch_size < 1 or (n is not None and self.batch_size > n):
                raise ConfigError(f"batch_size must lie in [1, n], got {self.batch_size}")
            if not self.sarah_p > 1:
                raise ConfigError(f"sarah_p must exceed 1, got {self.sarah_p}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if not self.lipschitz_floor > 0:
            raise ConfigError("lipschitz_floor must be positive")
        return self

    def resolved_steps_per_epoch(self, n):
        """Steps per epoch: 1 for the deterministic methods, about one data pass otherwise."""
        if self.steps_per_epoch is not None:
            return int(self.steps_per_epoch)
        if not self.stochastic:
            return 1
        return max(1, int(round(n / self.batch_size)))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    objective: float
    grad_sq_norm: float
    wall_seconds: float
    seed: int


class Trace(list):
    """List of :class:`TraceRow` plus the final iterate ``x``."""

    def __init__(self, rows=(), x=None, status="ok"):
        super().__init__(rows)
        self.x = x
        self.status = status

    def column(self, name):
        return np.array([getattr(r, name) for r in self])


# -- schedules and local curvature ------------------------------------------


def inertial_schedule(k, s2):
    """Inertial coefficient ``s2 * (k - 1) / (k + 2)``, clamped below at 0."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return max(0.0, s2 * (k - 1) / (k + 2))


def estimate_local_lipschitz(problem, point, block, batch=None, floor=1e-6, grad=None):
    """Curvature of ``H`` (or its minibatch mean) along the normalized block gradient.

    Computes ``|Hess_jj g|`` with ``g = grad_j H / |grad_j H|`` by central
    differences of the gradient at step ``h = 1e-4 (1 + |x_j|)``, and never
    returns less than ``floor``.  ``grad`` may carry the already computed
    block gradient on the same batch.
    """
    j = problem.block_index(block)
    if grad is None:
        grad = full_gradient(problem, point, j) if batch is None else sgd_estimate(problem, point, j, batch)
    gnorm = float(np.linalg.norm(grad))
    if not np.isfinite(gnorm):
        raise NumericalError("nonfinite gradient in Lipschitz probe", block=j)
    if gnorm < 1e-12:
        return float(floor)
    direction = grad / gnorm
    xj = point[j]
    h = 1e-4 * (1.0 + float(np.linalg.norm(xj)))
    plus = problem.grad_block_batch(point.replace(j, xj + h * direction), j, batch)
    minus = problem.grad_block_batch(point.replace(j, xj - h * direction), j, batch)
    value = float(np.linalg.norm((plus - minus) / (2.0 * h)))
    if not np.isfinite(value):
        raise NumericalError("nonfinite curvature estimate", block=j)
    return max(value, float(floor))


# -- single steps --------------------------------------------------------------


def _prox_step(prox, anchor, grad, tau, j):
    new = np.asarray(prox.apply(anchor - grad / tau, tau), dtype=float)
    if not np.all(np.isfinite(new)):
        raise NumericalError("nonfinite iterate after prox step", block=j)
    return new


def palm_step(problem, x, prox, s1, floor=1e-6, taus=None):
    """One PALM sweep over all blocks.

    Block ``j`` sees blocks ``< j`` already updated.  When ``taus`` is a list
    the step sizes used are appended to it.
    """
    prox = _prox_list(prox, len(x))
    for j in range(len(x)):
        g = full_gradient(problem, x, j)
        tau = s1 * estimate_local_lipschitz(problem, x, j, None, floor, grad=g)
        x = x.replace(j, _prox_step(prox[j], x[j], g, tau, j))
        if taus is not None:
            taus.append(tau)
    return x


def ipalm_step(problem, x, x_prev, prox, s1, alpha, beta, floor=1e-6, taus=None):
    """One iPALM sweep.

    Per block: ``y = x + alpha (x - x_prev)`` anchors the prox step and the
    gradient is taken at ``z = x + beta (x - x_prev)`` with earlier blocks
    already updated and later blocks at their current value.
    """
    prox = _prox_list(prox, len(x))
    alpha = _per_block(alpha, len(x))
    beta = _per_block(beta, len(x))
    new = x
    for j in range(len(x)):
        y = extrapolate(x[j], x_prev[j], alpha[j])
        z = extrapolate(x[j], x_prev[j], beta[j])
        point = new.replace(j, z)
        g = full_gradient(problem, point, j)
        tau = s1 * estimate_local_lipschitz(problem, point, j, None, floor, grad=g)
        new = new.replace(j, _prox_step(prox[j], y, g, tau, j))
        if taus is not None:
            taus.append(tau)
    return new


def init_sarah_states(num_blocks, p, b):
    return [SarahState(refresh_prob_inv=p, batch_size=b) for _ in range(num_blocks)]


def _stochastic_block(problem, point, j, states, rng, force_full, s1, floor):
    est, states[j] = sarah_step(states[j], problem, j, point, rng, force_full)
    st = states[j]
    tau = s1 * estimate_local_lipschitz(problem, point, j, st.last_batch, floor, grad=st.last_batch_grad)
    return est, tau


def spring_step(problem, x, prox, s1, sarah_states, rng, force_full=False, floor=1e-6, taus=None):
    """One SPRING sweep: PALM with SARAH block gradient estimates.

    ``sarah_states`` is a list with one :class:`SarahState` per block and is
    updated in place.
    """
    prox = _prox_list(prox, len(x))
    for j in range(len(x)):
        est, tau = _stochastic_block(problem, x, j, sarah_states, rng, force_full, s1, floor)
        x = x.replace(j, _prox_step(prox[j], x[j], est, tau, j))
        if taus is not None:
            taus.append(tau)
    return x


def ispalm_step(problem, x, x_prev, prox, s1, alpha, beta, sarah_states, rng,
                force_full=False, floor=1e-6, taus=None):
    """One iSPALM sweep: iPALM with SARAH estimates evaluated at the z-points."""
    prox = _prox_list(prox, len(x))
    alpha = _per_block(alpha, len(x))
    beta = _per_block(beta, len(x))
    new = x
    for j in range(len(x)):
        y = extrapolate(x[j], x_prev[j], alpha[j])
        z = extrapolate(x[j], x_prev[j], beta[j])
        point = new.replace(j, z)
        est, tau = _stochastic_block(problem, point, j, sarah_states, rng, force_full, s1, floor)
        new = new.replace(j, _prox_step(prox[j], y, est, tau, j))
        if taus is not None:
            taus.append(tau)
    return new


def generalized_gradient_norm(problem, x, prox, tau_per_block):
    """Squared norm of the stacked residuals ``tau_j (x_j - prox_j(x_j - grad_j H / tau_j))``."""
    prox = _prox_list(prox, len(x))
    taus = _per_block(tau_per_block, len(x))
    total = 0.0
    for j in range(len(x)):
        if not taus[j] > 0:
            raise ConfigError("step sizes must be positive")
        g = full_gradient(problem, x, j)
        r = taus[j] * (x[j] - prox[j].apply(x[j] - g / taus[j], taus[j]))
        total += float(np.vdot(r, r))
    return total


def objective(problem, x, prox=None):
    """Full objective ``H(x) + sum_j f_j(x_j)``."""
    prox = _prox_list(prox, len(x))
    return float(problem.eval_batch(x, None)) + sum(p.value(b) for p, b in zip(prox, x))


# -- driver ------------------------------------------------------------------


def run(problem, init, prox, config, callback=None):
    """Run ``config.epochs`` epochs of the configured method.

    Returns a :class:`Trace` with one row for the initial point and one per
    epoch, all measured on the full objective.  Stochastic methods force a
    full gradient on the first step of each epoch.  On a numerical failure
    the :class:`NumericalError` is re-raised with the rows recorded so far
    attached as ``exc.trace``.  ``callback(epoch, x)`` runs after each row.
    """
    config.validate(problem.n)
    problem.check_point(init)
    prox = _prox_list(prox, problem.num_blocks)
    smooth = all(p.is_zero for p in prox)
    s1 = config.step_scale
    floor = config.lipschitz_floor
    steps = config.resolved_steps_per_epoch(problem.n)
    rng = Rng(config.seed)
    states = None
    if config.stochastic:
        states = init_sarah_states(problem.num_blocks, config.sarah_p, config.batch_size)

    x = init
    x_prev = init
    last_taus = None
    wall = 0.0
    trace = Trace(x=x)

    def record(epoch):
        nonlocal last_taus
        obj = objective(problem, x, prox)
        if not np.isfinite(obj):
            raise NumericalError(f"nonfinite objective at epoch {epoch}")
        if smooth:
            gsq = sum(float(np.vdot(g, g)) for g in (full_gradient(problem, x, j) for j in range(len(x))))
        else:
            if last_taus is None:
                last_taus = [s1 * estimate_local_lipschitz(problem, x, j, None, floor)
                             for j in range(len(x))]
            gsq = generalized_gradient_norm(problem, x, prox, last_taus)
        trace.append(TraceRow(epoch, obj, gsq, wall, config.seed))
        trace.x = x
        if callback is not None:
            callback(epoch, x)

    k = 0
    try:
        record(0)
        for epoch in range(1, config.epochs + 1):
            for s in range(steps):
                t0 = time.perf_counter()
                taus = []
                a = inertial_schedule(k, config.inertial_scale) if config.inertial else 0.0
                if config.algorithm == "PALM":
                    new = palm_step(problem, x, prox, s1, floor, taus)
                elif config.algorithm == "iPALM":
                    new = ipalm_step(problem, x, x_prev, prox, s1, a, a, floor, taus)
                elif config.algorithm == "SPRING":
                    new = spring_step(problem, x, prox, s1, states, rng, s == 0, floor, taus)
                else:
                    new = ispalm_step(problem, x, x_prev, prox, s1, a, a, states, rng, s == 0, floor, taus)
                wall += time.perf_counter() - t0
                x_prev, x = x, new
                last_taus = taus
                k += 1
            record(epoch)
    except NumericalError as exc:
        trace.status = f"numerical_error: {exc}"
        exc.trace = trace
        raise
    return trace
