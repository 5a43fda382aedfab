"""Student-t mixture models under an unconstrained parametrization.

Raw parameters ``(alpha_raw, nu_raw, mu, sigma_raw)`` map to the
constrained ones by

* ``alpha = softmax(alpha_raw)``
* ``nu = nu_raw**2 + eps``
* ``Sigma_k = sigma_raw_k^T sigma_raw_k + eps * I``

so plain block gradient steps never leave the model's domain.  The
objective is the mean negative log-likelihood of the data under the
mixture, and all densities are evaluated in log space.

Shapes: ``alpha_raw`` and ``nu_raw`` are ``(K,)``, ``mu`` is ``(d, K)``
(one column per component) and ``sigma_raw`` is ``(K, d, d)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, FormatError, NumericalError, StructuralError
from .estimators import FiniteSumProblem
from .linalg import BlockVec, SpdFactor, cholesky_spd, solve_spd, sym_sqrt_psd
from .rng import as_generator

BLOCKS = ("alpha", "nu", "mu", "sigma")


# -- digamma -----------------------------------------------------------------

# Bernoulli-number coefficients B_2k / (2k) of the asymptotic series.
_PSI_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def digamma(x):
    """Logarithmic derivative of the Gamma function for ``x > 0``.

    Shifts ``x`` upwards with ``psi(x) = psi(x + 1) - 1/x`` until it is at
    least 8, then sums the asymptotic series
    ``log x - 1/(2x) - sum_k B_2k / (2k x^2k)``.  Accepts scalars or arrays.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    y = arr.copy()
    shift = np.zeros_like(y)
    small = y < 8.0
    while np.any(small):
        shift[small] += 1.0 / y[small]
        y[small] += 1.0
        small = y < 8.0
    inv2 = 1.0 / (y * y)
    series = np.zeros_like(y)
    for c in reversed(_PSI_SERIES):
        series = (series + c) * inv2
    out = np.log(y) - 0.5 / y - series - shift
    return float(out) if np.ndim(x) == 0 else out


# -- parameter containers ----------------------------------------------------


@dataclass
class TmmParams:
    alpha_raw: np.ndarray
    nu_raw: np.ndarray
    mu: np.ndarray
    sigma_raw: np.ndarray
    eps: float = 1e-3

    def __post_init__(self):
        self.alpha_raw = np.asarray(self.alpha_raw, dtype=float)
        self.nu_raw = np.asarray(self.nu_raw, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma_raw = np.asarray(self.sigma_raw, dtype=float)
        K = self.alpha_raw.shape[0]
        d = self.mu.shape[0]
        if (self.nu_raw.shape != (K,) or self.mu.shape != (d, K)
                or self.sigma_raw.shape != (K, d, d)):
            raise StructuralError("inconsistent mixture parameter shapes")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")

    @property
    def K(self):
        return self.alpha_raw.shape[0]

    @property
    def d(self):
        return self.mu.shape[0]

    def to_blockvec(self):
        return BlockVec(BLOCKS, [self.alpha_raw, self.nu_raw, self.mu, self.sigma_raw])

    @classmethod
    def from_blockvec(cls, point, eps):
        return cls(point["alpha"], point["nu"], point["mu"], point["sigma"], eps)

    def to_json_dict(self):
        return {
            "K": self.K,
            "d": self.d,
            "eps": self.eps,
            "alpha_raw": self.alpha_raw.tolist(),
            "nu_raw": self.nu_raw.tolist(),
            "mu": self.mu.T.tolist(),
            "sigma_raw": self.sigma_raw.tolist(),
        }

    @classmethod
    def from_json_dict(cls, obj):
        try:
            p = cls(obj["alpha_raw"], obj["nu_raw"], np.asarray(obj["mu"], dtype=float).T,
                    obj["sigma_raw"], obj["eps"])
        except (KeyError, ValueError, IndexError) as exc:
            raise FormatError(f"bad mixture parameter JSON: {exc}") from None
        if p.K != obj["K"] or p.d != obj["d"]:
            raise FormatError("K/d fields disagree with array shapes")
        return p


@dataclass
class MixtureTruth:
    """Constrained mixture parameters (weights, dofs, locations, scatters)."""

    alpha: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)

    @property
    def K(self):
        return self.alpha.shape[0]

    @property
    def d(self):
        return self.mu.shape[0]

    def to_json_dict(self):
        return {"K": self.K, "d": self.d, "alpha": self.alpha.tolist(), "nu": self.nu.tolist(),
                "mu": self.mu.T.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_json_dict(cls, obj):
        try:
            return cls(obj["alpha"], obj["nu"], np.asarray(obj["mu"], dtype=float).T, obj["sigma"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad mixture JSON: {exc}") from None


@dataclass
class Dataset:
    points: np.ndarray
    labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float)
        if self.points.ndim != 2:
            raise StructuralError("dataset points must be an (n, d) array")
        if not np.all(np.isfinite(self.points)):
            raise NumericalError("dataset contains nonfinite entries")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


def _points(data):
    return data.points if isinstance(data, Dataset) else np.asarray(data, dtype=float)


# -- densities ---------------------------------------------------------------


def apply_trafo(params):
    """Constrained ``(alpha, nu, mu, [SpdFactor per component])``."""
    a = params.alpha_raw - np.max(params.alpha_raw)
    alpha = np.exp(a)
    alpha /= alpha.sum()
    nu = params.nu_raw ** 2 + params.eps
    eye = np.eye(params.d)
    factors = []
    for k, S in enumerate(params.sigma_raw):
        if not np.all(np.isfinite(S)):
            raise NumericalError("nonfinite scatter parameter", block="sigma")
        factors.append(cholesky_spd(S.T @ S + params.eps * eye))
    return alpha, nu, params.mu, factors


def student_t_logpdf(x, nu, mu, sigma):
    """Log density of the multivariate Student-t distribution ``T_nu(mu, Sigma)``.

    ``sigma`` is the :class:`SpdFactor` of the scatter matrix.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    d = x.shape[0]
    diff = x - mu
    s = float(diff @ solve_spd(sigma, diff))
    val = (gammaln((d + nu) / 2.0) - gammaln(nu / 2.0) - 0.5 * d * math.log(nu * math.pi)
           - 0.5 * sigma.log_det - 0.5 * (d + nu) * math.log1p(s / nu))
    if not math.isfinite(val):
        raise NumericalError("nonfinite log density")
    return float(val)


class _Evaluation:
    """Per-sample quantities shared by the objective and all block gradients.

    Works with the inverse ``L^{-1}`` of each (small, triangular) Cholesky
    factor so that whitening the batch for all components is a single
    ``(m, d) x (d, K d)`` matrix product.  ``W`` is ``(K, d, m)`` and ``s``,
    ``logpdf``, ``resp`` are ``(K, m)``.
    """

    def __init__(self, alpha_raw, nu_raw, mu, sigma_raw, eps, X):
        m, d = X.shape
        K = alpha_raw.shape[0]
        self.d = d
        self.m = m
        a = alpha_raw - np.max(alpha_raw)
        self.log_alpha = a - np.log(np.sum(np.exp(a)))
        self.nu = nu_raw ** 2 + eps
        Sig = np.matmul(np.transpose(sigma_raw, (0, 2, 1)), sigma_raw) + eps * np.eye(d)
        try:
            L = np.linalg.cholesky(Sig)
        except np.linalg.LinAlgError:
            raise NumericalError("scatter matrix lost positive definiteness", block="sigma") from None
        self.Linv = np.linalg.inv(L)
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        # W[k] = L_k^{-1} (X - mu_k)^T
        shift = np.matmul(self.Linv, mu.T[:, :, None])
        W = (self.Linv.reshape(K * d, d) @ X.T).reshape(K, d, m) - shift
        self.W = W
        s = np.einsum("kdm,kdm->km", W, W)
        self.s = s
        nu = self.nu[:, None]
        self.const = (gammaln((d + self.nu) / 2.0) - gammaln(self.nu / 2.0)
                      - 0.5 * d * np.log(self.nu * np.pi) - 0.5 * logdet)
        self.log1p_s = np.log1p(s / nu)
        joint = (-0.5 * (d + nu)) * self.log1p_s
        joint += (self.const + self.log_alpha)[:, None]
        top = np.max(joint, axis=0)
        joint -= top
        e = np.exp(joint, out=joint)
        total = np.sum(e, axis=0)
        self.lse = top + np.log(total)
        self.resp = e / total

    @property
    def logpdf(self):
        return self.const[:, None] - 0.5 * (self.d + self.nu[:, None]) * self.log1p_s

    def nll(self):
        return -float(np.mean(self.lse))

    def grad_alpha(self):
        return np.exp(self.log_alpha) - self.resp.mean(axis=1)

    def grad_nu(self, nu_raw):
        d, nu, s = self.d, self.nu[:, None], self.s
        term = (digamma(self.nu / 2.0) - digamma((self.nu + d) / 2.0))[:, None] \
            + (d - s) / (nu + s) + self.log1p_s
        g_constrained = 0.5 * np.mean(self.resp * term, axis=1)
        return g_constrained * 2.0 * nu_raw

    def _weighted(self):
        return self.resp * (self.d + self.nu[:, None]) / (self.nu[:, None] + self.s)

    def grad_mu(self):
        u = self._weighted()
        # Sigma^{-1}(x - mu) = L^{-T} W
        Wu = np.matmul(self.W, u[:, :, None]) / self.m
        return -np.matmul(np.transpose(self.Linv, (0, 2, 1)), Wu)[:, :, 0].T

    def grad_sigma(self, sigma_raw):
        u = self._weighted()
        # constrained gradient (R Sigma^{-1} - Sigma^{-1} S_u Sigma^{-1}) / 2m, S_u the weighted scatter
        M = np.matmul(self.W * u[:, None, :], np.transpose(self.W, (0, 2, 1)))
        R = self.resp.sum(axis=1)
        inner = R[:, None, None] * np.eye(self.d) - M
        G = np.matmul(np.transpose(self.Linv, (0, 2, 1)), np.matmul(inner, self.Linv)) / (2.0 * self.m)
        G = 0.5 * (G + np.transpose(G, (0, 2, 1)))
        SG = np.matmul(sigma_raw, G)
        return SG + np.transpose(SG, (0, 2, 1))


def _evaluate(params, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise StructuralError(f"data has shape {X.shape}, model dimension is {params.d}")
    return _Evaluation(params.alpha_raw, params.nu_raw, params.mu, params.sigma_raw, params.eps, X)


def mm_nll(params, data):
    """Mean negative log-likelihood of ``data`` under the mixture given by raw ``params``."""
    val = _evaluate(params, _points(data)).nll()
    if not math.isfinite(val):
        raise NumericalError("nonfinite negative log-likelihood")
    return val


def mm_nll_grad(params, data, block):
    """Gradient of :func:`mm_nll` with respect to one raw parameter block."""
    ev = _evaluate(params, _points(data))
    if block == "alpha":
        g = ev.grad_alpha()
    elif block == "nu":
        g = ev.grad_nu(params.nu_raw)
    elif block == "mu":
        g = ev.grad_mu()
    elif block == "sigma":
        g = ev.grad_sigma(params.sigma_raw)
    else:
        raise KeyError(f"unknown block {block!r}; expected one of {BLOCKS}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("nonfinite gradient", block=block)
    return g


class TmmProblem(FiniteSumProblem):
    """Mixture negative log-likelihood as a four-block finite-sum problem."""

    symmetric_blocks = ("sigma",)

    def __init__(self, data, K, eps=1e-3):
        self.X = _points(data)
        self.n, self.d = self.X.shape
        self.K = int(K)
        self.eps = float(eps)
        self.block_specs = [("alpha", (K,)), ("nu", (K,)), ("mu", (self.d, K)), ("sigma", (K, self.d, self.d))]
        self._cache = None

    def _rows(self, indices):
        return self.X if indices is None else np.take(self.X, indices, axis=0)

    def _eval(self, point, indices):
        # One-entry cache: the driver asks for the objective and every block
        # gradient at the same point, and references keep the ids valid.
        key = (tuple(point.blocks), indices)
        cached = self._cache
        if cached is not None and len(cached[0][0]) == 4 and all(a is b for a, b in zip(cached[0][0], key[0])) \
                and cached[0][1] is key[1]:
            return cached[1]
        ev = _Evaluation(point.blocks[0], point.blocks[1], point.blocks[2], point.blocks[3],
                         self.eps, self._rows(indices))
        self._cache = (key, ev)
        return ev

    def eval_batch(self, point, indices=None):
        return self._eval(point, indices).nll()

    def grad_block_batch(self, point, block, indices=None):
        j = self.block_index(block)
        ev = self._eval(point, indices)
        if j == 0:
            return ev.grad_alpha()
        if j == 1:
            return ev.grad_nu(point.blocks[1])
        if j == 2:
            return ev.grad_mu()
        return ev.grad_sigma(point.blocks[3])

    def params(self, point):
        return TmmParams.from_blockvec(point, self.eps)


# -- data generation and initialization --------------------------------------


def generate_ground_truth(rng, K, d):
    """Random ground-truth mixture.

    Weights ``(a^2 + 1) / |a^2 + 1|_1`` with ``a`` standard normal, degrees of
    freedom ``min(v^2 + 1, 100)`` with ``v ~ N(0, 10^2)``, locations with
    entries ``N(0, 2^2)`` and scatters ``S^T S + I`` with ``S`` standard normal.
    """
    if K < 1 or d < 1:
        raise ConfigError("K and d must be positive")
    gen = as_generator(rng, "truth")
    a = gen.standard_normal(K)
    alpha = (a ** 2 + 1.0) / np.sum(a ** 2 + 1.0)
    v = 10.0 * gen.standard_normal(K)
    nu = np.minimum(v ** 2 + 1.0, 100.0)
    mu = 2.0 * gen.standard_normal((d, K))
    S = gen.standard_normal((K, d, d))
    sigma = np.einsum("kji,kjl->kil", S, S) + np.eye(d)
    return MixtureTruth(alpha, nu, mu, sigma)


def sample_mm(rng, truth, n):
    """Draw ``n`` points: a component from the weights, then ``mu + L z sqrt(nu / w)``.

    ``z`` is standard normal, ``w`` chi-square with ``nu`` degrees of freedom
    (drawn as ``2 * Gamma(nu / 2)``) and ``L`` the Cholesky factor of the
    component scatter.  Component labels are kept on the returned dataset.
    """
    if n < 1:
        raise ConfigError("n must be positive")
    gen = as_generator(rng, "sample")
    K, d = truth.K, truth.d
    labels = gen.choice(K, size=n, p=truth.alpha / truth.alpha.sum())
    z = gen.standard_normal((n, d))
    nu = truth.nu[labels]
    w = 2.0 * gen.standard_gamma(nu / 2.0)
    L = np.linalg.cholesky(truth.sigma)
    x = truth.mu.T[labels] + np.einsum("nij,nj->ni", L[labels], z) * np.sqrt(nu / w)[:, None]
    return Dataset(x, labels)


def init_params(data, K, rng, eps=1e-3, nu_init=3.0):
    """Moment-based start from a random class assignment.

    Each sample gets a uniformly random class; empty classes steal one random
    sample from a class that has at least two.  Per class, the location is
    the class mean, the scatter the (biased) class covariance plus ``eps I``,
    the degrees of freedom ``nu_init`` and the weight the class frequency.
    The constrained values are then mapped back to raw parameters.
    """
    X = _points(data)
    n, d = X.shape
    if n < K * (d + 1):
        raise ConfigError(f"need at least K*(d+1) = {K * (d + 1)} samples, got {n}")
    if not nu_init > eps:
        raise ConfigError("nu_init must exceed eps")
    gen = as_generator(rng, "init")
    labels = gen.integers(0, K, size=n)
    for k in range(K):
        if np.any(labels == k):
            continue
        while True:
            i = int(gen.integers(0, n))
            if np.sum(labels == labels[i]) >= 2:
                labels[i] = k
                break
    alpha = np.bincount(labels, minlength=K) / n
    mu = np.empty((d, K))
    sigma_raw = np.empty((K, d, d))
    for k in range(K):
        Xk = X[labels == k]
        mu[:, k] = Xk.mean(axis=0)
        D = Xk - mu[:, k]
        S = sym_sqrt_psd(D.T @ D / len(Xk))
        sigma_raw[k] = 0.5 * (S + S.T)
    nu_raw = np.full(K, math.sqrt(nu_init - eps))
    return TmmParams(np.log(alpha), nu_raw, mu, sigma_raw, eps)


# -- file formats ------------------------------------------------------------

_TMMD_MAGIC = b"TMMD"
_TMMD_HEADER = struct.Struct("<4sII")


def tmmd_bytes(data):
    """Binary dataset: magic ``TMMD``, u32 n, u32 d (little endian), then float64 rows."""
    X = np.ascontiguousarray(_points(data), dtype="<f8")
    n, d = X.shape
    return _TMMD_HEADER.pack(_TMMD_MAGIC, n, d) + X.tobytes(order="C")


def write_tmmd(path, data):
    Path(path).write_bytes(tmmd_bytes(data))


def read_tmmd(path):
    raw = Path(path).read_bytes()
    if len(raw) < _TMMD_HEADER.size:
        raise FormatError("truncated TMMD header", offset=len(raw))
    magic, n, d = _TMMD_HEADER.unpack_from(raw, 0)
    if magic != _TMMD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_TMMD_MAGIC!r}", offset=0)
    expected = _TMMD_HEADER.size + 8 * n * d
    if len(raw) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(raw)}", offset=len(raw))
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=_TMMD_HEADER.size).reshape(n, d)
    return Dataset(X.astype(float))


def read_csv_dataset(path):
    """Headerless CSV with one sample per line."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                vals = [float(v) for v in line.split(",")]
            except ValueError:
                raise FormatError("non-numeric field", offset=f"line {lineno}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise FormatError(f"expected {width} columns, got {len(vals)}", offset=f"line {lineno}")
            rows.append(vals)
    if not rows:
        raise FormatError("empty CSV dataset")
    return Dataset(np.array(rows))


def load_dataset(path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv_dataset(path)
    return read_tmmd(path)


def save_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_params(path):
    return TmmParams.from_json_dict(json.loads(Path(path).read_text()))


def load_truth(path):
    return MixtureTruth.from_json_dict(json.loads(Path(path).read_text()))


def log_peak_density_bound(d, eps, nu_max=1e12):
    """Upper bound on ``log f(x | nu, mu, Sigma)`` over ``nu >= eps`` and ``Sigma >= eps I``.

    The density is largest at ``x = mu``; its normalizing constant is
    maximized numerically over a log-spaced grid of ``nu`` and then padded
    by ``1e-6`` to cover the grid spacing.
    """
    nu = np.geomspace(eps, nu_max, 20001)
    c = gammaln((d + nu) / 2) - gammaln(nu / 2) - 0.5 * d * np.log(nu * np.pi)
    return float(np.max(c) - 0.5 * d * math.log(eps) + 1e-6)
