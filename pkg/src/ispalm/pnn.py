"""Proximal neural network with three orthogonal layers and a sigmoid head.

Each hidden layer maps ``a -> T sigma(T^T a + b)`` with ``T`` a ``d x n_i``
matrix with orthonormal columns and ``sigma`` the ELU, so the stack of
hidden layers is 1-Lipschitz.  The head is ``sigmoid(T4 a + b4)`` with
``T4`` a ``10 x d`` matrix whose entries are confined to ``[-10, 10]``.
Training minimizes the mean squared error between outputs and one-hot
targets, with the layer constraints enforced by the proximal step
(projection onto the Stiefel manifold, clipping for ``T4``).
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import FormatError, SingularProjection, StructuralError
from .estimators import FiniteSumProblem
from .linalg import BlockVec
from .optim import BoxProx, ProxOp, ZeroProx
from .rng import as_generator

T4_BOUND = 10.0
NUM_CLASSES = 10


def block_names(num_layers=3):
    ts = [f"T{i}" for i in range(1, num_layers + 2)]
    bs = [f"b{i}" for i in range(1, num_layers + 2)]
    return ts + bs


def block_specs(input_dim, widths, num_outputs=NUM_CLASSES):
    specs = [(f"T{i + 1}", (input_dim, w)) for i, w in enumerate(widths)]
    specs.append((f"T{len(widths) + 1}", (num_outputs, input_dim)))
    specs += [(f"b{i + 1}", (w,)) for i, w in enumerate(widths)]
    specs.append((f"b{len(widths) + 1}", (num_outputs,)))
    return specs


def _layers(u):
    L = len(u) // 2 - 1
    Ts = [u[i] for i in range(L)]
    bs = [u[L + 1 + i] for i in range(L)]
    return Ts, bs, u[L], u[2 * L + 1]


def elu(x):
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, np.expm1(np.minimum(x, 0.0)), x)


def elu_prime(x):
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, np.exp(np.minimum(x, 0.0)), 1.0)


def pnn_core(u, X):
    """Output of the orthogonal hidden layers (no head) for rows of ``X``."""
    Ts, bs, _, _ = _layers(u)
    a = np.atleast_2d(X)
    for T, b in zip(Ts, bs):
        a = elu(a @ T + b) @ T.T
    return a


def pnn_forward(u, x):
    """Network output in ``(0, 1)^10`` for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    _, _, T4, b4 = _layers(u)
    if x.shape[-1] != T4.shape[1]:
        raise StructuralError(f"input has dimension {x.shape[-1]}, network expects {T4.shape[1]}")
    out = expit(pnn_core(u, x) @ T4.T + b4)
    return out[0] if x.ndim == 1 else out


def pnn_loss_grad(u, inputs, targets):
    """Mean over the batch of ``|Psi(x) - y|^2`` and its gradient.

    The gradient is a :class:`BlockVec` shaped like ``u``.  Every ``T_i``
    appears twice in its layer, and both uses contribute.
    """
    Ts, bs, T4, b4 = _layers(u)
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.atleast_2d(np.asarray(targets, dtype=float))
    m = X.shape[0]
    acts = [X]
    pres = []
    hs = []
    a = X
    for T, b in zip(Ts, bs):
        pre = a @ T + b
        h = elu(pre)
        a = h @ T.T
        pres.append(pre)
        hs.append(h)
        acts.append(a)
    out = expit(a @ T4.T + b4)
    resid = out - Y
    loss = float(np.mean(np.sum(resid * resid, axis=1)))

    dpre4 = (2.0 / m) * resid * out * (1.0 - out)
    dT4 = dpre4.T @ a
    db4 = dpre4.sum(axis=0)
    da = dpre4 @ T4
    dTs = [None] * len(Ts)
    dbs = [None] * len(Ts)
    for i in reversed(range(len(Ts))):
        T = Ts[i]
        dT = da.T @ hs[i]
        dpre = (da @ T) * elu_prime(pres[i])
        dT += acts[i].T @ dpre
        dTs[i] = dT
        dbs[i] = dpre.sum(axis=0)
        da = dpre @ T.T
    return loss, BlockVec(u.names, dTs + [dT4] + dbs + [db4])


def stiefel_project_iter(A, tol=1e-12, max_iter=100):
    """Polar factor of ``A`` and the number of iterations used.

    Runs ``Y <- 2 Y (I + Y^T Y)^{-1}`` from ``Y = A`` until
    ``|Y^T Y - I|_F <= tol``, ``max_iter`` is reached, or the residual stops
    decreasing (rounding floor for large matrices).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] > A.shape[0]:
        raise StructuralError(f"need a tall d x n matrix with n <= d, got {A.shape}")
    n = A.shape[1]
    eye = np.eye(n)
    G = A.T @ A
    lam_min = np.linalg.eigvalsh(G)[0] if n else 1.0
    if not np.isfinite(lam_min) or lam_min < 1e-16:
        raise SingularProjection(f"smallest squared singular value {lam_min:.3e} is below 1e-16")
    Y = A
    err = np.linalg.norm(G - eye)
    it = 0
    while err > tol and it < max_iter:
        Y_new = 2.0 * np.linalg.solve(eye + G, Y.T).T
        G_new = Y_new.T @ Y_new
        err_new = np.linalg.norm(G_new - eye)
        it += 1
        if err_new >= err and err < 1e3 * tol:
            break
        Y, G, err = Y_new, G_new, err_new
    return Y, it


def stiefel_project(A, tol=1e-12, max_iter=100):
    """Nearest matrix with orthonormal columns (the U factor of the polar decomposition)."""
    return stiefel_project_iter(A, tol, max_iter)[0]


class StiefelProx(ProxOp):
    """Projection onto ``St(d, n)``; independent of ``tau``.

    A numerically singular input is perturbed once by ``1e-6`` Gaussian noise
    from a fixed-seed generator and projected again.
    """

    def __init__(self, tol=1e-12, max_iter=100):
        self.tol = tol
        self.max_iter = max_iter

    def apply(self, x, tau):
        try:
            return stiefel_project(x, self.tol, self.max_iter)
        except SingularProjection:
            gen = np.random.Generator(np.random.Philox(0))
            return stiefel_project(x + 1e-6 * gen.standard_normal(x.shape), self.tol, self.max_iter)

    def value(self, x):
        n = x.shape[1]
        ok = np.linalg.norm(x.T @ x - np.eye(n)) <= 1e-8
        return 0.0 if ok else np.inf


def pnn_prox_ops(num_layers=3):
    """Per-block prox operators in block order (T1..T4, b1..b4)."""
    return [StiefelProx() for _ in range(num_layers)] + [BoxProx(-T4_BOUND, T4_BOUND)] \
        + [ZeroProx() for _ in range(num_layers + 1)]


def pnn_prox(u, tau=1.0):
    """Project ``u`` onto the constraint set: Stiefel layers, clipped head, free biases."""
    ops = pnn_prox_ops(len(u) // 2 - 1)
    return BlockVec(u.names, [op.apply(b, tau) for op, b in zip(ops, u)])


def init_weights(rng, input_dim, widths, num_outputs=NUM_CLASSES):
    """Layers from projected Gaussian matrices, zero biases, head ``0.1 N(0, 1)`` clipped."""
    gen = as_generator(rng, "pnn-init")
    blocks = {}
    for name, shape in block_specs(input_dim, widths, num_outputs):
        if name.startswith("b"):
            blocks[name] = np.zeros(shape)
        elif shape[0] == num_outputs and name == f"T{len(widths) + 1}":
            blocks[name] = np.clip(0.1 * gen.standard_normal(shape), -T4_BOUND, T4_BOUND)
        else:
            blocks[name] = stiefel_project(gen.standard_normal(shape))
    return BlockVec.from_dict(blocks)


def one_hot(labels, num_classes=NUM_CLASSES):
    labels = np.asarray(labels, dtype=int)
    Y = np.zeros((labels.shape[0], num_classes))
    Y[np.arange(labels.shape[0]), labels] = 1.0
    return Y


def accuracy(u, inputs, labels):
    return float(np.mean(np.argmax(pnn_forward(u, inputs), axis=1) == np.asarray(labels)))


def orthogonality_error(u, num_layers=3):
    """Largest ``|T_i^T T_i - I|_F`` over the hidden layers."""
    return max(float(np.linalg.norm(u[i].T @ u[i] - np.eye(u[i].shape[1]))) for i in range(num_layers))


class PnnProblem(FiniteSumProblem):
    """Squared loss of the network as an eight-block finite-sum problem."""

    def __init__(self, inputs, targets, widths):
        self.inputs = np.ascontiguousarray(inputs, dtype=float)
        self.targets = np.ascontiguousarray(targets, dtype=float)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise StructuralError("inputs and targets have different sample counts")
        self.n, self.d = self.inputs.shape
        self.widths = tuple(int(w) for w in widths)
        if any(w > self.d for w in self.widths):
            raise StructuralError(f"layer widths {self.widths} exceed input dimension {self.d}")
        self.block_specs = block_specs(self.d, self.widths, self.targets.shape[1])

    def _batch(self, indices):
        if indices is None:
            return self.inputs, self.targets
        return self.inputs[indices], self.targets[indices]

    def eval_batch(self, point, indices=None):
        X, Y = self._batch(indices)
        r = pnn_forward(point, X) - Y
        return float(np.mean(np.sum(r * r, axis=1)))

    def grad_block_batch(self, point, block, indices=None):
        X, Y = self._batch(indices)
        return pnn_loss_grad(point, X, Y)[1][self.block_index(block)]

    def prox_ops(self):
        return pnn_prox_ops(len(self.widths))


# -- IDX files -----------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path, kind=None):
    """Parse an IDX file.

    Unsigned-byte rank-3 files (images) come back as float64 scaled to
    ``[0, 1]``; rank-1 unsigned-byte files (labels) as int64.  ``kind`` set to
    ``"images"`` or ``"labels"`` additionally requires the matching magic.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError("truncated IDX magic", offset=len(raw))
    magic = struct.unpack_from(">I", raw, 0)[0]
    if kind == "images" and magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}", offset=0)
    if kind == "labels" and magic != IDX_LABELS_MAGIC:
        raise FormatError(f"expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}", offset=0)
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX dimension header", offset=len(raw))
    shape = struct.unpack_from(f">{ndim}I", raw, 4)
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    count = int(np.prod(shape)) if ndim else 1
    expected = header + count * dtype.itemsize
    if len(raw) < expected:
        raise FormatError(f"truncated IDX payload: need {expected} bytes, have {len(raw)}", offset=len(raw))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(shape)
    if raw[2] == 0x08 and ndim == 3:
        return data.astype(np.float64) / 255.0
    if raw[2] == 0x08 and ndim == 1:
        return data.astype(np.int64)
    return data.astype(dtype.newbyteorder("="))


def write_idx(path, array):
    """Write an unsigned-byte IDX file (rank 1 labels or rank 3 images)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise StructuralError("write_idx only writes uint8 arrays")
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist(directory):
    """Paths of the four MNIST files in ``directory`` (plain or .gz), or None."""
    if directory is None:
        return None
    directory = Path(directory)
    found = {}
    for key, stem in _MNIST_FILES.items():
        for cand in (directory / stem, directory / (stem + ".gz")):
            if cand.exists():
                found[key] = cand
                break
        else:
            return None
    return found


def load_mnist(directory, n_train=None, n_test=None):
    """``(X_train, y_train, X_test, y_test)`` with images flattened to 784 columns."""
    paths = find_mnist(directory)
    if paths is None:
        raise FileNotFoundError(f"MNIST files not found in {directory}")
    Xtr = load_idx(paths["train_images"], "images").reshape(-1, 784)
    ytr = load_idx(paths["train_labels"], "labels")
    Xte = load_idx(paths["test_images"], "images").reshape(-1, 784)
    yte = load_idx(paths["test_labels"], "labels")
    return Xtr[:n_train], ytr[:n_train], Xte[:n_test], yte[:n_test]


def load_digits_8x8(n_test=500, seed=0):
    """The 1797-image 8x8 digits set bundled with scikit-learn, scaled to ``[0, 1]``.

    Split into train/test by a seeded permutation.
    """
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    X = X / 16.0
    perm = np.random.Generator(np.random.Philox(seed)).permutation(len(y))
    test, train = perm[:n_test], perm[n_test:]
    return X[train], y[train], X[test], y[test]


# -- weight files ----------------------------------------------------------------


def weights_to_json_dict(u):
    return {
        "blocks": [{"name": n, "shape": list(b.shape), "data": b.reshape(-1).tolist()} for n, b in zip(u.names, u)],
    }


def weights_from_json_dict(obj):
    try:
        names = [b["name"] for b in obj["blocks"]]
        arrays = [np.asarray(b["data"], dtype=float).reshape(b["shape"]) for b in obj["blocks"]]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad weights JSON: {exc}") from None
    return BlockVec(names, arrays)


def save_weights(path, u):
    Path(path).write_text(json.dumps(weights_to_json_dict(u)) + "\n")


def load_weights(path):
    return weights_from_json_dict(json.loads(Path(path).read_text()))
