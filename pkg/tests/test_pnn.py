import math

import numpy as np
import pytest

from ispalm.errors import FormatError, SingularProjection, StructuralError
from ispalm.gradcheck import check_gradients
from ispalm.linalg import BlockVec
from ispalm.pnn import (
    IDX_IMAGES_MAGIC,
    PnnProblem,
    StiefelProx,
    accuracy,
    block_names,
    block_specs,
    elu,
    elu_prime,
    init_weights,
    load_digits_8x8,
    load_idx,
    load_weights,
    one_hot,
    orthogonality_error,
    pnn_core,
    pnn_forward,
    pnn_loss_grad,
    pnn_prox,
    save_weights,
    stiefel_project,
    stiefel_project_iter,
    write_idx,
)
from ispalm.rng import Rng


def random_net(seed, d=6, widths=(5, 4, 3), feasible=True):
    gen = np.random.default_rng(seed)
    if feasible:
        u = init_weights(Rng(seed), d, widths)
        return BlockVec(u.names, [b if n.startswith("T") else gen.standard_normal(b.shape) for n, b in zip(u.names, u)])
    # moderate scale keeps the sigmoid head out of saturation
    return BlockVec([n for n, _ in block_specs(d, widths)], [0.5 * gen.standard_normal(s) for _, s in block_specs(d, widths)])


def polar_oracle(A):
    U, _, Vt = np.linalg.svd(A, full_matrices=False)
    return U @ Vt


# -- activation -----------------------------------------------------------------------------------


def test_elu_examples():
    assert elu(0.0) == 0.0 and elu_prime(0.0) == 1.0
    assert abs(elu(-50.0) + 1.0) <= 1e-12
    assert elu(2.5) == 2.5 and elu_prime(2.5) == 1.0


def test_elu_prime_matches_finite_differences():
    x = np.random.default_rng(0).uniform(-5, 5, size=100)
    x = x[np.abs(x) > 1e-3]
    h = 1e-6
    fd = (elu(x + h) - elu(x - h)) / (2 * h)
    np.testing.assert_allclose(elu_prime(x), fd, rtol=1e-6)


# -- forward --------------------------------------------------------------------------------------


def test_forward_zero_weights():
    specs = block_specs(4, (3, 2, 2))
    u = BlockVec([n for n, _ in specs], [np.zeros(s) for _, s in specs])
    np.testing.assert_array_equal(pnn_forward(u, np.arange(4.0)), np.full(10, 0.5))


def test_forward_matches_hand_evaluation():
    u = random_net(1, d=4, widths=(4, 3, 2), feasible=False)
    x = np.random.default_rng(1).standard_normal(4)
    a = list(x)
    for i in range(3):
        T, b = u[i], u[4 + i]
        pre = [sum(T[r][c] * a[r] for r in range(4)) + b[c] for c in range(T.shape[1])]
        h = [math.expm1(v) if v < 0 else v for v in pre]
        a = [sum(T[r][c] * h[c] for c in range(T.shape[1])) for r in range(4)]
    T4, b4 = u[3], u[7]
    ref = [1.0 / (1.0 + math.exp(-(sum(T4[o][r] * a[r] for r in range(4)) + b4[o]))) for o in range(10)]
    np.testing.assert_allclose(pnn_forward(u, x), ref, rtol=0, atol=1e-14)


def test_forward_range_and_batch_shape():
    u = random_net(2, feasible=False)
    X = 2.0 * np.random.default_rng(2).standard_normal((20, 6))
    out = pnn_forward(u, X)
    assert out.shape == (20, 10) and np.all((out > 0) & (out < 1))
    np.testing.assert_allclose(out[3], pnn_forward(u, X[3]), rtol=1e-14)
    with pytest.raises(StructuralError):
        pnn_forward(u, np.zeros(5))


def test_core_is_one_lipschitz():
    gen = np.random.default_rng(3)
    u = random_net(3, d=8, widths=(8, 5, 3))
    X = gen.standard_normal((1000, 8)) * 3
    Y = gen.standard_normal((1000, 8)) * 3
    lhs = np.linalg.norm(pnn_core(u, X) - pnn_core(u, Y), axis=1)
    assert np.all(lhs <= np.linalg.norm(X - Y, axis=1) * (1 + 1e-9))


# -- loss and gradient ----------------------------------------------------------------------------


def test_gradient_matches_finite_differences():
    for seed in range(10):
        for feasible in (True, False):
            u = random_net(10 + seed, feasible=feasible)
            gen = np.random.default_rng(seed)
            X = gen.standard_normal((8, 6))
            Y = one_hot(gen.integers(0, 10, 8))
            errs = check_gradients(PnnProblem(X, Y, (5, 4, 3)), u)
            assert max(errs.values()) <= 1e-5, errs


def test_perfect_prediction_has_zero_loss_and_gradient():
    u = random_net(4)
    X = np.random.default_rng(4).standard_normal((5, 6))
    loss, g = pnn_loss_grad(u, X, pnn_forward(u, X))
    assert loss == 0.0
    assert all(np.all(b == 0.0) for b in g)


def test_duplicate_samples_leave_mean_unchanged():
    u = random_net(5)
    gen = np.random.default_rng(5)
    x = gen.standard_normal((1, 6))
    y = one_hot([3])
    l1, g1 = pnn_loss_grad(u, x, y)
    l2, g2 = pnn_loss_grad(u, np.vstack([x, x]), np.vstack([y, y]))
    assert l2 == pytest.approx(l1, rel=1e-15)
    assert g1.max_abs_diff(g2) <= 1e-15


def test_problem_wraps_loss():
    u = random_net(6)
    gen = np.random.default_rng(6)
    X = gen.standard_normal((9, 6))
    Y = one_hot(gen.integers(0, 10, 9))
    prob = PnnProblem(X, Y, (5, 4, 3))
    loss, g = pnn_loss_grad(u, X, Y)
    assert prob.eval_batch(u) == pytest.approx(loss, rel=1e-15)
    np.testing.assert_array_equal(prob.grad_block_batch(u, "T2"), g["T2"])
    assert prob.block_names == block_names()
    with pytest.raises(StructuralError):
        PnnProblem(X, Y, (7, 4, 3))


# -- Stiefel projection ------------------------------------------------------------------------------


def test_stiefel_matches_svd_polar_factor():
    gen = np.random.default_rng(7)
    worst_dev = worst_orth = 0.0
    worst_iter = 0
    for _ in range(1000):
        A = gen.standard_normal((8, 5))
        Y, it = stiefel_project_iter(A)
        worst_dev = max(worst_dev, np.max(np.abs(Y - polar_oracle(A))))
        worst_orth = max(worst_orth, np.linalg.norm(Y.T @ Y - np.eye(5)))
        worst_iter = max(worst_iter, it)
    assert worst_dev <= 1e-8
    assert worst_orth <= 1e-10
    assert worst_iter <= 30


def test_stiefel_fixed_point():
    Q, _ = np.linalg.qr(np.random.default_rng(8).standard_normal((8, 5)))
    Y, it = stiefel_project_iter(Q)
    assert np.max(np.abs(Y - Q)) <= 1e-12
    assert it <= 1


def test_stiefel_positive_diagonal():
    np.testing.assert_allclose(stiefel_project(np.diag([2.0, 3.0])), np.eye(2), atol=1e-12)


def test_stiefel_singular_and_shape_errors():
    A = np.zeros((4, 2))
    A[0, 0] = 1.0
    with pytest.raises(SingularProjection):
        stiefel_project(A)
    with pytest.raises(StructuralError):
        stiefel_project(np.ones((2, 3)))
    Y = StiefelProx().apply(A, 1.0)
    assert np.linalg.norm(Y.T @ Y - np.eye(2)) <= 1e-10


# -- prox ------------------------------------------------------------------------------------------


def test_prox_keeps_feasible_point():
    u = random_net(9)
    assert pnn_prox(u).max_abs_diff(u) <= 1e-10


def test_prox_clips_head_and_leaves_biases():
    u = random_net(10, feasible=False)
    T4 = u["T4"].copy()
    T4[0, 0] = 50.0
    T4[1, 1] = -50.0
    v = pnn_prox(u.replace("T4", T4))
    assert v["T4"][0, 0] == 10.0 and v["T4"][1, 1] == -10.0
    for name in ("b1", "b2", "b3", "b4"):
        np.testing.assert_array_equal(v[name], u[name])
    assert orthogonality_error(v) <= 1e-10


def test_prox_idempotent():
    for seed in range(20):
        v = pnn_prox(random_net(20 + seed, feasible=False))
        assert pnn_prox(v).max_abs_diff(v) <= 1e-9


def test_init_weights_feasible():
    u = init_weights(Rng(0), 64, (64, 32, 16))
    assert orthogonality_error(u) <= 1e-10
    assert np.all(np.abs(u["T4"]) <= 10.0)
    assert all(np.all(u[f"b{i}"] == 0) for i in range(1, 5))


# -- files -------------------------------------------------------------------------------------------


def test_idx_round_trip(tmp_path):
    imgs = np.arange(18, dtype=np.uint8).reshape(2, 3, 3) * 14
    labels = np.array([7, 2], dtype=np.uint8)
    write_idx(tmp_path / "img", imgs)
    write_idx(tmp_path / "lab", labels)
    raw = (tmp_path / "img").read_bytes()
    assert int.from_bytes(raw[:4], "big") == IDX_IMAGES_MAGIC
    np.testing.assert_array_equal(load_idx(tmp_path / "img", "images"), imgs / 255.0)
    np.testing.assert_array_equal(load_idx(tmp_path / "lab", "labels"), [7, 2])


def test_idx_errors(tmp_path):
    write_idx(tmp_path / "lab", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(FormatError) as info:
        load_idx(tmp_path / "lab", "images")
    assert info.value.offset == 0
    write_idx(tmp_path / "img", np.zeros((2, 3, 3), dtype=np.uint8))
    (tmp_path / "short").write_bytes((tmp_path / "img").read_bytes()[:-1])
    with pytest.raises(FormatError) as info:
        load_idx(tmp_path / "short")
    assert info.value.offset == 16 + 17
    (tmp_path / "junk").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "junk")


def test_weights_file_round_trip(tmp_path):
    u = random_net(11)
    save_weights(tmp_path / "w.json", u)
    assert load_weights(tmp_path / "w.json").max_abs_diff(u) == 0.0


def test_digits_split_and_accuracy_helper():
    Xtr, ytr, Xte, yte = load_digits_8x8(n_test=500, seed=0)
    assert Xtr.shape == (1297, 64) and Xte.shape == (500, 64)
    assert Xtr.min() >= 0 and Xtr.max() <= 1
    u = init_weights(Rng(1), 64, (64, 32, 16))
    acc = accuracy(u, Xte, yte)
    assert 0.0 <= acc <= 1.0
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])
