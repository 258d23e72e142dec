"""
確定性張量核心測試
"""
import numpy as np
import pytest

from services.errors import DimensionError, EvaluationError
from services.numeric import (
    GradPair, activation, activation_grad, as_tensor, check_gradient, layer_norm, layer_norm_grad,
    matmul, matmul_grad, ordered_sum, softmax_rows, softmax_rows_grad, token_matmul, token_matmul_grad,
)


def _triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for t in range(a.shape[1]):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def _weighted_sum(pair_fn, weights):
    """將 GradPair 轉為純量函數：sum(value ⊙ weights)"""
    def f(ps):
        pair = pair_fn(*ps)

        def backward(d):
            grads = pair.backward(d * weights)
            return list(grads) if isinstance(grads, tuple) else [grads]

        return GradPair(float(np.sum(pair.value * weights)), backward)
    return f


def test_matmul_small_cases():
    """測試單位矩陣與手算案例"""
    assert np.array_equal(matmul(np.eye(2), np.array([[5.0, 6.0], [7.0, 8.0]])), [[5, 6], [7, 8]])
    assert np.array_equal(matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11.0]])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop_exactly(seed):
    """測試與三重迴圈 oracle 位元相同"""
    rng = np.random.default_rng(seed)
    r, k, c = rng.integers(1, 17, size=3)
    a, b = rng.standard_normal((r, k)), rng.standard_normal((k, c))
    assert np.array_equal(matmul(a, b), _triple_loop(a, b))


def test_matmul_shape_mismatch_names_shapes():
    """測試形狀錯誤訊息包含兩個形狀"""
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_rows_independent_of_batch():
    """測試單列結果與批次大小無關"""
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((9, 7)), rng.standard_normal((7, 5))
    full = matmul(a, b)
    for i in range(9):
        assert np.array_equal(full[i], matmul(a[i:i + 1], b)[0])


def test_ordered_sum_axis():
    x = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(ordered_sum(x, axis=-1), x.sum(axis=-1))
    assert np.array_equal(ordered_sum(x, axis=0), x.sum(axis=0))


def test_as_tensor_validation():
    """測試 dtype 與維度檢查"""
    assert as_tensor([[1, 2]], np.float32).dtype == np.float32
    with pytest.raises(DimensionError):
        as_tensor(np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        as_tensor([1, 2], np.int32)


def test_layer_norm_examples():
    """測試零變異數、對稱與公式 oracle"""
    ones = np.ones(3)
    assert np.array_equal(layer_norm(np.ones(3), ones, np.zeros(3)), np.zeros(3))
    sym = layer_norm(np.array([-2.0, 2.0]), np.ones(2), np.zeros(2), eps=1e-12)
    assert np.allclose(sym, [-1.0, 1.0], atol=1e-12)

    x = np.array([1.0, 2.0, 3.0])
    expected = 2.0 * (x - 2.0) / np.sqrt(2.0 / 3.0 + 1e-5) + 1.0
    assert np.allclose(layer_norm(x, np.full(3, 2.0), ones), expected, atol=1e-12)


def test_layer_norm_moments():
    rng = np.random.default_rng(0)
    y = layer_norm(rng.standard_normal((20, 16)), np.ones(16), np.zeros(16), eps=1e-12)
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-10)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) <= 1e-6)


def test_activation_examples():
    assert activation(np.array([0.0]))[0] == 0.0
    assert np.array_equal(activation(np.array([-1.0, 2.0]), "relu"), [0.0, 2.0])
    xs = np.arange(-3.0, 4.0)
    reference = [0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3))) for x in xs]
    assert np.allclose(activation(xs), reference, atol=1e-12)
    with pytest.raises(ValueError):
        activation(xs, "tanh")


def test_softmax_rows_with_mask():
    """測試遮罩位置權重為零且每列總和為 1"""
    logits = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    allowed = np.array([[True, True, False], [True, True, True]])
    p = softmax_rows(logits, allowed)
    assert p[0, 2] == 0.0
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.allclose(p[1], 1.0 / 3.0)


def test_check_gradient_quadratic():
    """測試 f(x) = x² 在 x = 3"""
    f = lambda ps: GradPair(float(ps[0][0] ** 2), lambda d: [2.0 * ps[0] * d])
    report = check_gradient(f, [np.array([3.0])], tol=1e-8)
    assert report.passed
    assert report.params[0].entries_checked == 1


def test_check_gradient_matmul():
    rng = np.random.default_rng(1)
    w, x = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    report = check_gradient(_weighted_sum(matmul_grad, np.ones((3, 2))), [w, x], tol=1e-7)
    assert report.passed


def test_check_gradient_corrupted_fails():
    """測試解析梯度乘 1.01 時未通過"""
    rng = np.random.default_rng(2)
    w, x = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

    def f(ps):
        pair = matmul_grad(*ps)
        return GradPair(float(np.sum(pair.value)), lambda d: [g * 1.01 for g in pair.backward(np.ones((3, 2)) * d)])

    assert not check_gradient(f, [w, x]).passed


def test_check_gradient_non_finite_raises():
    f = lambda ps: GradPair(float(np.log(ps[0][0])), lambda d: [d / ps[0]])
    with pytest.raises(EvaluationError):
        check_gradient(f, [np.array([0.0])])


def test_check_gradient_max_entries():
    rng = np.random.default_rng(4)
    w, x = rng.standard_normal((6, 5)), rng.standard_normal((5, 3))
    report = check_gradient(_weighted_sum(matmul_grad, np.ones((6, 3))), [w, x], max_entries=7)
    assert [p.entries_checked for p in report.params] == [7, 7]
    assert report.passed


@pytest.mark.parametrize("seed", range(20))
def test_grad_pairs_pass_gradient_check(seed):
    """測試各運算的反向程序 (f64, h=1e-5, tol=1e-5)"""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5))
    gamma, beta = rng.standard_normal(5), rng.standard_normal(5)
    weights = rng.standard_normal((3, 5))
    assert check_gradient(_weighted_sum(layer_norm_grad, weights), [x, gamma, beta]).passed

    for kind in ("gelu", "relu"):
        z = rng.standard_normal((3, 5)) + 0.05
        f = _weighted_sum(lambda v: activation_grad(v, kind), weights)
        assert check_gradient(f, [z]).passed

    allowed = rng.random((3, 5)) < 0.7
    allowed[:, 0] = True
    f = _weighted_sum(lambda v: softmax_rows_grad(v, allowed), weights)
    assert check_gradient(f, [rng.standard_normal((3, 5))]).passed

    a, w = rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 4, 2))
    assert check_gradient(_weighted_sum(token_matmul_grad, rng.standard_normal((2, 3, 2))), [a, w]).passed


def test_token_matmul_per_token_weights():
    """測試第 h 列只使用 W[h]"""
    rng = np.random.default_rng(5)
    a, w = rng.standard_normal((3, 4)), rng.standard_normal((3, 4, 2))
    out = token_matmul(a, w)
    for h in range(3):
        assert np.array_equal(out[h], matmul(a[h:h + 1], w[h])[0])


def test_determinism():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 8))
    assert np.array_equal(layer_norm(x, np.ones(8), np.zeros(8)), layer_norm(x, np.ones(8), np.zeros(8)))
