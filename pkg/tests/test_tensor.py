import numpy as np
import pytest

import swinmae.tensor as T
from swinmae.tensor import ParamStore, Tape, Tensor, TensorError


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for l in range(k):
                s += a[i, l] * b[l, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_hand():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(got - loop_matmul(a, b))) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(TensorError, match="inner dims"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_random_shapes_vs_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m, k, n = rng.integers(1, 9, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(got - loop_matmul(a, b))) < 1e-10


def test_softmax_symmetry():
    out = T.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_masked_entry():
    out = T.softmax_lastdim(Tensor([2.5, -np.inf]))
    assert out.data[0] == 1.0
    assert out.data[1] == 0.0


def test_softmax_all_masked_row_errors():
    with pytest.raises(TensorError, match="masked"):
        T.softmax_lastdim(Tensor([-np.inf, -np.inf]))


def test_softmax_oracle():
    x = np.array([1.0, 2.0, 3.0])
    e = np.exp(x)
    expected = e / e.sum()
    got = T.softmax_lastdim(Tensor(x)).data
    assert np.max(np.abs(got - expected)) < 1e-12


def test_softmax_random_rows_vs_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        x = rng.standard_normal(n) * 3
        e = np.exp(x - x.max())
        assert np.max(np.abs(T.softmax_lastdim(Tensor(x)).data - e / e.sum())) < 1e-10


def test_layer_norm_constant_row():
    x = Tensor(np.full((1, 4), 7.0))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-6)
    assert np.max(np.abs(out.data)) < 1e-3  # eps collapses zero variance


def test_layer_norm_two_points():
    out = T.layer_norm(
        Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12
    )
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        x = rng.standard_normal(n)
        eps = 1e-12
        expected = (x - x.mean()) / np.sqrt(x.var() + eps)
        got = T.layer_norm(
            Tensor(x[None]), Tensor(np.ones(n)), Tensor(np.zeros(n)), eps=eps
        ).data[0]
        assert np.max(np.abs(got - expected)) < 1e-10


def test_backward_sum_gives_ones():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(w)
    T.backward(loss, tape)
    assert np.array_equal(w.grad, np.ones(3))


def test_backward_quadratic():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(T.square(w))
    T.backward(loss, tape)
    assert np.array_equal(w.grad, np.array([2.0, 4.0]))


def test_backward_accumulates_shared_use():
    w = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(T.add(w, w))
    T.backward(loss, tape)
    assert np.array_equal(w.grad, np.array([2.0]))


def test_backward_rejects_nonscalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.square(w)
    with pytest.raises(TensorError, match="scalar"):
        T.backward(y, tape)


def test_nan_surfaces_as_error():
    with np.errstate(invalid="ignore"):
        with pytest.raises(TensorError, match="NaN"):
            T.mul(Tensor([0.0]), Tensor([np.inf]))


def test_grad_check_linear_exact():
    x = Tensor(np.random.default_rng(4).standard_normal(6))
    assert T.grad_check(lambda t: T.sum_(t), x) < 1e-10


def test_grad_check_softmax_dot():
    rng = np.random.default_rng(5)
    w = rng.standard_normal(5)

    def f(t):
        return T.sum_(T.mul(T.softmax_lastdim(t), Tensor(w)))

    assert T.grad_check(f, Tensor(rng.standard_normal(5))) < 1e-6


@pytest.mark.parametrize(
    "name,f",
    [
        ("matmul", lambda x: T.sum_(T.square(T.matmul(x, T.transpose(x, (1, 0)))))),
        ("softmax", lambda x: T.sum_(T.square(T.softmax_lastdim(x)))),
        ("layer_norm", lambda x: T.sum_(
            T.square(T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))))
        )),
        ("gelu", lambda x: T.sum_(T.square(T.gelu(x)))),
        ("tanh", lambda x: T.sum_(T.tanh(x))),
        ("exp", lambda x: T.sum_(T.exp(x))),
        ("sqrt", lambda x: T.sum_(T.sqrt(T.add(T.square(x), T.as_tensor(1.0))))),
        ("reciprocal", lambda x: T.sum_(T.reciprocal(T.add(T.square(x), T.as_tensor(1.0))))),
        ("gather", lambda x: T.sum_(T.square(T.gather(x, np.array([2, 0, 2]), axis=0)))),
        ("roll", lambda x: T.sum_(T.square(T.roll(x, (1,), (0,))))),
        ("mean", lambda x: T.sum_(T.square(T.mean(x, axis=-1)))),
        ("cross_entropy", lambda x: T.softmax_cross_entropy(x, np.array([1, 3, 0]))),
    ],
)
def test_per_op_grad_check(name, f):
    x = Tensor(np.random.default_rng(6).standard_normal((3, 4)))
    assert T.grad_check(f, x) < 1e-6, name


def test_backward_deterministic():
    rng = np.random.default_rng(7)
    w_data = rng.standard_normal((4, 4))
    x_data = rng.standard_normal((2, 4))
    grads = []
    for _ in range(2):
        w = Tensor(w_data.copy(), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.square(T.softmax_lastdim(T.matmul(Tensor(x_data), w))))
        T.backward(loss, tape)
        grads.append(w.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_param_store_lexicographic_and_unique():
    ps = ParamStore()
    ps.add("b", Tensor([1.0]))
    ps.add("a", Tensor([2.0]))
    assert ps.names() == ["a", "b"]
    with pytest.raises(TensorError, match="duplicate"):
        ps.add("a", Tensor([3.0]))
