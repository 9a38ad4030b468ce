import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yldcvt import tensor as T
from yldcvt.tensor import GraphError, NonFiniteError, ShapeError, Tensor

N_SHAPES = 20
# inputs are drawn away from saturated regions (gelu tails, peaked softmax, 2-entry norms)
# whose near-zero gradients are dominated by finite-difference round-off
TOL = 1e-4


def t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def weighted(out: Tensor, seed: int) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * Tensor(w)).sum()


def rand_shape(rng, ndim_lo=1, ndim_hi=4, lo=1, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=rng.integers(ndim_lo, ndim_hi + 1)))


# -- basic behaviour ------------------------------------------------------
def test_int_input_becomes_float64_and_scalars_are_1d():
    x = Tensor([1, 2, 3])
    assert x.dtype == np.float64
    assert Tensor(3.0).shape == (1,)


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_add_mul_example():
    a, b = t([1.0, 2.0]), t([3.0, 4.0])
    out = (a * b + a).sum()
    assert out.item() == 1 * 3 + 1 + 2 * 4 + 2
    out.backward()
    np.testing.assert_array_equal(a.grad, [4.0, 5.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_reused_leaf_accumulates():
    a = t([2.0])
    (a * a * a).sum().backward()
    np.testing.assert_allclose(a.grad, [12.0])


def test_gradients_accumulate_across_backward_calls():
    a = t([1.0, 1.0])
    (a * 2.0).sum().backward()
    (a * 3.0).sum().backward()
    np.testing.assert_array_equal(a.grad, [5.0, 5.0])


def test_backward_requires_scalar_or_seed():
    a = t(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        (a * 2.0).backward()
    (a * 2.0).backward(np.ones((2, 2)))
    np.testing.assert_array_equal(a.grad, 2 * np.ones((2, 2)))


def test_backward_on_detached_output_is_an_error():
    with pytest.raises(GraphError):
        Tensor([1.0]).sum().backward()


def test_no_grad_records_nothing():
    a = t([1.0, 2.0])
    with T.no_grad():
        out = (a * a).sum()
    assert not out.requires_grad and out._parents == ()


def test_graph_topological_order_and_leaves():
    a, b = t([1.0]), t([2.0])
    c = a * b
    d = (c + a).sum()
    g = T.Graph(d)
    order = {id(n): i for i, n in enumerate(g.nodes)}
    assert order[id(c)] < order[id(d)]
    assert {id(x) for x in g.leaves()} == {id(a), id(b)}


def test_deep_chain_does_not_recurse():
    a = t([1.0])
    x = a
    for _ in range(5000):
        x = x + 0.0
    x.sum().backward()
    assert a.grad[0] == 1.0


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(t(np.ones((2, 3))), t(np.ones((4, 2))))


def test_softmax_rows_sum_to_one_with_large_logits():
    out = T.softmax(Tensor([[1000.0, 1001.0, 999.0]])).data
    assert np.isclose(out.sum(), 1.0) and np.all(np.isfinite(out))


def test_layer_norm_rejects_bad_eps_and_gamma():
    x = t(np.ones((2, 4)))
    with pytest.raises(ValueError):
        T.layer_norm(x, t(np.ones(4)), t(np.zeros(4)), eps=0.0)
    with pytest.raises(ShapeError):
        T.layer_norm(x, t(np.ones(3)), t(np.zeros(3)))


def test_conv_output_size_formula():
    assert T.conv_output_size(32, 7, 4, 2) == 8
    assert T.conv_output_size(34, 7, 4, 2) == 8
    assert T.conv_output_size(19, 7, 4, 2) == 5
    assert T.conv_output_size(5, 3, 2, 1) == 3


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 6, 5))
    w = rng.normal(size=(6, 2, 3, 3))
    b = rng.normal(size=6)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1, groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = T.conv_output_size(6, 3, 2, 1), T.conv_output_size(5, 3, 2, 1)
    ref = np.zeros((2, 6, ho, wo))
    for n in range(2):
        for o in range(6):
            g = o // 3
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, 2 * g : 2 * g + 2, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_precondition_errors():
    x = t(np.ones((1, 3, 4, 4)))
    with pytest.raises(ShapeError, match="divisible"):
        T.conv2d(x, t(np.ones((4, 1, 3, 3))), groups=2)
    with pytest.raises(ShapeError, match="kernel"):
        T.conv2d(x, t(np.ones((2, 3, 7, 7))))


def test_gelu_known_values():
    out = T.gelu(Tensor([0.0, 1.0, -1.0])).data
    np.testing.assert_allclose(out, [0.0, 0.8411919906, -0.1588080094], atol=1e-9)


def test_grad_check_eps_range_enforced():
    with pytest.raises(ValueError):
        T.grad_check(lambda a: a.sum(), [t([1.0])], eps=1e-3)


# -- per-op gradient property suites ---------------------------------------
def _case(op: str, rng):
    """Random inputs and a scalar function for one op."""
    if op == "add":
        s = rand_shape(rng)
        b_shape = s[rng.integers(0, len(s)) :]
        return (lambda a, b: weighted(a + b, 1)), [t(rng.normal(size=s)), t(rng.normal(size=b_shape))]
    if op == "mul":
        s = rand_shape(rng)
        return (lambda a, b: weighted(a * b, 1)), [t(rng.normal(size=s)), t(rng.normal(size=s[-1:]))]
    if op == "div":
        s = rand_shape(rng)
        return (lambda a, b: weighted(a / b, 1)), [t(rng.normal(size=s)), t(rng.uniform(0.5, 2.0, size=s))]
    if op == "power":
        s = rand_shape(rng)
        e = float(rng.choice([2.0, 3.0, 0.5, -1.0]))
        return (lambda a: weighted(a**e, 1)), [t(rng.uniform(0.5, 2.0, size=s))]
    if op == "exp":
        return (lambda a: weighted(T.exp(a), 1)), [t(rng.normal(size=rand_shape(rng)))]
    if op == "gelu":
        return (lambda a: weighted(T.gelu(a), 1)), [t(rng.normal(size=rand_shape(rng)))]
    if op == "sum":
        s = rand_shape(rng, 2)
        ax = int(rng.integers(0, len(s)))
        return (lambda a: weighted(a.sum(axis=ax, keepdims=bool(rng.integers(2))), 1)), [t(rng.normal(size=s))]
    if op == "mean":
        s = rand_shape(rng, 2)
        ax = int(rng.integers(0, len(s)))
        return (lambda a: weighted(a.mean(axis=ax), 1)), [t(rng.normal(size=s))]
    if op == "reshape":
        s = rand_shape(rng, 2)
        return (lambda a: weighted(a.reshape(-1, s[-1]), 1)), [t(rng.normal(size=s))]
    if op == "transpose":
        s = rand_shape(rng, 2)
        perm = tuple(int(i) for i in rng.permutation(len(s)))
        return (lambda a: weighted(a.transpose(*perm), 1)), [t(rng.normal(size=s))]
    if op == "getitem":
        s = rand_shape(rng, 2, 3, 2, 5)
        idx = rng.integers(0, s[0], size=3)
        return (lambda a: weighted(a[idx] + a[1:, ...].sum(), 1)), [t(rng.normal(size=s))]
    if op == "concat":
        s = rand_shape(rng, 2, 3)
        s2 = (int(rng.integers(1, 4)),) + s[1:]
        return (lambda a, b: weighted(T.concat([a, b, a], axis=0), 1)), [t(rng.normal(size=s)), t(rng.normal(size=s2))]
    if op == "matmul":
        batch = rand_shape(rng, 0, 2, 1, 3)
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        return (lambda a, b: weighted(a @ b, 1)), [t(rng.normal(size=batch + (m, k))), t(rng.normal(size=(k, n)))]
    if op == "linear":
        s = rand_shape(rng, 1, 3) + (int(rng.integers(1, 5)),)
        o = int(rng.integers(1, 5))
        return (lambda a, w, b: weighted(T.linear(a, w, b), 1)), [t(rng.normal(size=s)), t(rng.normal(size=(s[-1], o))), t(rng.normal(size=o))]
    if op == "softmax":
        return (lambda a: weighted(T.softmax(a), 1)), [t(rng.normal(size=rand_shape(rng)))]
    if op == "layer_norm":
        s = rand_shape(rng, 1, 3) + (int(rng.integers(3, 7)),)
        d = s[-1]
        return (lambda a, g, b: weighted(T.layer_norm(a, g, b), 1)), [
            t(rng.normal(size=s)),
            t(rng.normal(size=d)),
            t(rng.normal(size=d)),
        ]
    if op == "batch_norm":
        s = (int(rng.integers(3, 6)),) + rand_shape(rng, 1, 2, 1, 4)
        d = s[-1]
        axes = tuple(range(len(s) - 1))
        return (lambda a, g, b: weighted(T.normalize(a, g, b, axes), 1)), [
            t(rng.normal(size=s)),
            t(rng.normal(size=d)),
            t(rng.normal(size=d)),
        ]
    if op.startswith("conv2d"):
        groups_kind = op.split("_")[1]
        n = int(rng.integers(1, 3))
        if groups_kind == "dense":
            cin, cout, groups = int(rng.integers(1, 4)), int(rng.integers(1, 4)), 1
        elif groups_kind == "depthwise":
            cin = cout = groups = int(rng.integers(1, 5))
        else:
            groups = 2
            cin, cout = 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3))
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        return (lambda a, wt, b: weighted(T.conv2d(a, wt, b, stride, pad, groups), 1)), [
            t(rng.normal(size=(n, cin, h, w))),
            t(rng.normal(size=(cout, cin // groups, k, k))),
            t(rng.normal(size=cout)),
        ]
    raise KeyError(op)


OPS = [
    "add", "mul", "div", "power", "exp", "gelu", "sum", "mean", "reshape", "transpose",
    "getitem", "concat", "matmul", "linear", "softmax", "layer_norm", "batch_norm",
    "conv2d_dense", "conv2d_depthwise", "conv2d_grouped",
]


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_over_random_shapes(op):
    rng = np.random.default_rng(OPS.index(op))
    worst = 0.0
    for _ in range(N_SHAPES):
        fn, inputs = _case(op, rng)
        worst = max(worst, T.grad_check(fn, inputs, eps=1e-5, tolerance=TOL))
    assert worst < TOL, f"{op}: max relative error {worst:.3e}"


def test_corrupted_gradient_is_detected():
    """Negative control: a custom op whose backward is doubled reads as ~0.5 error."""

    def doubled_square(a):
        return T.custom_op(a.data**2, (a,), lambda g: (2.0 * (2.0 * a.data * g),), "bad_square")

    rng = np.random.default_rng(3)
    err = T.grad_check(lambda a: weighted(doubled_square(a), 2), [t(rng.uniform(0.5, 2.0, size=(3, 4)))])
    assert err == pytest.approx(0.5, abs=1e-6)


# -- algebraic properties ---------------------------------------------------
finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=8), st.lists(finite, min_size=1, max_size=8))
def test_sum_gradient_is_ones_and_linear(xs, ys):
    a = t(xs)
    (a.sum() * 2.0 + 1.0).backward()
    np.testing.assert_array_equal(a.grad, np.full(len(xs), 2.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=2, max_size=8))
def test_softmax_invariant_to_shift(xs):
    x = np.array(xs)
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + 5.0)).data, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 2**31))
def test_layer_norm_output_standardized(rows, d, seed):
    x = np.random.default_rng(seed).normal(size=(rows, d)) * 3 + 1
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)
