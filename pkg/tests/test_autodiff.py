import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pectlab import autodiff as ad
from gradcheck import check

TRIALS = 20


def away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def w(rng, n):
    """Fixed random projection so every primitive output reduces to a generic scalar."""
    return rng.standard_normal(n)


# each case: (build inputs from rng, scalar function of the leaves)
CASES = {
    "add": (lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((3, 4))},
            lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.add(L["a"], L["b"]), c)))(r.standard_normal((3, 4)))),
    "sub": (lambda r: {"a": r.standard_normal((5,)), "b": r.standard_normal((5,))},
            lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.sub(L["a"], L["b"]), c)))(r.standard_normal(5))),
    "mul": (lambda r: {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))},
            lambda r: lambda t, L: ad.sum(ad.mul(L["a"], L["b"]))),
    "mul_const": (lambda r: {"a": r.standard_normal((4, 3))},
                  lambda r: (lambda c: lambda t, L: ad.sum(ad.square(ad.mul_const(L["a"], c))))(r.standard_normal(3))),
    "relu": (lambda r: {"a": away_from_zero(r, (6,))},
             lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.relu(L["a"]), c)))(r.standard_normal(6))),
    "tanh": (lambda r: {"a": r.standard_normal((3, 3))},
             lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.tanh(L["a"]), c)))(r.standard_normal((3, 3)))),
    "square": (lambda r: {"a": r.standard_normal((4,))},
               lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.square(L["a"]), c)))(r.standard_normal(4))),
    "sqrt": (lambda r: {"a": np.abs(r.standard_normal((5,))) + 0.1},
             lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.sqrt(L["a"]), c)))(r.standard_normal(5))),
    "matmul": (lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((4, 2))},
               lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.matmul(L["a"], L["b"]), c)))(r.standard_normal((3, 2)))),
    "matmul_batched": (lambda r: {"a": r.standard_normal((2, 3, 4)), "b": r.standard_normal((4, 2))},
                       lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(L["a"] @ L["b"], c)))(r.standard_normal((2, 3, 2)))),
    "bias_add": (lambda r: {"a": r.standard_normal((3, 4)), "b": r.standard_normal((4,))},
                 lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.bias_add(L["a"], L["b"]), c)))(r.standard_normal((3, 4)))),
    "concat": (lambda r: {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 2))},
               lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.concat([L["a"], L["b"]], axis=1), c)))(r.standard_normal((2, 5)))),
    "sum_axis": (lambda r: {"a": r.standard_normal((3, 4))},
                 lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.sum(L["a"], axis=0), c)))(r.standard_normal(4))),
    "mean": (lambda r: {"a": r.standard_normal((3, 4))},
             lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.mean(L["a"], axis=1), c)))(r.standard_normal(3))),
    "l2_norm": (lambda r: {"a": r.standard_normal((3, 4))},
                lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.l2_norm(L["a"]), c)))(r.standard_normal(3))),
    "layer_norm": (lambda r: {"a": r.standard_normal((3, 5))},
                   lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.layer_norm(L["a"]), c)))(r.standard_normal((3, 5)))),
    "softmax": (lambda r: {"a": r.standard_normal((2, 4))},
                lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.softmax(L["a"]), c)))(r.standard_normal((2, 4)))),
    "softmax_cross_entropy": (lambda r: {"a": r.standard_normal((4, 3))},
                              lambda r: (lambda y: lambda t, L: ad.sum(ad.softmax_cross_entropy(L["a"], y)))(r.integers(0, 3, 4))),
    "reshape_transpose": (lambda r: {"a": r.standard_normal((2, 6))},
                          lambda r: (lambda c: lambda t, L: ad.sum(ad.mul_const(ad.transpose(ad.reshape(L["a"], (2, 3, 2)), (0, 2, 1)), c)))(r.standard_normal((2, 2, 3)))),
    "take": (lambda r: {"a": r.standard_normal((2, 5))},
             lambda r: (lambda i, c: lambda t, L: ad.sum(ad.mul_const(ad.take(L["a"], i), c)))(r.integers(0, 5, (3, 2)), r.standard_normal((2, 3, 2)))),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_matches_finite_differences(name):
    make_inputs, make_fn = CASES[name]
    worst = 0.0
    for trial in range(TRIALS):
        rng = np.random.default_rng([trial, 101])
        inputs = make_inputs(rng)
        worst = max(worst, check(make_fn(rng), inputs))
    assert worst < 1e-4, f"{name}: {worst:.3g}"


def test_square_and_norm_examples():
    t = ad.Tape()
    x = t.leaf(3.0)
    t.backward(ad.square(x))
    assert x.grad == 6.0
    t = ad.Tape()
    v = t.leaf([3.0, 4.0])
    t.backward(ad.l2_norm(v))
    assert np.allclose(v.grad, [0.6, 0.8], atol=1e-12)


def test_l2_norm_differentiable_at_zero():
    t = ad.Tape()
    v = t.leaf(np.zeros(3))
    out = ad.l2_norm(v)
    assert out.value == pytest.approx(1e-6)
    t.backward(out)
    assert np.array_equal(v.grad, np.zeros(3))


def test_linear_chain_gradient():
    rng = np.random.default_rng(0)
    W, x = rng.standard_normal((3, 4)), rng.standard_normal((4, 1))
    t = ad.Tape()
    Wt = t.leaf(W)
    t.backward(ad.sum(Wt @ t.constant(x)))
    assert np.allclose(Wt.grad, np.broadcast_to(x.T, (3, 4)))


def test_detach_treats_branch_as_constant():
    a0 = np.array([0.5, -1.5, 2.0])
    t = ad.Tape()
    a = t.leaf(a0)
    t.backward(ad.sum(ad.mul(ad.square(a), ad.detach(a))))
    assert np.array_equal(a.grad, 2.0 * a0 * a0)


def test_detach_blocks_gradient():
    t = ad.Tape()
    a = t.leaf([1.0, 2.0])
    t.backward(ad.sum(ad.square(ad.detach(a))))
    assert np.array_equal(a.grad, np.zeros(2))


def test_gradients_are_deterministic():
    def run():
        rng = np.random.default_rng(5)
        t = ad.Tape()
        a, b = t.leaf(rng.standard_normal((4, 3))), t.leaf(rng.standard_normal((3, 2)))
        t.backward(ad.sum(ad.tanh(a @ b)))
        return a.grad, b.grad
    g1, g2 = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


def test_tape_single_use_and_scalar_output():
    t = ad.Tape()
    a = t.leaf([1.0, 2.0])
    with pytest.raises(ad.TapeError):
        t.backward(ad.square(a))
    out = ad.sum(a)
    t.backward(out)
    with pytest.raises(ad.TapeError):
        t.backward(out)
    with pytest.raises(ad.TapeError):
        ad.Tape().backward(out)


@pytest.mark.parametrize("build", [
    lambda t: ad.add(t.leaf(np.ones(2)), t.leaf(np.ones(3))),
    lambda t: ad.mul(t.leaf(np.ones((2, 2))), t.leaf(np.ones(2))),
    lambda t: ad.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3)))),
    lambda t: ad.bias_add(t.leaf(np.ones((2, 3))), t.leaf(np.ones(2))),
    lambda t: ad.concat([t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 3)))], axis=1),
    lambda t: ad.softmax_cross_entropy(t.leaf(np.ones((2, 3))), [0, 3]),
])
def test_shape_errors(build):
    with pytest.raises(ValueError):
        build(ad.Tape())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_trips():
    t = ad.Tape()
    with pytest.raises(ad.NonFiniteError):
        ad.mul_const(t.leaf([1e300]), 1e300)
    with pytest.raises(ad.NonFiniteError):
        t.leaf([np.nan])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_additivity_of_gradients(seed):
    # grad(f + g) = grad f + grad g
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(5)
    grads = []
    for which in ("f", "g", "fg"):
        t = ad.Tape()
        x = t.leaf(x0)
        f = ad.sum(ad.tanh(x))
        g = ad.sum(ad.square(x))
        t.backward({"f": f, "g": g, "fg": f + g}[which])
        grads.append(x.grad)
    assert np.allclose(grads[0] + grads[1], grads[2], atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    params = {"enc.W": rng.standard_normal((3, 4)), "b": rng.standard_normal(4), "s": np.array(2.5)}
    ad.save_params(tmp_path / "c.ckpt", params, {"note": "x"})
    back, meta = ad.load_params(tmp_path / "c.ckpt")
    assert meta == {"note": "x"} and set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k], params[k]) and back[k].shape == params[k].shape
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        ad.load_params(tmp_path / "bad")
