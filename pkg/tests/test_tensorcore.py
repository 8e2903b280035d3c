import math

import mpmath
import numpy as np
import pytest

from bivrec import tensorcore as tc
from bivrec.gradcheck import NonDeterministicError, grad_check
from bivrec.rng import Rng
from bivrec.tensorcore import Tape, Tensor


def leaf(arr):
    return Tensor(arr, requires_grad=True)


# -- softmax ---------------------------------------------------------------


def test_softmax_symmetric():
    out = tc.softmax(Tensor([0.0, 0.0])).data
    assert out.tolist() == [0.5, 0.5]


def test_softmax_log_values():
    out = tc.softmax(Tensor([math.log(1.0), math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_large_inputs_match_mpmath():
    x = [1000.0, 1000.5]
    out = tc.softmax(Tensor(x)).data
    mpmath.mp.dps = 50
    ex = [mpmath.exp(mpmath.mpf(v)) for v in x]
    ref = [float(e / sum(ex)) for e in ex]
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, ref, rtol=1e-14)
    assert abs(out.sum() - 1.0) <= 1e-12


def test_softmax_empty_axis_errors():
    with pytest.raises(ValueError):
        tc.softmax(Tensor(np.zeros((2, 0))), axis=1)


def test_masked_softmax_zeroes_masked_entries():
    x = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    mask = np.array([[True, False, True], [False, False, False]])
    out = tc.softmax(x, axis=1, mask=mask).data
    assert out[0, 1] == 0.0
    assert abs(out[0].sum() - 1.0) <= 1e-12
    assert out[1].tolist() == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("seed", range(10))
def test_softmax_is_distribution(seed):
    x = np.random.default_rng(seed).normal(scale=50, size=(5, 7))
    out = tc.softmax(Tensor(x), axis=0).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


# -- gumbel ----------------------------------------------------------------


class _FixedUniform(Rng):
    def __init__(self, u):
        super().__init__(0)
        self._u = np.asarray(u, dtype=float)

    def uniform(self, shape=()):
        return np.broadcast_to(self._u, shape).copy()


def test_gumbel_known_points():
    assert tc.gumbel_noise((), _FixedUniform(math.exp(-1))).data == pytest.approx(0.0, abs=1e-15)
    assert tc.gumbel_noise((), _FixedUniform(math.exp(-math.e))).data == pytest.approx(-1.0, abs=1e-15)


def test_gumbel_mean_is_euler_mascheroni():
    g = tc.gumbel_noise((100_000,), Rng(3)).data
    assert abs(g.mean() - 0.5772156649) < 0.02


def test_gumbel_is_finite_for_extreme_uniforms():
    g = tc.gumbel_noise((2,), _FixedUniform([0.0, 1.0]))
    assert np.isfinite(g.data).all()


# -- gelu ------------------------------------------------------------------


def test_gelu_values():
    assert tc.gelu(Tensor(0.0)).data == 0.0
    assert abs(tc.gelu(Tensor(10.0)).data - 10.0) < 1e-9
    mpmath.mp.dps = 40
    ref = float(mpmath.mpf(0.5) * (1 + mpmath.erf(1 / mpmath.sqrt(2))))
    assert abs(tc.gelu(Tensor(1.0)).data - ref) < 1e-15
    assert abs(ref - 0.841345) < 1e-6


# -- tape semantics --------------------------------------------------------


def test_power_rule():
    x = leaf(3.0)
    with Tape() as tape:
        loss = x * x
    tape.backward(loss)
    assert x.grad == 6.0


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_tape_reuse_rejected():
    x = leaf(2.0)
    with Tape() as tape:
        loss = x * x
    tape.backward(loss)
    with pytest.raises(tc.TapeError):
        tape.backward(loss)
    with pytest.raises(tc.TapeError):
        with tape:
            pass


def test_nonfinite_construction_rejected():
    with pytest.raises(tc.NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(tc.NonFiniteError):
        tc.log(Tensor([0.0]))


def test_no_recording_outside_tape():
    x = leaf(2.0)
    y = x * x
    assert not y.requires_grad and y.is_leaf


def test_embedding_lookup_twice_doubles_gradient():
    table = leaf(np.arange(12.0).reshape(4, 3))
    with Tape() as tape:
        rows = tc.embedding(table, np.array([2, 2, 1]))
        loss = rows.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(table.grad[2], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(table.grad[1], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(table.grad[0], 0.0)


def test_embedding_padding_reads_zero_and_gets_no_grad():
    table = leaf(np.ones((3, 2)))
    with Tape() as tape:
        rows = tc.embedding(table, np.array([0, 1]), padding_idx=0)
        loss = rows.sum()
    tape.backward(loss)
    assert rows.data[0].tolist() == [0.0, 0.0]
    assert table.grad[0].tolist() == [0.0, 0.0]


def test_sum_of_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(2, 2))), leaf(rng.normal(size=(2, 2)))
    report = grad_check(lambda: (a @ b).sum(), {"a": a, "b": b}, tol=1e-6)
    assert report.passed, report.summary()
    with Tape() as tape:
        loss = (a @ b).sum()
    tape.backward(loss)
    # d/dA sum(AB) = 1 B^T: every row equals the row sums of B
    np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (2, 1)))


def test_softmax_pick_matches_finite_differences():
    x = leaf(np.random.default_rng(1).normal(size=5))
    report = grad_check(lambda: tc.softmax(x)[2], {"x": x}, eps=1e-5, tol=1e-6)
    assert report.passed, report.summary()


def test_stop_gradient_blocks_backward():
    x = leaf(3.0)
    with Tape() as tape:
        loss = x * tc.stop_gradient(x)
    tape.backward(loss)
    assert x.grad == 3.0


def test_seeded_runs_are_bit_identical():
    def run():
        rng = Rng(11)
        w = leaf(rng.normal((3, 4)))
        with Tape() as tape:
            y = tc.softmax(w + tc.gumbel_noise((3, 4), rng.child("g")), axis=0)
            loss = (y * y).sum()
        tape.backward(loss)
        return y.data, w.grad

    (y1, g1), (y2, g2) = run(), run()
    assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()


# -- grad_check itself -----------------------------------------------------


def test_grad_check_sum_of_squares():
    x = leaf(np.random.default_rng(2).normal(size=(3, 4)))
    assert grad_check(lambda: (x * x).sum(), {"x": x}, tol=1e-6).passed


def test_grad_check_flags_wrong_gradient():
    def wrong_square(a):
        return tc._make(a.data * a.data, (a,), lambda g: (3.0 * g * a.data,), "wrong_square")

    x = leaf(np.array([1.0, -2.0]))
    report = grad_check(lambda: wrong_square(x).sum(), {"x": x}, tol=1e-6)
    assert not report.passed
    assert len(report.failures) == 2


def test_grad_check_rejects_nondeterministic_f():
    x = leaf(np.array([1.0]))
    counter = iter(range(100))

    def f():
        return (x * float(next(counter))).sum()

    with pytest.raises(NonDeterministicError):
        grad_check(f, {"x": x})


def test_grad_check_eps_range():
    x = leaf(1.0)
    with pytest.raises(ValueError):
        grad_check(lambda: x * x, {"x": x}, eps=1e-2)


# -- every primitive on random 3x4 inputs ----------------------------------


def _primitive_cases():
    mask = np.array([[True, False, True, True],
                     [False, False, True, False],
                     [True, True, True, True]])
    idx = np.array([2, 0, 2, 1])

    def positive(a):
        return tc.exp(a) + 0.1

    return {
        "matmul": (2, lambda a, b: (a @ tc.transpose(b)).sum() * 0.5),
        "add": (2, lambda a, b: (tc.add(a, b) * a).sum()),
        "sub": (2, lambda a, b: (tc.sub(a, b) * b).sum()),
        "mul": (2, lambda a, b: tc.mul(a, b).sum()),
        "div": (2, lambda a, b: tc.div(a, positive(b)).sum()),
        "exp": (1, lambda a: tc.exp(a).sum()),
        "log": (1, lambda a: tc.log(positive(a)).sum()),
        "neg": (1, lambda a: (tc.neg(a) * a).sum()),
        "square": (1, lambda a: tc.square(a).sum()),
        "erf": (1, lambda a: tc.erf(a).sum()),
        "gelu": (1, lambda a: tc.gelu(a).sum()),
        "concatenate": (2, lambda a, b: (tc.concatenate([a, b], axis=1) * tc.concatenate([b, a], axis=1)).sum()),
        "slice": (1, lambda a: (a[1:, ::2] * a[:2, 1::2]).sum()),
        "sum_axis": (1, lambda a: tc.square(a.sum(axis=0)).sum()),
        "mean_axis": (1, lambda a: tc.square(a.mean(axis=1)).sum()),
        "broadcast": (1, lambda a: (tc.broadcast_to(a[0:1], (3, 4)) * a).sum()),
        "transpose": (1, lambda a: (tc.transpose(a) @ a).sum()),
        "reshape": (1, lambda a: (a.reshape(4, 3) @ a).sum()),
        "embedding": (1, lambda a: tc.square(tc.embedding(a, idx)).sum()),
        "cosine": (2, lambda a, b: tc.cosine_similarity(a, b).sum()),
        "l2_normalize": (1, lambda a: (tc.l2_normalize(a) * a).sum()),
        "masked_fill": (1, lambda a: tc.square(tc.masked_fill(a, mask, 0.5)).sum()),
        "softmax": (1, lambda a: (tc.softmax(a, axis=1) * a).sum()),
        "masked_softmax": (1, lambda a: (tc.softmax(a, axis=0, mask=mask) * a).sum()),
        "log_softmax": (1, lambda a: (tc.log_softmax(a, axis=0) * a).sum()),
    }


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_grad_check(name, seed):
    arity, fn = _primitive_cases()[name]
    rng = np.random.default_rng(seed)
    args = [leaf(rng.normal(size=(3, 4))) for _ in range(arity)]
    report = grad_check(lambda: fn(*args), {f"x{i}": a for i, a in enumerate(args)}, tol=1e-6)
    assert report.passed, report.summary()


def test_cosine_zero_vector_guard():
    a, b = leaf(np.zeros((1, 3))), leaf(np.ones((1, 3)))
    with Tape() as tape:
        loss = tc.cosine_similarity(a, b).sum()
    tape.backward(loss)
    assert loss.data == 0.0
    assert not a.grad.any() and not b.grad.any()


def test_l2_normalize_zero_raises():
    with pytest.raises(ValueError):
        tc.l2_normalize(Tensor(np.zeros((1, 3))))
