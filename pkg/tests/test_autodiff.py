import numpy as np
import pytest

from empp.autodiff import Parameter, RecordingError, Tape, check_gradient
from empp.checks import primitive_gradients
from empp.so3 import IrrepsLayout, SteerableTensor, real_cg, tensor_product


def test_record_add():
    t = Tape()
    out = t.record("add", [t.constant(2.0), t.constant(3.0)])
    assert float(out.value) == 5.0


def test_unknown_primitive():
    t = Tape()
    with pytest.raises(RecordingError):
        t.record("conv2d", [t.constant(1.0)])


def test_shape_mismatch_names_node():
    t = Tape()
    a = t.constant(np.zeros((2, 3)))
    b = t.constant(np.zeros((3, 2)))
    with pytest.raises(RecordingError, match="add"):
        t.add(a, b)


def test_scalar_broadcast_only():
    t = Tape()
    a = t.constant(np.ones((2, 3)))
    assert t.mul(a, t.constant(2.0)).value.sum() == 12.0
    with pytest.raises(RecordingError):
        t.add(a, t.constant(np.ones(3)))


def test_nodes_from_another_tape_rejected():
    a = Tape().constant(1.0)
    t = Tape()
    with pytest.raises(RecordingError):
        t.add(a, t.constant(1.0))


def test_cg_forward_matches_tensor_product_exactly():
    rng = np.random.default_rng(0)
    u = rng.normal(size=3)
    v = rng.normal(size=5)
    tp = tensor_product(
        SteerableTensor(IrrepsLayout([(1, 1)]), u),
        SteerableTensor(IrrepsLayout([(1, 2)]), v),
        IrrepsLayout([(1, 3)]),
    )
    t = Tape()
    out = t.cg(t.constant(u.reshape(1, 3, 1)), t.constant(v.reshape(1, 5, 1)), real_cg(1, 2, 3))
    np.testing.assert_array_equal(out.value.reshape(-1), tp.values)


def test_softmax_sums_to_one():
    t = Tape()
    s = t.softmax(t.constant(np.random.default_rng(1).normal(size=(4, 50)) * 30), axis=1)
    np.testing.assert_allclose(s.value.sum(axis=1), 1.0, atol=1e-12)


def test_backward_square():
    p = Parameter("p", np.array([1.0, 2.0]))
    t = Tape()
    x = t.param(p)
    grads = t.backward(t.sum(t.mul(x, x)))
    np.testing.assert_array_equal(grads["p"], [2.0, 4.0])
    np.testing.assert_array_equal(p.grad, [2.0, 4.0])


def test_scale_chain_gradient_exact():
    p = Parameter("p", np.array(0.7))
    t = Tape()
    y = t.scale(t.scale(t.param(p), 3.0), -2.5)
    assert t.backward(y)["p"] == -7.5


def test_backward_requires_scalar():
    t = Tape()
    x = t.constant(np.ones(3))
    with pytest.raises(ValueError):
        t.backward(x)


def test_parameter_used_twice_accumulates():
    p = Parameter("p", np.array([3.0]))
    t = Tape()
    a, b = t.param(p), t.param(p)
    assert a.id == b.id
    g = t.backward(t.sum(t.mul(a, b)))
    np.testing.assert_array_equal(g["p"], [6.0])


def test_kl_of_softmax_gradient():
    rng = np.random.default_rng(2)
    z = Parameter("z", rng.normal(size=12))
    q = rng.random(12)
    q /= q.sum()

    def loss(tape):
        logp = tape.log_softmax(tape.scale(tape.param(z), 10.0))
        return tape.sum(tape.mul(tape.constant(q), tape.sub(tape.constant(np.log(q)), logp)))

    assert check_gradient(loss, [z], h=1e-4).max_rel_error < 1e-5


def test_check_gradient_quadratic():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    a = a @ a.T
    x = Parameter("x", rng.normal(size=4))

    def f(tape):
        xn = tape.reshape(tape.param(x), (1, 4))
        return tape.sum(tape.mul(tape.matmul(xn, tape.constant(a)), xn))

    assert check_gradient(f, [x]).max_rel_error < 1e-9


def test_check_gradient_constant_function():
    x = Parameter("x", np.ones(3))
    res = check_gradient(lambda tape: tape.constant(4.0), [x])
    assert res.max_rel_error == 0.0
    assert not x.grad.any()


def test_check_gradient_restores_grad_accumulator():
    x = Parameter("x", np.ones(2))
    x.grad[...] = 5.0
    check_gradient(lambda tape: tape.sum(tape.param(x)), [x])
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_every_primitive_gradient():
    errors = primitive_gradients()
    bad = {k: v for k, v in errors.items() if not v < 1e-7}
    assert not bad, bad


def test_backward_is_deterministic():
    rng = np.random.default_rng(4)
    w = Parameter("w", rng.normal(size=(5, 3)))
    x = rng.normal(size=(7, 5))
    idx = rng.integers(0, 4, size=7)

    def run():
        w.zero_grad()
        t = Tape()
        h = t.silu(t.matmul(t.constant(x), t.param(w)))
        s = t.scatter_add(h, idx, 4)
        t.backward(t.sum(t.log_softmax(s, axis=1)))
        return w.grad.copy()

    np.testing.assert_array_equal(run(), run())


def test_sqrt_gradient_at_zero_is_finite():
    p = Parameter("p", np.array([0.0, 4.0]))
    t = Tape()
    g = t.backward(t.sum(t.sqrt(t.param(p))))
    assert np.all(np.isfinite(g["p"]))
    assert g["p"][1] == 0.25


def test_ridders_beats_plain_difference_on_curved_function():
    x = Parameter("x", np.array([0.3]))

    def f(tape):
        return tape.sum(tape.exp(tape.scale(tape.param(x), 30.0)))

    plain = check_gradient(f, [x], h=1e-3).max_rel_error
    extrap = check_gradient(f, [x], h=1e-3, ridders=6).max_rel_error
    assert extrap < 1e-8 < plain
