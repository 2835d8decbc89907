"""Tensor engine: values, gradients vs the finite-difference oracle, tape."""

import numpy as np
import pytest

from motionkit import autodiff as ad
from motionkit.autodiff import Tensor, backward, finite_diff_check
from motionkit.errors import ContractError, DomainError, NumericError, ShapeError


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# values

def test_matmul_identity():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    eye = t64(np.eye(2))
    assert np.array_equal(ad.matmul(eye, a).data, a.data)
    assert np.array_equal(ad.matmul(a, eye).data, a.data)


def test_matmul_hand_value():
    out = ad.matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.item() == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_softmax_symmetry_and_stability():
    out = ad.softmax(t64([0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [0.5, 0.5])
    big = ad.softmax(t64([1000.0, 0.0]), axis=0)
    assert np.all(np.isfinite(big.data))
    assert big.data[0] > 1 - 1e-12 and big.data[1] < 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.softmax(t64([np.inf, 0.0]), axis=0)


def test_relu_values():
    assert np.array_equal(ad.relu(t64([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert np.array_equal(ad.relu(t64([-5.0, -0.1])).data, [0.0, 0.0])


def test_mean_and_log_exp_roundtrip():
    assert ad.tmean(t64([2.0, 4.0, 6.0])).item() == 4.0
    rng = np.random.default_rng(7)
    x = t64(rng.uniform(0.1, 3.0, size=8))
    assert np.allclose(ad.log(ad.exp(x)).data, x.data, atol=1e-6)


def test_log_sqrt_domain_errors():
    with pytest.raises(DomainError):
        ad.log(t64([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.sqrt(t64([-1.0]))


def test_elementwise_shape_error():
    with pytest.raises(ShapeError):
        ad.add(t64(np.zeros(3)), t64(np.zeros(4)))


def test_scalar_tensor_broadcast():
    s = t64(2.0, grad=True)
    x = t64([1.0, 2.0, 3.0], grad=True)
    y = ad.tsum(ad.mul(x, s))
    backward(y)
    assert np.allclose(s.grad, 6.0)
    assert np.allclose(x.grad, 2.0)


# ---------------------------------------------------------------------------
# gradients

def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_relu_mask():
    x = t64([-1.0, 2.0], grad=True)
    backward(ad.tsum(ad.relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_sum_of_squares_gradient_is_2x():
    x = t64([1.0, -2.0, 0.5], grad=True)
    backward(ad.tsum(ad.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_non_scalar_loss_rejected():
    x = t64(np.zeros(3), grad=True)
    with pytest.raises(ContractError):
        backward(ad.relu(x))


def test_backward_untracked_scalar_is_empty():
    x = t64([1.0, 2.0])
    leaves = backward(ad.tsum(x))
    assert leaves == []
    assert x.grad is None


def test_gradient_accumulates_over_reuse():
    x = t64([1.0, 2.0], grad=True)
    y = ad.add(ad.tsum(ad.mul(x, x)), ad.tsum(x))
    backward(y)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_backward_linearity():
    rng = np.random.default_rng(3)
    xv = rng.normal(size=5)

    def grad_of(fn):
        x = t64(xv, grad=True)
        backward(fn(x))
        return x.grad.copy()

    f = lambda x: ad.tsum(ad.mul(x, x))
    g = lambda x: ad.tsum(ad.exp(x))
    both = lambda x: ad.add(f(x), g(x))
    assert np.allclose(grad_of(both), grad_of(f) + grad_of(g), atol=1e-10)


def test_matmul_gradient_vs_fd():
    rng = np.random.default_rng(0)
    b = t64(rng.normal(size=(3, 3)))
    rep = finite_diff_check(lambda a: ad.tsum(ad.matmul(a, b)),
                            t64(rng.normal(size=(3, 3))), h=1e-4, tol=1e-4)
    assert rep.passed, rep


def test_softmax_jacobian_vs_fd():
    rng = np.random.default_rng(1)
    xv = rng.normal(size=5)
    for i in range(5):
        pick = np.zeros(5)
        pick[i] = 1.0
        rep = finite_diff_check(
            lambda x, p=t64(pick): ad.tsum(ad.mul(ad.softmax(x, axis=0), p)),
            t64(xv), h=1e-4, tol=1e-4)
        assert rep.passed, (i, rep)


def test_relu_gradient_fd_away_from_zero():
    rng = np.random.default_rng(2)
    xv = rng.normal(size=16)
    xv[np.abs(xv) < 0.05] += 0.2  # keep clear of the kink
    rep = finite_diff_check(lambda x: ad.tsum(ad.relu(x)), t64(xv), tol=1e-4)
    assert rep.passed, rep
    x = t64(xv, grad=True)
    backward(ad.tsum(ad.relu(x)))
    assert np.array_equal(x.grad, (xv > 0).astype(float))


OPS = {
    "add": lambda x: ad.add(x, ad.Tensor(np.full(x.shape, 0.7))),
    "sub": lambda x: ad.sub(x, 0.3),
    "mul": lambda x: ad.mul(x, ad.Tensor(np.linspace(0.5, 2.0, x.size).reshape(x.shape))),
    "div": lambda x: ad.div(x, 1.7),
    "div_by_tensor": lambda x: ad.div(1.0, ad.add(ad.mul(x, x), 1.0)),
    "scale": lambda x: ad.scale(x, -2.5),
    "neg": ad.neg,
    "exp": ad.exp,
    "sqrt_shifted": lambda x: ad.sqrt(ad.add(ad.mul(x, x), 1.0)),
    "log_shifted": lambda x: ad.log(ad.add(ad.mul(x, x), 1.0)),
    "abs": ad.tabs,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "softmax": lambda x: ad.mul(ad.softmax(x, axis=0),
                                ad.Tensor(np.linspace(-1, 1, x.size).reshape(x.shape))),
    "sum_axis": lambda x: ad.tsum(ad.mul(x, x), axis=0),
    "mean_axis": lambda x: ad.tmean(ad.exp(x), axis=1),
    "reshape": lambda x: ad.mul(ad.reshape(x, (2, 8)), ad.Tensor(np.ones((2, 8)))),
    "transpose": lambda x: ad.mul(ad.transpose(x), ad.Tensor(np.ones((4, 4)))),
    "concat": lambda x: ad.concat([x, ad.mul(x, 2.0)], axis=0),
    "narrow": lambda x: ad.narrow(x, 0, 1, 2),
    "gather_cols": lambda x: ad.gather_cols(x, np.array([0, 2, 2, 1])),
    "gather_flat": lambda x: ad.gather_flat(x, np.array([0, 5, 5, 11])),
    "repeat_rows": lambda x: ad.repeat_rows(x, 3),
    "scale_rows": lambda x: ad.scale_rows(x, ad.Tensor(np.arange(1.0, x.shape[0] + 1).reshape(-1, 1))),
    "scale_cols": lambda x: ad.scale_cols(x, ad.Tensor(np.arange(1.0, x.shape[1] + 1).reshape(-1, 1))),
    "add_bias": lambda x: ad.add_bias(x, ad.Tensor(np.arange(1.0, x.shape[0] + 1).reshape(-1, 1))),
    "sqrt0": lambda x: ad.sqrt0(ad.add(ad.mul(x, x), 0.5)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_gradient_vs_fd(name):
    # spec invariant: relative error <= 1e-4 with h = 1e-4 in 64-bit
    rng = np.random.default_rng(hash(name) % 2**32)
    shape = (4, 4) if name in ("transpose",) else (2, 8) if name == "reshape" else (4, 4)
    xv = rng.normal(size=shape)
    xv[np.abs(xv) < 0.05] += 0.1  # avoid |.| and relu kinks
    op = OPS[name]
    rep = finite_diff_check(lambda x: ad.tsum(ad.mul(op(x), op(x))), t64(xv),
                            h=1e-4, tol=1e-4)
    assert rep.passed, (name, rep)


def test_scale_rows_cols_gradients_to_scales():
    rng = np.random.default_rng(9)
    a = t64(rng.normal(size=(3, 5)))
    for build in (
        lambda r: ad.scale_rows(a, ad.reshape(r, (3, 1))),
        lambda c: ad.scale_cols(a, ad.reshape(c, (5, 1))),
    ):
        n = 3 if build.__code__.co_varnames[0] == "r" else 5
        rep = finite_diff_check(lambda v: ad.tsum(ad.mul(build(v), build(v))),
                                t64(rng.normal(size=n)), tol=1e-4)
        assert rep.passed, rep


# ---------------------------------------------------------------------------
# spec invariants

def test_softmax_sums_to_one_up_to_1e3():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = t64(rng.uniform(-1e3, 1e3, size=(6, 7)))
        out = ad.softmax(x, axis=1)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
        # entries can underflow to exactly 0 at magnitude 1e3; only the
        # normalization is guaranteed there
        assert np.all(out.data >= 0) and np.all(out.data <= 1)


def test_matmul_identity_exact_up_to_16():
    rng = np.random.default_rng(6)
    for n in (1, 2, 5, 16):
        a = t64(rng.normal(size=(n, n)))
        eye = t64(np.eye(n))
        assert np.array_equal(ad.matmul(a, eye).data, a.data)
        assert np.array_equal(ad.matmul(eye, a).data, a.data)


# ---------------------------------------------------------------------------
# tape semantics

def test_tape_records_in_execution_order_and_clears():
    tape = ad.active_tape()
    tape.clear()
    x = t64([1.0, 2.0], grad=True)
    y = ad.mul(x, x)
    z = ad.tsum(y)
    w = ad.add(z, 1.0)
    outs = [n.out for n in tape.nodes]
    assert outs == [y, z, w]  # reversed walk visits consumers first
    backward(w)
    assert len(tape) == 0


def test_no_grad_suppresses_recording():
    tape = ad.active_tape()
    tape.clear()
    x = t64([1.0], grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert len(tape) == 0
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# finite_diff_check itself

def test_fd_check_sum_of_squares_tight():
    rng = np.random.default_rng(8)
    rep = finite_diff_check(lambda x: ad.tsum(ad.mul(x, x)),
                            t64(rng.normal(size=(3, 3))), tol=1e-6)
    assert rep.passed and rep.n_checked == 9


def test_fd_check_constant_function():
    # softmax-then-sum is constant 1, so both sides are ~0; h=1e-3 keeps the
    # ulp-level FD noise below the 1e-8 relative-error floor
    rng = np.random.default_rng(9)
    rep = finite_diff_check(lambda x: ad.tsum(ad.softmax(x, axis=0)),
                            t64(rng.normal(size=6)), h=1e-3, tol=1e-4)
    assert rep.passed, rep


def test_fd_check_requires_float64():
    with pytest.raises(ContractError):
        finite_diff_check(lambda x: ad.tsum(x), Tensor(np.zeros(2, dtype=np.float32)))


def test_fd_check_reports_failure_without_raising():
    # relu at the kink: subgradient 0 but central difference sees 0.5
    rep = finite_diff_check(lambda x: ad.tsum(ad.relu(x)), t64([0.0]), tol=1e-6)
    assert not rep.passed
    assert rep.max_rel_err > 0.5
