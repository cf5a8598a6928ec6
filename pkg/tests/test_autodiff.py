import threading
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewshot_sbir import autodiff as ad
from fewshot_sbir.autodiff import (AdamState, NumericDomainError, OptimizerStateError, ShapeError,
                                   Tensor, UnreachableParameterWarning, adam_step,
                                   finite_difference_check, gradient, no_grad, sgd_step)
from fewshot_sbir.autodiff.check import OracleInvalidError, rel_error
from fewshot_sbir.gradcheck import PRIMITIVES

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


# -- known values -----------------------------------------------------------------

def test_l2_normalize_345():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_distance_to_self_is_zero():
    v = Tensor([[1.0, -2.0, 3.0]])
    assert ad.euclidean_distance(v, v).data.tolist() == [0.0]


def test_grad_of_sum_of_squares():
    w = Tensor([1.0, 2.0], requires_grad=True)
    g = gradient(ad.tsum(w * w), [w])[0]
    assert g.data.tolist() == [2.0, 4.0]


def test_second_order_cube():
    w = Tensor(2.0, requires_grad=True)
    g = gradient(w * w * w, [w], create_graph=True)[0]
    assert g.item() == 12.0
    assert gradient(g, [w])[0].item() == 12.0


def test_quadratic_form_fd_is_tight():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    a = a @ a.T
    x = Tensor(rng.normal(size=(4, 1)))
    f = lambda p: ad.tsum(ad.transpose(p["x"]) @ Tensor(a) @ p["x"])
    assert finite_difference_check(f, {"x": x}).max_rel_error < 1e-7


def test_relu_kink_excluded_passes():
    x = Tensor(ad.away_from_kinks(np.random.default_rng(2), (20,), 1e-3))
    assert np.all(np.abs(x.data) >= 1e-3)
    assert finite_difference_check(lambda p: ad.tsum(ad.relu(p["x"])), {"x": x}).passed


def test_sgd_examples():
    p = {"w": Tensor([1.0])}
    assert sgd_step(p, {"w": Tensor([2.0])}, {"w": Tensor([0.5])})["w"].data.tolist() == [0.0]
    assert sgd_step(p, {"w": Tensor([2.0])}, 0.0)["w"].data.tolist() == [1.0]


def test_sgd_per_parameter_rates_elementwise():
    p = {"w": Tensor([1.0, 1.0, 1.0])}
    out = sgd_step(p, {"w": Tensor([1.0, 1.0, 1.0])}, {"w": Tensor([0.0, 0.5, 2.0])})
    assert out["w"].data.tolist() == [1.0, 0.5, -1.0]


def test_adam_first_step():
    p = {"w": Tensor([0.0])}
    state = AdamState.init(p)
    assert state.lr == 1e-4
    out, _ = adam_step(state, p, {"w": np.array([1.0])})
    # at t=1 both moment estimates are exact after bias correction: -lr * 1 / (1 + eps)
    assert out["w"].data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": Tensor([0.3, -2.0])}
    state = AdamState.init(p)
    for _ in range(50):
        p, state = adam_step(state, p, {"w": np.zeros(2)})
    assert p["w"].data.tolist() == [0.3, -2.0]


def test_adam_uninitialized_state():
    with pytest.raises(OptimizerStateError):
        adam_step(AdamState(), {"w": Tensor([1.0])}, {"w": np.ones(1)})


def test_adam_per_name_rate():
    p = {"a": Tensor([0.0]), "b": Tensor([0.0])}
    state = AdamState.init(p, lr=1e-3)
    state.lr_by_name = {"b": 1e-1}
    out, _ = adam_step(state, p, {"a": np.ones(1), "b": np.ones(1)})
    assert out["a"].data[0] == pytest.approx(-1e-3)
    assert out["b"].data[0] == pytest.approx(-1e-1)


# -- finite differences: every primitive, 10 seeds ----------------------------------------

@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name, seed):
    f, params = PRIMITIVES[name](np.random.default_rng([seed, 17]))
    report = finite_difference_check(f, params, tolerance=1e-5)
    assert report.passed, report.per_param


SECOND_ORDER = {
    "mul": lambda x: x * x * x,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "log": lambda x: ad.log(x * x + 1.0),
    "softplus": lambda x: ad.softplus(x, 0.5),
    "sqrt": lambda x: ad.sqrt(x * x + 1.0),
    "div": lambda x: 1.0 / (x * x + 1.0),
    "l2": ad.l2_normalize,
}


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", sorted(SECOND_ORDER))
def test_second_order_matches_finite_differences(name, seed):
    """Differentiate the recorded gradient and compare with FD of the gradient."""
    rng = np.random.default_rng(seed)
    x0 = Tensor(rng.normal(size=4))
    w = Tensor(rng.normal(size=4))
    v = Tensor(rng.normal(size=4))
    op = SECOND_ORDER[name]

    def grad_dot_v(p):
        x = p["x"] if p["x"].requires_grad else Tensor(p["x"].data, requires_grad=True)
        g = gradient(ad.tsum(op(x) * w), [x], create_graph=True)[0]
        return ad.tsum(g * v)

    assert finite_difference_check(grad_dot_v, {"x": x0}).max_rel_error < 1e-5


def test_reductions_and_keepdims():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert ad.tsum(x, axis=0).data.tolist() == [3.0, 5.0, 7.0]
    assert ad.mean(x, axis=1, keepdims=True).shape == (2, 1)
    g = gradient(ad.mean(x), [x])[0]
    np.testing.assert_allclose(g.data, np.full((2, 3), 1 / 6))


def test_max_gradient_goes_to_first_argmax():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    g = gradient(ad.tsum(ad.tmax(x, axis=1)), [x])[0]
    assert g.data.tolist() == [[0.0, 1.0, 0.0]]


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    assert gradient(ad.tsum(ad.relu(x)), [x])[0].data.tolist() == [0.0, 1.0, 0.0]


def test_grad_reverse_forward_identity_backward_negated():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = ad.grad_reverse(x, 0.25)
    assert y.data.tolist() == [1.0, -2.0]
    assert gradient(ad.tsum(y * Tensor([3.0, 5.0])), [x])[0].data.tolist() == [-0.75, -1.25]


# -- errors and bookkeeping ----------------------------------------------------------------

def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_numeric_domain_errors():
    with pytest.raises(NumericDomainError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NumericDomainError):
        ad.sqrt(Tensor([-1.0]))
    with pytest.raises(NumericDomainError):
        Tensor([np.nan])


def test_non_scalar_output_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        gradient(x * 2.0, [x])


def test_unreachable_parameter_warns_and_returns_zero():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0, 3.0], requires_grad=True)
    with pytest.warns(UnreachableParameterWarning):
        g = gradient(ad.tsum(x * 2.0), {"x": x, "y": y})
    assert g.unreachable == ["y"]
    assert g["y"].data.tolist() == [0.0, 0.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.parents == ()


def test_grad_mode_is_thread_local():
    seen = []
    with no_grad():
        t = threading.Thread(target=lambda: seen.append(ad.is_grad_enabled()))
        t.start()
        t.join()
        assert not ad.is_grad_enabled()
    assert seen == [True]


def test_degenerate_norm_warns():
    with pytest.warns(ad.DegenerateNormWarning):
        out = ad.l2_normalize(Tensor([0.0, 0.0]))
    assert out.data.tolist() == [0.0, 0.0]


def test_fd_rejects_nondeterministic_function():
    calls = iter(range(100))
    with pytest.raises(OracleInvalidError):
        finite_difference_check(lambda p: ad.tsum(p["x"]) + float(next(calls)), {"x": Tensor([1.0])})


def test_rel_error_floor():
    assert rel_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-3)


# -- properties ------------------------------------------------------------------

@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_gradient_sums_over_broadcast_axis(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    g = gradient(ad.tsum(ta + tb), [ta, tb])
    assert np.all(g[0].data == 1.0)
    assert np.all(g[1].data == 3.0)


@given(arrays(np.float64, (5,), elements=finite), st.floats(0.01, 2.0))
def test_softplus_bounds(x, tau):
    y = ad.softplus(Tensor(x), tau).data
    assert np.all(y >= np.maximum(x, 0.0) - 1e-12)
    assert np.all(y <= np.maximum(x, 0.0) + tau * np.log(2.0) + 1e-12)


@given(arrays(np.float64, (4, 3), elements=finite).filter(lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)))
def test_l2_normalize_unit_rows(a):
    np.testing.assert_allclose(np.linalg.norm(ad.l2_normalize(Tensor(a)).data, axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_distance_matrix_matches_numpy(a, b):
    expect = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    np.testing.assert_allclose(ad.distance_matrix(Tensor(a), Tensor(b)).data, expect, atol=1e-12)


@given(arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_normalizes(x):
    p = np.exp(ad.log_softmax(Tensor(x)).data)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)


@given(arrays(np.float64, (3,), elements=st.floats(-3, 3)), st.floats(0.0, 2.0))
def test_linearity_of_gradient(x, c):
    t = Tensor(x, requires_grad=True)
    w = np.array([1.0, -2.0, 0.5])
    g1 = gradient(ad.tsum(t * w), [t])[0].data
    g2 = gradient(ad.tsum(t * w) * c, [t])[0].data
    np.testing.assert_allclose(g2, c * g1)


def test_gradient_does_not_warn_for_reachable_params():
    x = Tensor([1.0], requires_grad=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        gradient(ad.tsum(x * x), {"x": x})
