"""Expression engine: forward values, reverse-mode gradients, self checks."""

import numpy as np
import pytest

from cdsd import autodiff as ad


def test_square_forward():
    x = ad.parameter("x", ())
    assert ad.evaluate(ad.square(x), {"x": 3.0}) == 9.0


def test_sigmoid_at_zero():
    x = ad.parameter("x", ())
    assert ad.evaluate(ad.sigmoid(x), {"x": 0.0}) == 0.5


def test_matmul_of_ones():
    a = ad.parameter("a", (2, 3))
    b = ad.parameter("b", (3, 2))
    out = ad.evaluate(a @ b, {"a": np.ones((2, 3)), "b": np.ones((3, 2))})
    assert np.array_equal(out, np.full((2, 2), 3.0))


def test_gradient_of_square():
    x = ad.parameter("x", ())
    grads = ad.gradient(ad.square(x), {"x": 3.0}, ["x"])
    assert grads["x"] == 6.0


def test_gradient_of_sigmoid_at_zero():
    x = ad.parameter("x", ())
    grads = ad.gradient(ad.sigmoid(x), {"x": 0.0}, ["x"])
    assert grads["x"] == 0.25


def test_leakyrelu_network_matches_finite_differences():
    rng = np.random.default_rng(42)
    w = ad.parameter("w", (4, 3))
    x = ad.parameter("x", (3,  1))
    y = ad.sum_(ad.leakyrelu(w @ x))
    bindings = {
        "w": rng.standard_normal((4, 3)),
        "x": rng.standard_normal((3, 1)) + 2.0,  # keep preactivations off the kink
    }
    assert ad.finite_difference_check(y, bindings, ["w", "x"]) < 1e-5


def test_finite_difference_on_square_is_tight():
    x = ad.parameter("x", (3,))
    y = ad.sum_(ad.square(x))
    err = ad.finite_difference_check(y, {"x": np.array([1.0, -2.0, 0.5])}, ["x"])
    assert err < 1e-8


@pytest.mark.parametrize("trial", range(8))
def test_all_ops_against_finite_differences(trial):
    """One composite touching every differentiable operation."""
    rng = np.random.default_rng(100 + trial)
    a = ad.parameter("a", (3, 4))
    b = ad.parameter("b", (4, 2))
    c = ad.parameter("c", (2,))
    t = ad.parameter("t", (5, 3))

    prod = a @ b  # (3, 2)
    act = ad.leakyrelu(prod)
    mixed = ad.mul(ad.sigmoid(prod), ad.exp(ad.mul(c, ad.constant(0.2))))
    gathered = ad.embed_lookup(t, np.array([0, 4, 2]))  # (3, 3)
    piece = ad.slice_(gathered, (slice(0, 2), slice(1, 3)))  # (2, 2)
    stacked = ad.concat([act, piece], axis=0)  # (5, 2)
    spread = ad.broadcast_to(ad.reshape(c, (1, 2)), (5, 2))
    logs = ad.log(ad.exp(ad.mul(stacked, ad.constant(0.3))))
    flipped = ad.transpose(stacked - spread)
    # stop_gradient stays out of this composite: it breaks the analytic/FD
    # correspondence by design and has its own dedicated test
    y = (
        ad.sum_(ad.square(mixed))
        + ad.sum_(ad.mean_(logs, axis=0))
        + ad.sum_(ad.square(flipped))
        + ad.mean_(ad.sum_(piece, axis=1))
    )
    bindings = {
        "a": rng.standard_normal((3, 4)) + 0.7,
        "b": rng.standard_normal((4, 2)) + 0.7,
        "c": rng.uniform(0.5, 1.5, 2),
        "t": rng.standard_normal((5, 3)),
    }
    # keep leaky-relu preactivations away from the kink
    pre = bindings["a"] @ bindings["b"]
    if np.any(np.abs(pre) < 1e-3):
        bindings["a"] = bindings["a"] + 0.05
    assert ad.finite_difference_check(y, bindings, ["a", "b", "c", "t"]) < 1e-5


def test_batched_matmul_gradients():
    rng = np.random.default_rng(0)
    x = ad.parameter("x", (3, 2, 4))
    w = ad.parameter("w", (3, 4, 5))
    shared = ad.parameter("s", (5, 2))
    y = ad.sum_(ad.square((x @ w) @ shared))
    bindings = {
        "x": rng.standard_normal((3, 2, 4)),
        "w": rng.standard_normal((3, 4, 5)),
        "s": rng.standard_normal((5, 2)),
    }
    assert ad.finite_difference_check(y, bindings, ["x", "w", "s"]) < 1e-5


def test_stop_gradient_forward_identity_and_zero_backward():
    rng = np.random.default_rng(1)
    x = ad.parameter("x", (4,))
    xv = rng.standard_normal(4)
    plain = ad.evaluate(ad.sum_(ad.square(x)), {"x": xv})
    stopped_expr = ad.sum_(ad.square(ad.stop_gradient(x)))
    assert ad.evaluate(stopped_expr, {"x": xv}) == plain
    grads = ad.gradient(stopped_expr, {"x": xv}, ["x"])
    assert np.array_equal(grads["x"], np.zeros(4))


def test_straight_through_composition_forward_is_exact():
    # hard + (soft - stop_gradient(soft)) must equal hard bit for bit
    g = ad.parameter("g", (3,))
    hard = ad.parameter("h", (3,))
    soft = ad.sigmoid(g)
    st = hard + (soft - ad.stop_gradient(soft))
    hv = np.array([0.0, 1.0, 1.0])
    out = ad.evaluate(st, {"g": np.array([0.3, -2.0, 11.0]), "h": hv})
    assert np.array_equal(out, hv)
    grads = ad.gradient(ad.sum_(st), {"g": np.array([0.3, -2.0, 11.0]), "h": hv}, ["g"])
    assert np.all(grads["g"] > 0)  # sigmoid slope flows through


def test_evaluate_is_deterministic():
    rng = np.random.default_rng(3)
    a = ad.parameter("a", (6, 6))
    y = ad.sum_(ad.exp(ad.mul(a @ a, ad.constant(0.01))))
    bindings = {"a": rng.standard_normal((6, 6))}
    first = ad.evaluate(y, bindings)
    second = ad.evaluate(y, bindings)
    assert float(first) == float(second)


def test_unbound_parameter_error():
    x = ad.parameter("x", (2,))
    with pytest.raises(ad.UnboundParameterError):
        ad.evaluate(ad.sum_(x), {})


def test_bound_shape_mismatch_error():
    x = ad.parameter("x", (2, 2))
    with pytest.raises(ad.ShapeMismatchError):
        ad.evaluate(ad.sum_(x), {"x": np.ones(3)})


def test_build_time_shape_mismatch():
    a = ad.parameter("a", (2, 3))
    b = ad.parameter("b", (2, 3))
    with pytest.raises(ad.ShapeMismatchError):
        ad.matmul(a, b)


def test_gradient_requires_scalar_root():
    x = ad.parameter("x", (3,))
    with pytest.raises(ad.ShapeMismatchError):
        ad.gradient(ad.square(x), {"x": np.ones(3)}, ["x"])


def test_non_finite_reports_node_path():
    x = ad.parameter("x", (2,))
    y = ad.sum_(ad.log(x))
    with pytest.raises(ad.NonFiniteError) as excinfo:
        ad.evaluate(y, {"x": np.array([1.0, -1.0])})
    assert "log" in str(excinfo.value)


def test_injected_gradient_bug_is_caught(monkeypatch):
    """Negative control: corrupt one backward rule, the check must fail."""

    def bad_square(node, g, vals):
        x = vals[id(node.children[0])]
        return (3.0 * x * g,)  # wrong factor

    monkeypatch.setitem(ad._BACKWARD, "square", bad_square)
    x = ad.parameter("x", ())
    err = ad.finite_difference_check(ad.square(x), {"x": 1.5}, ["x"])
    assert err > 1e-2


def test_leakyrelu_kink_uses_negative_side_slope():
    x = ad.parameter("x", ())
    grads = ad.gradient(ad.leakyrelu(x), {"x": 0.0}, ["x"])
    assert grads["x"] == ad.LEAKY_SLOPE


def test_gradient_of_unused_parameter_is_zero():
    x = ad.parameter("x", ())
    grads = ad.gradient(ad.square(x), {"x": 1.0, "y": np.ones((2, 2))}, ["y"])
    assert np.array_equal(grads["y"], np.zeros((2, 2)))
