import io

import numpy as np
import pytest

from metabdc.core import (
    Graph,
    GraphError,
    SeededRng,
    SerializationError,
    ShapeMismatch,
    backward,
    concat,
    config_digest,
    dumps_array,
    forward_eval,
    grad_check,
    l2_normalize,
    load_checkpoint,
    loads_array,
    save_checkpoint,
    softmax,
)


def scalar_fn(build):
    """Wrap a graph builder into the (loss, grads) callable grad_check wants."""

    def fn(point):
        g = Graph()
        refs = {name: g.parameter(name, np.asarray(val, dtype=np.float64)) for name, val in point.items()}
        loss = build(g, refs)
        forward_eval(g)
        return float(loss.value), backward(g, loss)

    return fn


def test_forward_times_two():
    g = Graph()
    x = g.input("x", (None,))
    g.mark_output("y", x * 2.0)
    out = forward_eval(g, {"x": np.array([1.0, 2.0, 3.0])})
    assert np.array_equal(out["y"], [2.0, 4.0, 6.0])


def test_forward_softmax_of_zeros():
    g = Graph()
    z = g.parameter("z", np.zeros(2))
    g.mark_output("p", softmax(z, axis=0))
    out = forward_eval(g)
    np.testing.assert_allclose(out["p"], [0.5, 0.5], atol=1e-15)


def test_backward_square_at_three():
    g = Graph()
    p = g.parameter("p", np.array([3.0]))
    loss = (p * p).sum()
    forward_eval(g)
    grads = backward(g, loss)
    np.testing.assert_allclose(grads["p"], [6.0], atol=1e-12)


def test_backward_cross_entropy_matches_finite_difference():
    rng = SeededRng(11).generator()
    labels = np.array([0, 2, 1])
    onehot = np.eye(3)[labels]

    def build(g, refs):
        logits = refs["logits"]
        logp = logits - logits.logsumexp(axis=1, keepdims=True)
        return -(logp * g.constant(onehot)).sum() / 3.0

    point = {"logits": rng.normal(size=(3, 3))}
    assert grad_check(scalar_fn(build), point, eps=1e-6) <= 1e-5


def test_grad_check_rejects_bad_eps():
    fn = scalar_fn(lambda g, refs: (refs["x"] * refs["x"]).sum())
    with pytest.raises(ValueError):
        grad_check(fn, {"x": np.ones(2)}, eps=0.0)
    with pytest.raises(ValueError):
        grad_check(fn, {"x": np.ones(2)}, eps=-1e-6)


def test_grad_check_sum_of_squares_tight():
    fn = scalar_fn(lambda g, refs: (refs["x"] ** 2).sum())
    rng = SeededRng(5).generator()
    err = grad_check(fn, {"x": rng.normal(size=(4, 3))}, eps=1e-6)
    assert err <= 1e-6


def test_backward_requires_scalar():
    g = Graph()
    p = g.parameter("p", np.ones(3))
    vec = p * 2.0
    forward_eval(g)
    with pytest.raises(GraphError):
        backward(g, vec)


def test_backward_requires_forward_first():
    g = Graph()
    p = g.parameter("p", np.ones(3))
    loss = (p * p).sum()
    with pytest.raises(GraphError):
        backward(g, loss)


def test_shape_mismatch_names_node_and_shapes():
    g = Graph()
    x = g.input("x", (2, 3))
    g.mark_output("y", x * 1.0)
    with pytest.raises(ShapeMismatch) as exc:
        forward_eval(g, {"x": np.ones((4, 3))})
    assert exc.value.expected == (2, 3)
    assert exc.value.actual == (4, 3)
    assert "node" in str(exc.value)


def test_matmul_inner_dim_mismatch():
    g = Graph()
    a = g.parameter("a", np.ones((2, 3)))
    b = g.parameter("b", np.ones((4, 2)))
    _ = a @ b
    with pytest.raises(ShapeMismatch):
        forward_eval(g)


def test_missing_and_unknown_inputs_error():
    g = Graph()
    g.input("x", (None,))
    with pytest.raises(GraphError):
        forward_eval(g, {})
    with pytest.raises(GraphError):
        forward_eval(g, {"x": np.ones(1), "bogus": np.ones(1)})


def test_gradient_accumulation_is_linear():
    # backward of (L1 + L2) == backward of L1 plus backward of L2
    rng = SeededRng(23).generator()
    w0 = rng.normal(size=(4, 4))
    x0 = rng.normal(size=(5, 4))

    def grads_of(which):
        g = Graph()
        w = g.parameter("w", w0.copy())
        x = g.constant(x0)
        l1 = ((x @ w).relu() ** 2).sum()
        l2 = (x @ w).logsumexp(axis=1).sum()
        loss = {"l1": l1, "l2": l2, "both": l1 + l2}[which]
        forward_eval(g)
        return backward(g, loss)["w"]

    combined = grads_of("both")
    separate = grads_of("l1") + grads_of("l2")
    assert np.abs(combined - separate).max() <= 1e-12


def test_forward_backward_bit_identical_across_runs():
    def run():
        rng = SeededRng(99, 3).generator()
        g = Graph()
        x = g.parameter("x", rng.normal(size=(3, 2, 8, 8)))
        w = g.parameter("w", rng.normal(size=(4, 2, 3, 3)))
        b = g.parameter("b", rng.normal(size=(4,)))
        y = x.conv2d(w, b, stride=2, pad=1)
        loss = (y * y).sum()
        forward_eval(g)
        grads = backward(g, loss)
        return loss.value.copy(), {k: v.copy() for k, v in grads.items()}

    la, ga = run()
    lb, gb = run()
    assert np.array_equal(la, lb)
    for k in ga:
        assert np.array_equal(ga[k], gb[k])


def test_conv2d_matches_explicit_loop():
    rng = SeededRng(41).generator()
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    stride, pad = 2, 1

    g = Graph()
    y = g.parameter("x", x).conv2d(g.parameter("w", w), g.parameter("b", b), stride, pad)
    g.mark_output("y", y)
    got = forward_eval(g)["y"]

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (7 + 2 * pad - 3) // stride + 1
    ref = np.zeros((2, 4, ho, ho))
    for bi in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(ho):
                    patch = xp[bi, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                    ref[bi, o, i, j] = (patch * w[o]).sum() + b[o]
    assert np.abs(got - ref).max() <= 1e-12


def test_sqrt_guard_clamps_and_zeroes_gradient_below_eps():
    g = Graph()
    x = g.parameter("x", np.array([0.0, 1e-13, 4.0]))
    y = x.sqrt_guard()
    loss = y.sum()
    forward_eval(g)
    np.testing.assert_allclose(y.value, [1e-6, 1e-6, 2.0], atol=1e-12)
    grads = backward(g, loss)
    np.testing.assert_allclose(grads["x"], [0.0, 0.0, 0.25], atol=1e-12)


def test_logsumexp_stable_for_large_inputs():
    g = Graph()
    x = g.parameter("x", np.array([[1000.0, 1000.0]]))
    g.mark_output("y", x.logsumexp(axis=1))
    out = forward_eval(g)["y"]
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1000.0 + np.log(2.0)], atol=1e-9)


def test_l2_normalize_unit_norm():
    g = Graph()
    x = g.parameter("x", np.array([[3.0, 4.0], [0.1, 0.0]]))
    g.mark_output("z", l2_normalize(x, axis=1))
    z = forward_eval(g)["z"]
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), [1.0, 1.0], atol=1e-9)


def test_gather_and_concat_roundtrip_gradients():
    def build(g, refs):
        x = refs["x"]
        top = x.gather(np.array([0, 2]))
        bot = x.gather(np.array([1, 1]))
        return ((concat([top, bot], axis=0)) ** 2).sum()

    rng = SeededRng(8).generator()
    assert grad_check(scalar_fn(build), {"x": rng.normal(size=(3, 4))}, eps=1e-6) <= 1e-6


def test_every_primitive_op_gradchecks():
    rng = SeededRng(77).generator()

    cases = {
        "add": lambda g, r: (r["a"] + r["b"]).sum(),
        "sub": lambda g, r: (r["a"] - r["b"]).sum(),
        "mul": lambda g, r: (r["a"] * r["b"]).sum(),
        "div": lambda g, r: (r["a"] / (r["b"] * r["b"] + 2.0)).sum(),
        "neg": lambda g, r: (-r["a"]).sum(),
        "pow": lambda g, r: (r["a"] ** 3).sum(),
        "exp": lambda g, r: r["a"].exp().sum(),
        "log": lambda g, r: (r["a"] * r["a"] + 1.0).log().sum(),
        "relu": lambda g, r: r["a"].relu().sum(),
        "sigmoid": lambda g, r: r["a"].sigmoid().sum(),
        "sqrt_guard": lambda g, r: (r["a"] * r["a"]).sqrt_guard().sum(),
        "matmul": lambda g, r: (r["a"] @ r["b"]).sum(),
        "sum_axis": lambda g, r: (r["a"].sum(axis=1) ** 2).sum(),
        "mean": lambda g, r: (r["a"].mean(axis=0) ** 2).sum(),
        "logsumexp": lambda g, r: r["a"].logsumexp(axis=1).sum(),
        "reshape": lambda g, r: (r["a"].reshape((16,)) ** 2).sum(),
        "transpose": lambda g, r: ((r["a"].transpose((1, 0)) @ r["a"]) ** 2).sum(),
        "swap_last2": lambda g, r: (r["a"].swap_last2() @ r["a"]).sum(),
        "gather": lambda g, r: (r["a"].gather(np.array([1, 1, 0])) ** 2).sum(),
    }
    for name, build in cases.items():
        point = {"a": rng.normal(size=(4, 4)) * 0.7, "b": rng.normal(size=(4, 4)) * 0.7}
        err = grad_check(scalar_fn(build), point, eps=1e-6)
        assert err <= 1e-5, f"{name}: {err}"


def test_array_roundtrip_both_dtypes():
    rng = SeededRng(2).generator()
    for dtype in (np.float32, np.float64):
        arr = rng.normal(size=(3, 1, 5)).astype(dtype)
        back = loads_array(dumps_array(arr))
        assert back.dtype == dtype
        assert np.array_equal(arr, back)
    scalar = np.array(4.25)
    assert loads_array(dumps_array(scalar)).shape == ()


def test_array_header_layout():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    blob = dumps_array(arr)
    assert blob[:4] == b"MBDC"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert blob[6] == 1  # float64 tag
    assert blob[7] == 2  # rank
    assert int.from_bytes(blob[8:16], "little") == 2
    assert int.from_bytes(blob[16:24], "little") == 3


def test_array_bad_magic_and_truncation():
    arr = np.ones((2, 2))
    blob = dumps_array(arr)
    with pytest.raises(SerializationError):
        loads_array(b"XXXX" + blob[4:])
    with pytest.raises(SerializationError):
        loads_array(blob[:-8])
    with pytest.raises(SerializationError):
        loads_array(blob[:4] + b"\x09\x00" + blob[6:])  # unsupported version


def test_checkpoint_roundtrip_and_digest_mismatch(tmp_path):
    rng = SeededRng(6).generator()
    params = {"conv1_w": rng.normal(size=(4, 1, 3, 3)).astype(np.float32), "proj_b": np.zeros(8, np.float32)}
    digest = config_digest({"stages": [[4, 3, 2]]})
    path = str(tmp_path / "ck.mbcp")
    save_checkpoint(path, params, digest)
    loaded, got_digest = load_checkpoint(path, expected_digest=digest)
    assert got_digest == digest
    for k in params:
        assert np.array_equal(params[k], loaded[k])
    with pytest.raises(SerializationError):
        load_checkpoint(path, expected_digest="0" * 64)


def test_seeded_rng_repeatable_and_streams_independent():
    a1 = SeededRng(123, 0).generator().normal(size=10)
    a2 = SeededRng(123, 0).generator().normal(size=10)
    b = SeededRng(123, 1).generator().normal(size=10)
    c = SeededRng(124, 0).generator().normal(size=10)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


def test_seeded_rng_children_deterministic_and_distinct():
    root = SeededRng(55)
    kids = [root.child(i) for i in range(50)]
    assert len({k.stream for k in kids}) == 50
    assert root.child(7) == root.child(7)
    assert root.child(7).child(3) != root.child(3).child(7)


def test_seeded_rng_rejects_out_of_range():
    with pytest.raises(ValueError):
        SeededRng(-1)
    with pytest.raises(ValueError):
        SeededRng(0, 1 << 64)
