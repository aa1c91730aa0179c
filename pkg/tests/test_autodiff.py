import numpy as np
import pytest

from fora.autodiff import OP_KINDS, Tape, backward
from fora.exceptions import ShapeError

from oracles import central_difference

REL_TOL = 1e-5
N_ENTRIES = 6


def rel_err(a, b):
    return abs(a - b) / (abs(a) + 1e-8)


def gradcheck(build, inputs, rng, n_entries=N_ENTRIES):
    """Compare backward() with central differences on sampled entries of each input.

    ``build(tape, leaves)`` returns a scalar Var. Returns the worst relative error.
    """
    def loss_value():
        tape = Tape()
        leaves = [tape.leaf(x) for x in inputs]
        return float(build(tape, leaves).value.item())

    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    grads = backward(tape, build(tape, leaves))
    worst = 0.0
    for x, leaf in zip(inputs, leaves):
        g = grads[leaf]
        assert g.shape == x.shape
        flat = rng.choice(x.size, size=min(n_entries, x.size), replace=False)
        for f in flat:
            idx = np.unravel_index(f, x.shape)
            fd = central_difference(loss_value, x, idx)
            worst = max(worst, rel_err(g[idx], fd))
    return worst


def weighted_sum(tape, v, rng_seed=0):
    """Reduce to a scalar through a fixed random weighting so every entry matters."""
    w = np.random.default_rng(rng_seed).standard_normal(v.shape)
    flat_v = tape.reshape(v, (1, int(np.prod(v.shape))))
    return tape.matmul(flat_v, tape.constant(w.reshape(-1, 1)))


def test_op_kind_list_covers_core_ops():
    core = {"matmul", "add", "scale", "relu", "softmax_rows", "layernorm_rows", "embed_lookup", "cross_entropy"}
    assert core <= set(OP_KINDS)


CASES = {
    "matmul": (lambda t, l: weighted_sum(t, t.matmul(l[0], l[1])), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda t, l: weighted_sum(t, t.matmul(l[0], l[1])), [(2, 3, 4), (4, 5)]),
    "add": (lambda t, l: weighted_sum(t, t.add(l[0], l[1])), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda t, l: weighted_sum(t, t.add(l[0], l[1])), [(2, 3, 4), (3, 4)]),
    "scale": (lambda t, l: weighted_sum(t, t.scale(l[0], -1.7)), [(3, 4)]),
    "relu": (lambda t, l: weighted_sum(t, t.relu(l[0])), [(4, 5)]),
    "softmax_rows": (lambda t, l: weighted_sum(t, t.softmax_rows(l[0])), [(3, 6)]),
    "layernorm_rows": (lambda t, l: weighted_sum(t, t.layernorm_rows(l[0])), [(4, 6)]),
    "embed_lookup": (lambda t, l: weighted_sum(t, t.embed_lookup(l[0], [[0, 2, 2], [4, 1, 0]])), [(5, 3)]),
    "cross_entropy": (lambda t, l: t.cross_entropy(l[0], [[1, 0, 3], [2, 2, 4]]), [(2, 3, 5)]),
    "transpose": (lambda t, l: weighted_sum(t, t.transpose(l[0], (1, 0, 2))), [(2, 3, 4)]),
    "reshape": (lambda t, l: weighted_sum(t, t.reshape(l[0], (4, 3))), [(2, 6)]),
    "sum": (lambda t, l: t.sum(l[0]), [(3, 5)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck_each_op(name, rng):
    build, shapes = CASES[name]
    inputs = [rng.standard_normal(s) for s in shapes]
    if name == "relu":
        # keep entries away from the kink so central differences are valid
        inputs[0] = np.where(np.abs(inputs[0]) < 0.05, 0.3, inputs[0])
    assert gradcheck(build, inputs, rng) <= REL_TOL


def test_every_op_kind_has_a_gradcheck_case():
    covered = {name.split("_batched")[0].split("_broadcast")[0] for name in CASES}
    assert set(OP_KINDS) <= covered


def test_add_zero_is_identity(rng):
    tape = Tape()
    x = rng.standard_normal((3, 4))
    out = tape.add(tape.leaf(x), tape.constant(np.zeros((3, 4))))
    np.testing.assert_array_equal(out.value, x)


def test_softmax_constant_row_is_uniform():
    tape = Tape()
    out = tape.softmax_rows(tape.constant(np.full((2, 7), 3.3))).value
    np.testing.assert_allclose(out, 1 / 7, atol=1e-15)
    assert np.all(np.abs(out.sum(axis=-1) - 1) <= 1e-15)


def test_cross_entropy_hand_value():
    tape = Tape()
    logits = np.array([[2.0, 0.0, -1.0]])
    ce = tape.cross_entropy(tape.constant(logits), [0]).value.item()
    p = np.exp(2.0) / (np.exp(2.0) + 1.0 + np.exp(-1.0))
    assert ce == pytest.approx(-np.log(p), abs=1e-15)


def test_backward_linear_map_outer_product():
    tape = Tape()
    w = tape.leaf(np.zeros((3, 2)))
    x = np.array([[1.5], [-2.0]])
    loss = tape.sum(tape.matmul(w, tape.constant(x)))
    np.testing.assert_array_equal(backward(tape, loss)[w], np.ones((3, 1)) @ x.T)


def test_backward_half_squared_error():
    # loss = 1/2 (Wx - y)^2 with W = 1, x = 2, y = 0 -> dL/dW = (Wx - y) x = 4
    tape = Tape()
    w = tape.leaf([[1.0]])
    resid = tape.add(tape.matmul(w, tape.constant([[2.0]])), tape.constant([[0.0]]))
    sq = tape.matmul(resid, resid)
    loss = tape.scale(sq, 0.5)
    np.testing.assert_array_equal(backward(tape, loss)[w], [[4.0]])


def test_backward_non_scalar_rejected():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        backward(tape, tape.relu(x))


def test_shape_error_names_op_and_shapes():
    tape = Tape()
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        tape.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))


def test_embed_lookup_out_of_range():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.embed_lookup(tape.leaf(np.ones((3, 2))), [[3]])


def test_unknown_op_kind():
    with pytest.raises(ValueError):
        Tape().record("conv", ())


def test_tape_is_topologically_ordered(rng):
    tape = Tape()
    a = tape.leaf(rng.standard_normal((2, 3)))
    b = tape.leaf(rng.standard_normal((3, 2)))
    tape.sum(tape.relu(tape.matmul(a, b)))
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.inputs)


def test_vars_from_another_tape_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(ValueError):
        t2.relu(t1.leaf(np.ones((1, 1))))


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    used = tape.leaf(np.ones((2, 2)))
    unused = tape.leaf(np.ones((3, 1)))
    grads = backward(tape, tape.sum(used))
    np.testing.assert_array_equal(grads[unused], np.zeros((3, 1)))


def test_backward_is_linear_in_the_loss(rng):
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((4, 2))

    def grads_of(a, b):
        tape = Tape()
        lx = tape.leaf(x)
        ly = tape.leaf(y)
        l1 = tape.sum(tape.softmax_rows(tape.matmul(lx, ly)))
        l2 = tape.cross_entropy(tape.matmul(lx, ly), [0, 1, 1])
        g = backward(tape, tape.add(tape.scale(l1, a), tape.scale(l2, b)))
        return g[lx], g[ly]

    g1, g2, gc = grads_of(1.0, 0.0), grads_of(0.0, 1.0), grads_of(2.5, -0.75)
    for i in range(2):
        assert np.max(np.abs(gc[i] - (2.5 * g1[i] - 0.75 * g2[i]))) <= 1e-12
