import numpy as np
import pytest
from hypothesis import given, strategies as st

from fora.exceptions import ConfigError
from fora.fisher import (
    LayerScore,
    SelectionSet,
    fisher_from_grads,
    jaccard,
    layer_gradient_norms,
    rank_layers,
    score_layers,
    select_topk,
    squared_norms,
)
from fora.model import Batch, base_layer_gradients


def scores_of(values):
    return [LayerScore(i, float(v)) for i, v in enumerate(values)]


@pytest.fixture
def calib(tiny_config, rng):
    v, t = tiny_config.vocab, tiny_config.seq_len
    return [Batch(rng.integers(0, v, (3, t)), rng.integers(0, v, (3, t))) for _ in range(4)]


def test_one_parameter_analytic_score():
    # loss = 1/2 (Wx - y)^2 with W = 1, x = 2, y = 0: grad = (Wx - y) x = 4, F = 16
    w, x, y = 1.0, 2.0, 0.0
    grad = (w * x - y) * x
    assert fisher_from_grads([[[np.array([[grad]])]]])[0].score == 16.0


def test_fisher_from_grads_is_a_mean():
    g1 = [{"q": np.array([[1.0, 2.0]])}, {"q": np.array([[0.0]])}]
    g2 = [{"q": np.array([[3.0, 0.0]])}, {"q": np.array([[2.0]])}]
    s = fisher_from_grads([g1, g2])
    assert [x.score for x in s] == [(5 + 9) / 2, 2.0]


def test_fisher_from_grads_empty():
    with pytest.raises(ConfigError):
        fisher_from_grads([])


def test_score_matches_sum_of_squared_layer_grads(tiny_base, calib):
    expected = np.mean([squared_norms(base_layer_gradients(tiny_base, b)[1]) for b in calib], axis=0)
    got = [s.score for s in score_layers(tiny_base, calib)]
    np.testing.assert_allclose(got, expected, rtol=1e-13)


def test_duplicated_batch_same_score(tiny_base, calib):
    one = score_layers(tiny_base, calib[:1], 1)
    two = score_layers(tiny_base, [calib[0], calib[0]], 2)
    for a, b in zip(one, two):
        assert a.score == pytest.approx(b.score, rel=1e-15)


def test_scores_nonnegative_finite(tiny_base, calib):
    for s in score_layers(tiny_base, calib, 3):
        assert s.score >= 0 and np.isfinite(s.score)


def test_uses_exactly_n_batches(tiny_base, calib):
    a = score_layers(tiny_base, calib, 2)
    b = score_layers(tiny_base, calib[:2])
    assert [s.score for s in a] == [s.score for s in b]


def test_true_fisher_variant_seeded(tiny_base, calib):
    a = score_layers(tiny_base, calib, variant="true_fisher", seed=3)
    b = score_layers(tiny_base, calib, variant="true_fisher", seed=3)
    emp = score_layers(tiny_base, calib)
    assert [s.score for s in a] == [s.score for s in b]
    assert [s.score for s in a] != [s.score for s in emp]


def test_score_errors(tiny_base, calib):
    with pytest.raises(ConfigError):
        score_layers(tiny_base, [])
    with pytest.raises(ConfigError):
        score_layers(tiny_base, calib, 5)
    with pytest.raises(ConfigError):
        score_layers(tiny_base, calib, variant="kfac")


def test_loss_scaling_scales_scores_by_c_squared(tiny_base, calib):
    # scaling the loss by c scales each layer gradient by c
    c = 3.0
    per_batch = [base_layer_gradients(tiny_base, b)[1] for b in calib]
    plain = fisher_from_grads(per_batch)
    scaled = fisher_from_grads([[{m: c * g for m, g in layer.items()} for layer in grads] for grads in per_batch])
    for p, s in zip(plain, scaled):
        assert s.score == pytest.approx(c * c * p.score, rel=1e-13)
    assert rank_layers(plain) == rank_layers(scaled)


def test_layer_gradient_norms_shape(tiny_base, calib):
    assert layer_gradient_norms(tiny_base, calib[0]).shape == (tiny_base.config.n_layers,)


# select_topk

def test_topk_example():
    assert select_topk(scores_of([0.5, 3.2, 1.1, 2.7]), 2).layers == (1, 3)


def test_topk_all():
    assert select_topk(scores_of([0.5, 3.2, 1.1, 2.7]), 4).layers == (0, 1, 2, 3)


def test_topk_ties_go_low():
    assert select_topk(scores_of([1, 1, 1, 1]), 2).layers == (0, 1)


def test_topk_out_of_range():
    with pytest.raises(ConfigError):
        select_topk(scores_of([1, 2]), 0)
    with pytest.raises(ConfigError):
        select_topk(scores_of([1, 2]), 3)


def test_selection_is_immutable_and_provenanced():
    sel = select_topk(scores_of([1, 2, 3]), 2, n_batches=32, seed=4, variant="empirical")
    assert (sel.k, sel.n_batches, sel.seed, sel.variant) == (2, 32, 4, "empirical")
    with pytest.raises(Exception):
        sel.layers = (0,)


def test_selection_set_size_invariant():
    with pytest.raises(ConfigError):
        SelectionSet((1, 1), 2)


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=12), st.data())
def test_topk_invariant_under_monotone_transform(values, data):
    # integer-valued scores stay distinct under each transform in floating point
    values = [float(v) for v in values]
    k = data.draw(st.integers(1, len(values)))
    base = select_topk(scores_of(values), k).layers
    for f in (lambda x: 2 * x + 1, np.sqrt, np.log1p, lambda x: x**3):
        assert select_topk(scores_of([f(v) for v in values]), k).layers == base


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=10), st.data())
def test_topk_returns_k_largest(values, data):
    k = data.draw(st.integers(1, len(values)))
    sel = select_topk(scores_of(values), k)
    chosen = [values[i] for i in sel.layers]
    rest = [values[i] for i in range(len(values)) if i not in sel.layers]
    assert len(sel.layers) == k
    assert not rest or min(chosen) >= max(rest)


def test_rank_layers_consistent_with_topk():
    s = scores_of([0.5, 3.2, 1.1, 2.7])
    assert rank_layers(s) == {1: 1, 3: 2, 2: 3, 0: 4}


def test_jaccard():
    assert jaccard({1, 2, 3, 4}, {1, 2, 3, 4}) == 1.0
    assert jaccard({1, 2}, {3, 4}) == 0.0
    assert jaccard({1, 2, 3, 4}, {1, 2, 3, 5}) == pytest.approx(0.6)
    assert jaccard(set(), set()) == 1.0
