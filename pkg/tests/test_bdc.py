import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metabdc.bdc import (
    BdcMatrix,
    Prototype,
    bdc_matrix,
    bdc_matrix_graph,
    class_prototypes,
    episode_classify,
    episode_scores_graph,
)
from metabdc.core import Graph, SeededRng, backward, forward_eval, grad_check
from metabdc.encoder import FeatureMap


def bdc_oracle(x: np.ndarray) -> np.ndarray:
    """Explicit-loop reference: guarded channel distances, then double-centering."""
    d, m = x.shape
    hat = np.zeros((d, d))
    for k in range(d):
        for l in range(d):
            s = sum((x[k, j] - x[l, j]) ** 2 for j in range(m))
            hat[k, l] = math.sqrt(max(s, 1e-12))
    out = np.zeros((d, d))
    rm = [hat[k, :].sum() / d for k in range(d)]
    cm = [hat[:, l].sum() / d for l in range(d)]
    gm = hat.sum() / (d * d)
    for k in range(d):
        for l in range(d):
            out[k, l] = hat[k, l] - rm[k] - cm[l] + gm
    return out


def test_hand_worked_two_channel_example():
    fm = FeatureMap(np.array([[0.0, 0.0], [3.0, 4.0]]))
    got = bdc_matrix(fm).values
    np.testing.assert_allclose(got, [[-2.5, 2.5], [2.5, -2.5]], atol=1e-5)


def test_matches_loop_oracle_on_random_maps():
    rng = SeededRng(17).generator()
    for _ in range(20):
        d = int(rng.integers(2, 9))
        m = int(rng.integers(2, 11))
        x = rng.normal(size=(d, m)) * rng.uniform(0.1, 3.0)
        got = bdc_matrix(FeatureMap(x)).values
        assert np.abs(got - bdc_oracle(x)).max() <= 1e-10


def test_symmetry_row_sums_translation_invariance():
    rng = SeededRng(29).generator()
    x = rng.normal(size=(6, 9))
    a = bdc_matrix(FeatureMap(x)).values
    assert np.abs(a - a.T).max() <= 1e-9
    assert np.abs(a.sum(axis=1)).max() <= 1e-8
    shifted = bdc_matrix(FeatureMap(x + 4.2)).values
    assert np.abs(a - shifted).max() <= 1e-9


def test_identical_channels_give_zero_matrix():
    row = np.linspace(-1, 1, 7)
    x = np.tile(row, (5, 1))
    a = bdc_matrix(FeatureMap(x)).values
    assert np.abs(a).max() <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_channel_permutation_conjugates_the_matrix(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    a = bdc_matrix(FeatureMap(x)).values
    b = bdc_matrix(FeatureMap(x[perm])).values
    assert np.abs(b - a[np.ix_(perm, perm)]).max() <= 1e-9


def test_graph_variant_matches_numpy_path():
    rng = SeededRng(5).generator()
    batch = rng.normal(size=(4, 6, 8))
    g = Graph()
    x = g.parameter("x", batch)
    g.mark_output("a", bdc_matrix_graph(g, x, d=6))
    out = forward_eval(g)["a"]
    for i in range(4):
        ref = bdc_matrix(FeatureMap(batch[i])).values
        assert np.abs(out[i] - ref).max() <= 1e-9


def test_scalar_of_bdc_gradchecks_including_small_distances():
    rng = SeededRng(61).generator()
    base = rng.normal(size=(4, 6))
    # second channel sits close to the first: small but non-degenerate distances
    base[1] = base[0] + 1e-3 * rng.normal(size=6)
    weights = rng.normal(size=(4, 4))

    def fn(point):
        g = Graph()
        x = g.parameter("x", point["x"].reshape(1, 4, 6))
        a = bdc_matrix_graph(g, x, d=4)
        loss = (a.reshape((4, 4)) * g.constant(weights)).sum()
        forward_eval(g)
        grads = backward(g, loss)
        return float(loss.value), {"x": grads["x"].reshape(4, 6)}

    assert grad_check(fn, {"x": base}, eps=1e-7) <= 1e-4


def test_prototypes_are_classwise_means():
    mats = [BdcMatrix(np.full((2, 2), v)) for v in [1.0, 3.0, 10.0, 20.0]]
    protos = class_prototypes(mats, [0, 0, 1, 1])
    assert protos[0].class_id == 0
    np.testing.assert_allclose(protos[0].values, np.full((2, 2), 2.0))
    np.testing.assert_allclose(protos[1].values, np.full((2, 2), 15.0))
    with pytest.raises(ValueError):
        class_prototypes(mats, [0, 0, 1])


def test_episode_classify_prefers_nearer_prototype():
    q = [BdcMatrix(np.eye(3))]
    # class 0 prototype equals the query, class 1 is far away
    protos = [Prototype(0, np.eye(3)), Prototype(1, np.eye(3) * 5.0)]
    out = episode_classify(q, protos, metric="neg_sq_distance", temperature=0.5)
    assert out.scores.shape == (1, 2)
    assert out.scores[0, 0] > out.scores[0, 1]
    assert out.probs.argmax(axis=1)[0] == 0
    np.testing.assert_allclose(out.probs.sum(axis=1), [1.0], atol=1e-12)


def test_episode_classify_inner_product_and_validation():
    q = [BdcMatrix(np.eye(2))]
    protos = [Prototype(0, np.eye(2)), Prototype(1, -np.eye(2))]
    out = episode_classify(q, protos, metric="inner_product")
    assert out.scores[0, 0] > out.scores[0, 1]
    with pytest.raises(ValueError):
        episode_classify(q, protos, metric="cosine")
    with pytest.raises(ValueError):
        episode_classify(q, protos, temperature=0.0)
    with pytest.raises(ValueError):
        episode_classify([], protos)


def test_episode_scores_graph_matches_numpy():
    rng = SeededRng(44).generator()
    n, k, qn, d = 3, 2, 4, 5
    support = rng.normal(size=(n * k, d, d))
    queries = rng.normal(size=(qn, d, d))

    g = Graph()
    s = g.parameter("s", support)
    q = g.parameter("q", queries)
    g.mark_output("scores", episode_scores_graph(g, s, q, n, k, d))
    got = forward_eval(g)["scores"]

    protos = [Prototype(c, support[c * k : (c + 1) * k].mean(axis=0)) for c in range(n)]
    ref = episode_classify([BdcMatrix(queries[i]) for i in range(qn)], protos).scores
    assert np.abs(got - ref).max() <= 1e-9
