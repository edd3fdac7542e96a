import os
from collections import Counter
from itertools import permutations

import numpy as np
import pytest

from activeda.baselines import (
    SAMPLERS,
    SamplerParams,
    SelectionInputs,
    aada_scores,
    aada_select,
    badge_select,
    entropy_select,
    gradient_embeddings,
    kcenter_select,
    load_sampler_patches,
    make_selection_inputs,
    margin_select,
    margins,
    random_select,
    run_sampler,
)
from activeda.data import ExternalScores
from activeda.error import InvalidInputError
from activeda.metrics import entropy_rows
from activeda.nn import NetDims, make_net
from activeda.perturb import VatConfig

PATCH = os.path.join(os.path.dirname(__file__), "..", "mock", "sampler_patch.py")
BUILTIN = ("s3", "random", "entropy", "margin", "kcenter", "aada", "badge")


def random_inputs(seed=0, n=15, k=3, n_restarts=2, dim=4):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(k), size=n)
    perturbed = 0.8 * probs[:, None, :] + 0.2 * rng.dirichlet(np.ones(k), size=(n, n_restarts))
    return SelectionInputs(
        ids=rng.permutation(np.arange(100, 100 + n)),
        probs=probs,
        perturbed=perturbed,
        embeddings=rng.normal(size=(n, dim)),
        disc=rng.uniform(0.05, 0.95, size=n),
        labeled_embeddings=rng.normal(size=(3, dim)),
    )


def test_random_whole_pool_and_seeding():
    assert sorted(random_select(6, 6, np.random.default_rng(0)).tolist()) == list(range(6))
    a = random_select(20, 5, np.random.default_rng(3))
    b = random_select(20, 5, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_random_is_uniform():
    rng = np.random.default_rng(0)
    trials = 20000
    counts = Counter(int(random_select(10, 1, rng)[0]) for _ in range(trials))
    for i in range(10):
        assert abs(counts[i] / trials - 0.1) <= 0.01


def test_entropy_picks_near_uniform():
    probs = np.array([[1.0, 0.0, 0.0], [0.34, 0.33, 0.33], [0.0, 1.0, 0.0]])
    assert entropy_select(probs, 1).tolist() == [1]


def test_entropy_matches_sort_oracle():
    probs = np.random.default_rng(1).dirichlet(np.ones(4), size=25)
    h = entropy_rows(probs)
    oracle = sorted(range(25), key=lambda i: (-h[i], i))
    assert entropy_select(probs, 25).tolist() == oracle
    assert entropy_select(probs, 7).tolist() == oracle[:7]


def test_margin_order():
    probs = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.6, 0.3, 0.1]])
    assert margins(probs).tolist() == pytest.approx([1.0, 0.0, 0.3])
    assert margin_select(probs, 3).tolist() == [1, 2, 0]


def test_margin_matches_sort_oracle():
    probs = np.random.default_rng(2).dirichlet(np.ones(3), size=25)
    m = margins(probs)
    assert margin_select(probs, 10).tolist() == sorted(range(25), key=lambda i: (m[i], i))[:10]


def test_entropy_and_margin_agree_for_two_classes():
    p = np.random.default_rng(3).uniform(size=30)
    probs = np.stack([p, 1 - p], axis=1)
    assert entropy_select(probs, 30).tolist() == margin_select(probs, 30).tolist()


def naive_kcenter(emb, budget, seeds):
    centers = [list(s) for s in seeds]
    picks = []
    for _ in range(budget):
        best, best_d = None, -1.0
        for i in range(len(emb)):
            if i in picks:
                continue
            if centers:
                d = min(np.sqrt(sum((a - b) ** 2 for a, b in zip(emb[i], c))) for c in centers)
            else:
                d = np.inf
            if d > best_d:
                best, best_d = i, d
        picks.append(best)
        centers.append(list(emb[best]))
    return picks


def test_kcenter_uncovered_cluster():
    emb = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
    assert kcenter_select(emb, 1, seeds=np.array([[0.0, 0.05]])).tolist() == [3]


def test_kcenter_without_seeds_starts_at_lowest_position():
    emb = np.random.default_rng(4).normal(size=(6, 2))
    assert kcenter_select(emb, 1).tolist() == [0]


def test_kcenter_matches_naive():
    rng = np.random.default_rng(5)
    for _ in range(10):
        emb = rng.normal(size=(12, 3))
        seeds = rng.normal(size=(2, 3))
        assert kcenter_select(emb, 3, seeds).tolist() == naive_kcenter(emb, 3, seeds)
        assert kcenter_select(emb, 3).tolist() == naive_kcenter(emb, 3, [])


def test_aada_unit_importance_is_entropy():
    probs = np.random.default_rng(6).dirichlet(np.ones(3), size=20)
    disc = np.full(20, 0.5)
    assert aada_select(probs, disc, 20).tolist() == entropy_select(probs, 20).tolist()


def test_aada_scores():
    probs = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
    disc = np.array([0.01, 0.2, 0.0])
    scores = aada_scores(probs, disc)
    assert scores[0] == 0.0
    assert scores[1] == pytest.approx(np.log(2) * 0.8 / 0.2)
    assert scores[2] == pytest.approx(np.log(2) * (1 - 1e-6) / 1e-6)
    assert aada_select(probs, disc, 1).tolist() == [2]


def test_gradient_embeddings():
    probs = np.array([[0.7, 0.3], [1.0, 0.0]])
    emb = np.array([[1.0, 2.0], [3.0, 4.0]])
    g = gradient_embeddings(probs, emb)
    assert g.shape == (2, 4)
    assert np.allclose(g[0], [-0.3, -0.6, 0.3, 0.6])
    assert np.all(g[1] == 0)


def kmeanspp_pair_probs(points):
    n = len(points)
    w0 = (points**2).sum(axis=1)
    probs = {}
    for a in range(n):
        d2 = ((points - points[a]) ** 2).sum(axis=1)
        for b in range(n):
            if b != a:
                probs[(a, b)] = w0[a] / w0.sum() * d2[b] / d2.sum()
    return probs


def test_badge_seeding_probabilities():
    points = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, -1.0], [3.0, 1.0]])
    expected = kmeanspp_pair_probs(points)
    rng = np.random.default_rng(7)
    trials = 20000
    counts = Counter(tuple(badge_select(points, 2, rng).tolist()) for _ in range(trials))
    for pair in permutations(range(4), 2):
        assert abs(counts[pair] / trials - expected[pair]) <= 0.02


def test_badge_skips_zero_gradient_embeddings():
    grad_emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    for seed in range(200):
        picks = badge_select(grad_emb, 3, np.random.default_rng(seed))
        assert sorted(picks.tolist()) == [1, 3, 4]


def test_badge_all_zero_draws_uniformly(caplog):
    picks = badge_select(np.zeros((4, 3)), 2, np.random.default_rng(0))
    assert len(set(picks.tolist())) == 2
    assert "drawing uniformly" in caplog.text


def test_badge_deterministic_mode():
    grad_emb = np.array([[1.0, 0.0], [0.0, 3.0], [2.0, 0.0]])
    assert badge_select(grad_emb, 1, deterministic=True).tolist() == [1]
    assert badge_select(grad_emb, 3, deterministic=True).tolist() == [1, 2, 0]


def test_selection_inputs_sorted_by_id():
    inputs = SelectionInputs(
        ids=[5, 2, 9], probs=[[0.1, 0.9], [0.5, 0.5], [0.8, 0.2]], disc=[0.1, 0.2, 0.3]
    )
    assert inputs.ids.tolist() == [2, 5, 9]
    assert inputs.probs[0].tolist() == [0.5, 0.5]
    assert inputs.disc.tolist() == [0.2, 0.1, 0.3]
    with pytest.raises(InvalidInputError):
        SelectionInputs(ids=[1, 1], probs=[[0.5, 0.5], [0.5, 0.5]])


@pytest.mark.parametrize("name", BUILTIN)
def test_samplers_return_distinct_ids(name):
    inputs = random_inputs()
    params = SamplerParams(seed=3)
    result = run_sampler(name, inputs, 5, params)
    assert len(result.ids) == 5 == len(set(result.ids))
    assert set(result.ids) <= set(inputs.ids.tolist())
    assert run_sampler(name, inputs, 5, SamplerParams(seed=3)).ids == result.ids
    assert run_sampler(name, inputs, 0, params).ids == []


def test_run_sampler_errors():
    inputs = random_inputs(n=4)
    with pytest.raises(InvalidInputError):
        run_sampler("nope", inputs, 1)
    with pytest.raises(InvalidInputError):
        run_sampler("random", inputs, 5)
    bare = SelectionInputs(ids=inputs.ids, probs=inputs.probs)
    for name in ("s3", "kcenter", "aada", "badge"):
        with pytest.raises(InvalidInputError):
            run_sampler(name, bare, 2)


def test_make_selection_inputs_from_scores():
    rng = np.random.default_rng(8)
    probs = rng.dirichlet(np.ones(3), size=5)
    scores = ExternalScores(np.array([4, 0, 3, 1, 2]), probs, probs[:, None, :])
    inputs = make_selection_inputs(scores)
    assert inputs.ids.tolist() == [0, 1, 2, 3, 4]
    assert inputs.embeddings is None and inputs.labeled_embeddings is None
    assert np.array_equal(inputs.probs[0], probs[1])


def test_make_selection_inputs_from_net():
    dims = NetDims(2, 3, hidden=4, embed=3, disc_hidden=4)
    net = make_net(dims, seed=0)
    rng = np.random.default_rng(9)
    x, labeled = rng.normal(size=(6, 2)), rng.normal(size=(4, 2))
    ids = np.arange(10, 16)
    inputs = make_selection_inputs(net, x, ids, labeled, VatConfig(n_restarts=2), 5)
    assert inputs.perturbed.shape == (6, 2, 3)
    assert inputs.embeddings.shape == (6, 3)
    assert inputs.labeled_embeddings.shape == (4, 3)
    assert np.all((inputs.disc > 0) & (inputs.disc < 1))


def test_sampler_patch():
    added = load_sampler_patches([PATCH])
    assert "lowest_id" in SAMPLERS
    assert added in (["lowest_id"], [])
    assert load_sampler_patches(PATCH) == []
    result = run_sampler("lowest_id", random_inputs(), 3)
    assert result.ids == [100, 101, 102]
    with pytest.raises(InvalidInputError):
        load_sampler_patches(["/no/such/patch.py"])
