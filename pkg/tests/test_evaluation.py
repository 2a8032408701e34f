import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import kappa_ref, prf_ref
from tommer.evaluation import (
    PRF,
    aggregate,
    cohen_kappa,
    dice,
    dice_matrix,
    match_prf,
)
from tommer.spanspace import Span


def random_span_sets(rng, n_seqs=5):
    out = {}
    for i in range(n_seqs):
        spans = set()
        for _ in range(int(rng.integers(0, 5))):
            s = int(rng.integers(1, 9))
            spans.add(Span(s, s + int(rng.integers(0, 3))))
        out[f"s{i}"] = spans
    return out


def test_match_prf_against_brute_force(rng):
    for _ in range(100):
        gold = random_span_sets(rng)
        pred = {k: (v if rng.random() < 0.3 else random_span_sets(rng, 1)["s0"])
                for k, v in gold.items()}
        got = match_prf(pred, gold)
        p, r, f1, tp, fp, fn = prf_ref(pred, gold)
        assert (got.tp, got.fp, got.fn) == (tp, fp, fn)
        assert got.precision == pytest.approx(p)
        assert got.recall == pytest.approx(r)
        assert got.f1 == pytest.approx(f1)


def test_match_prf_known_case():
    pred = {"a": {Span(1, 2), Span(4, 4)}}
    gold = {"a": {Span(1, 2), Span(6, 7)}}
    prf = match_prf(pred, gold)
    assert (prf.tp, prf.fp, prf.fn) == (1, 1, 1)
    assert prf.f1 == pytest.approx(0.5)


def test_match_prf_zero_conventions():
    prf = match_prf({"a": set()}, {"a": set()})
    assert (prf.precision, prf.recall, prf.f1) == (0.0, 0.0, 0.0)


def test_match_prf_requires_matching_keys():
    with pytest.raises(ValueError, match="differ"):
        match_prf({"a": set()}, {"b": set()})


def test_aggregate_modes():
    r1 = PRF.from_counts(tp=8, fp=2, fn=0)
    r2 = PRF.from_counts(tp=1, fp=9, fn=10)
    pooled = aggregate([r1, r2], "aggregated")
    assert (pooled.tp, pooled.fp, pooled.fn) == (9, 11, 10)
    assert pooled.precision == pytest.approx(9 / 20)
    averaged = aggregate([r1, r2], "averaged")
    assert averaged.precision == pytest.approx((r1.precision + r2.precision) / 2)
    assert averaged.recall == pytest.approx((r1.recall + r2.recall) / 2)
    with pytest.raises(ValueError):
        aggregate([], "aggregated")
    with pytest.raises(ValueError):
        aggregate([r1], "median")


# ---------------------------------------------------------------------------
# Dice


def test_dice_definition():
    assert dice({1, 2, 3}, {2, 3, 4}) == pytest.approx(4 / 6)
    assert dice(set(), set()) == 1.0
    assert dice({1}, set()) == 0.0
    assert dice({1, 2}, {1, 2}) == 1.0


def test_dice_matrix_symmetric_unit_diagonal(rng):
    runs = [(f"run{i}", random_span_sets(np.random.default_rng(i), 4))
            for i in range(4)]
    keys = runs[0][1].keys()
    runs = [(name, {k: preds.get(k, set()) for k in keys}) for name, preds in runs]
    names, mat = dice_matrix(runs)
    assert names == ["run0", "run1", "run2", "run3"]
    assert np.array_equal(mat, mat.T)
    assert np.all(np.diag(mat) == 1.0)
    assert np.all((mat >= 0) & (mat <= 1))


def test_dice_matrix_brute_force_entry(rng):
    a = {"x": {Span(1, 1), Span(2, 3)}, "y": {Span(4, 4)}}
    b = {"x": {Span(2, 3)}, "y": {Span(4, 4), Span(5, 6)}}
    _, mat = dice_matrix([("a", a), ("b", b)])
    pooled_a = {("x", 1, 1), ("x", 2, 3), ("y", 4, 4)}
    pooled_b = {("x", 2, 3), ("y", 4, 4), ("y", 5, 6)}
    assert mat[0, 1] == pytest.approx(
        2 * len(pooled_a & pooled_b) / (len(pooled_a) + len(pooled_b)))


def test_dice_matrix_validation():
    with pytest.raises(ValueError, match="two runs"):
        dice_matrix([("only", {"a": set()})])
    with pytest.raises(ValueError, match="corpus"):
        dice_matrix([("a", {"x": set()}), ("b", {"y": set()})])


# ---------------------------------------------------------------------------
# Kappa


def test_kappa_against_reference(rng):
    for _ in range(100):
        n = int(rng.integers(1, 40))
        a = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
        b = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
        assert cohen_kappa(a, b) == pytest.approx(kappa_ref(list(a), list(b)))


def test_kappa_extremes():
    assert cohen_kappa([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert cohen_kappa([1, 1, 1], [1, 1, 1]) == 1.0  # degenerate marginals
    assert cohen_kappa([1, 1, 0, 0], [0, 0, 1, 1]) == pytest.approx(-1.0)
    assert cohen_kappa([1, 0], [1, 1]) < 1.0


def test_kappa_validation():
    with pytest.raises(ValueError):
        cohen_kappa([1, 0], [1])
    with pytest.raises(ValueError):
        cohen_kappa([], [])


@given(st.lists(st.booleans(), min_size=1, max_size=50))
def test_kappa_self_agreement(labels):
    a = [int(x) for x in labels]
    assert cohen_kappa(a, a) == 1.0
