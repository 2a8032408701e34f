import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import greedy_ref, random_prob_matrix
from tommer.decoding import greedy_flat_decode, threshold_decode
from tommer.probe import SpanProbMatrix
from tommer.spanspace import Span


def overlapping(a: Span, b: Span) -> bool:
    return not (a.end < b.start or b.end < a.start)


def test_threshold_keeps_exactly_the_confident_spans(rng):
    for _ in range(50):
        pm = random_prob_matrix(rng)
        tau = float(rng.uniform(0.05, 0.95))
        got = threshold_decode(pm, tau)
        expected = {s for s, p in zip(pm.spans, pm.probs) if p >= tau}
        assert got == expected


def test_threshold_allows_nesting():
    pm = SpanProbMatrix(spans=[Span(1, 1), Span(1, 2), Span(2, 2)],
                        probs=np.array([0.9, 0.8, 0.7]), window=2, n_tokens=2)
    assert threshold_decode(pm, 0.5) == {Span(1, 1), Span(1, 2), Span(2, 2)}


def test_threshold_is_antitone_in_tau(rng):
    for _ in range(20):
        pm = random_prob_matrix(rng)
        taus = np.linspace(0.05, 0.95, 10)
        previous = None
        for tau in taus:
            current = threshold_decode(pm, float(tau))
            if previous is not None:
                assert current <= previous
            previous = current


def test_greedy_matches_reference_simulation(rng):
    for _ in range(300):
        pm = random_prob_matrix(rng)
        tau = float(rng.uniform(0.05, 0.95))
        assert greedy_flat_decode(pm, tau) == greedy_ref(pm, tau)


def test_greedy_output_is_overlap_free(rng):
    for _ in range(100):
        pm = random_prob_matrix(rng)
        picked = sorted(greedy_flat_decode(pm, 0.2))
        for i in range(len(picked)):
            for j in range(i + 1, len(picked)):
                assert not overlapping(picked[i], picked[j])


def test_greedy_tie_break_prefers_early_then_short():
    # equal probabilities: the earlier start wins; same start: shorter wins
    pm = SpanProbMatrix(
        spans=[Span(2, 3), Span(1, 2), Span(1, 1)],
        probs=np.array([0.8, 0.8, 0.8]),
        window=3, n_tokens=3,
    )
    assert greedy_flat_decode(pm, 0.5) == {Span(1, 1), Span(2, 3)}

    pm2 = SpanProbMatrix(
        spans=[Span(1, 3), Span(1, 1)],
        probs=np.array([0.8, 0.8]),
        window=3, n_tokens=3,
    )
    assert greedy_flat_decode(pm2, 0.5) == {Span(1, 1)}


def test_greedy_prefers_probability_over_position():
    pm = SpanProbMatrix(
        spans=[Span(1, 2), Span(2, 3)],
        probs=np.array([0.6, 0.9]),
        window=2, n_tokens=3,
    )
    assert greedy_flat_decode(pm, 0.5) == {Span(2, 3)}


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.5, 1.5])
def test_tau_domain_is_open_interval(rng, tau):
    pm = random_prob_matrix(rng)
    with pytest.raises(ValueError, match="tau"):
        threshold_decode(pm, tau)
    with pytest.raises(ValueError, match="tau"):
        greedy_flat_decode(pm, tau)


@settings(max_examples=60)
@given(st.integers(1, 10), st.integers(1, 6),
       st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_greedy_subset_of_threshold(n, window, tau, seed):
    pm = random_prob_matrix(np.random.default_rng(seed), n=n, window=window)
    assert greedy_flat_decode(pm, tau) <= threshold_decode(pm, tau)
