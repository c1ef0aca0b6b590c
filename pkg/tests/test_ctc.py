from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import exhaustive_topk, label_distribution, path_probability, random_log_lattice
from scope_slr import ctc
from scope_slr.errors import CTCInfeasibleError
from scope_slr.nn import Tensor, grad_check


def uniform(T, n_sym):
    return np.full((T, n_sym), -math.log(n_sym))


def test_two_frame_uniform_single_label():
    # paths (a, -), (-, a), (a, a) out of 9
    loss, _ = ctc.ctc_loss(uniform(2, 3), [1])
    assert loss == pytest.approx(math.log(3), rel=1e-12)


def test_empty_labels_is_all_blank_path(rng):
    lat = random_log_lattice(rng, 4, 3)
    loss, _ = ctc.ctc_loss(lat, [])
    assert loss == pytest.approx(-lat[:, 0].sum(), rel=1e-12)


def test_infeasible_labels_raise():
    with pytest.raises(CTCInfeasibleError):
        ctc.ctc_loss(uniform(2, 3), [1, 1])
    assert ctc.min_frames([1, 1, 2]) == 4


def test_bad_label_id():
    with pytest.raises(ValueError):
        ctc.ctc_loss(uniform(3, 3), [0])
    with pytest.raises(ValueError):
        ctc.ctc_loss(uniform(3, 3), [3])


def test_gradient_matches_finite_differences(rng):
    lat = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    err = grad_check(lambda: ctc.ctc_loss_tensor(lat, [1, 2, 2]), [lat], eps=1e-6)
    assert err <= 1e-5


def test_log_prob_is_negative_loss(rng):
    lat = random_log_lattice(rng, 5, 3)
    assert ctc.label_sequence_probability(lat, [2, 1]) == -ctc.ctc_loss(lat, [2, 1])[0]


def test_partition_over_all_label_sequences(rng):
    lat = random_log_lattice(rng, 3, 3)
    total = math.fsum(math.exp(ctc.label_sequence_probability(lat, seq)) for seq in label_distribution(lat))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_boosting_label_column_raises_probability(rng):
    lat = random_log_lattice(rng, 4, 3)
    before = ctc.label_sequence_probability(lat, [1])
    boosted = lat.copy()
    boosted[:, 1] += 0.5
    boosted -= np.log(np.exp(boosted).sum(axis=1, keepdims=True))
    assert ctc.label_sequence_probability(boosted, [1]) > before


@given(st.integers(1, 4), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_forward_matches_enumeration(T, V, seed):
    rng = np.random.default_rng(seed)
    lat = random_log_lattice(rng, T, V + 1)
    for seq, p in label_distribution(lat).items():
        got = math.exp(ctc.label_sequence_probability(lat, seq))
        assert got == pytest.approx(p, rel=1e-9)


def test_greedy_collapse():
    one_hot = np.log(np.eye(3)[[1, 1, 0, 2]] + 1e-300)
    assert ctc.greedy_decode(one_hot) == [1, 2]
    assert ctc.greedy_decode(np.log(np.eye(3)[[0, 0, 0]] + 1e-300)) == []


def test_beam_saturating_matches_enumeration(rng):
    lat = random_log_lattice(rng, 3, 3)
    nbest = ctc.prefix_beam_search(lat, beam_width=64, k=3)
    oracle = exhaustive_topk(lat, 3)
    assert [h.labels for h in nbest] == [seq for seq, _ in oracle]
    for h, (_, p) in zip(nbest, oracle):
        assert math.exp(h.log_prob) == pytest.approx(p, rel=1e-9)
    assert sum(h.posterior for h in nbest) == pytest.approx(1.0)


def test_beam_beats_greedy_on_blank_dominant_lattice():
    # best path is all blank (0.6^2 = 0.36) but "a" collects 0.4*0.4 + 2*0.4*0.6 = 0.64
    probs = np.array([[0.6, 0.4], [0.6, 0.4]])
    lat = np.log(probs)
    assert ctc.greedy_decode(lat) == []
    best = ctc.prefix_beam_search(lat, beam_width=4, k=1).best
    assert best.labels == (1,)
    assert math.exp(best.log_prob) == pytest.approx(0.64)


def test_blank_dominant_top1_empty():
    lat = np.log(np.array([[0.98, 0.01, 0.01]] * 4))
    assert ctc.prefix_beam_search(lat, 5, 2).best.labels == ()


def test_k1_is_beam_top1(rng):
    lat = random_log_lattice(rng, 6, 4)
    assert ctc.prefix_beam_search(lat, 8, 1).best.labels == ctc.prefix_beam_search(lat, 8, 3).best.labels


@given(st.integers(0, 2**31 - 1))
def test_greedy_never_beats_beam(seed):
    lat = random_log_lattice(np.random.default_rng(seed), 6, 4, sharpness=2.0)
    greedy = ctc.greedy_decode(lat)
    top = ctc.prefix_beam_search(lat, 10, 1).best
    assert ctc.label_sequence_probability(lat, greedy) <= top.log_prob + 1e-12


def test_nbest_json_roundtrip(rng):
    lat = random_log_lattice(rng, 4, 3)
    nbest = ctc.prefix_beam_search(lat, 6, 3)
    vocab = ["<blank>", "A", "B"]
    back = ctc.NBestList.from_json(nbest.to_json(vocab), vocab)
    assert [h.labels for h in back] == [h.labels for h in nbest]


def test_beam_rejects_bad_widths():
    with pytest.raises(ValueError):
        ctc.prefix_beam_search(uniform(3, 3), beam_width=2, k=3)


# MWER

def test_mwer_single_hypothesis_is_error_count(rng):
    lat = random_log_lattice(rng, 5, 4)
    loss, _ = ctc.mwer_loss(lat, [(1, 2)], [1, 3, 3])
    assert loss == 2.0


def test_mwer_equal_risk_zero_gradient(rng):
    lat = random_log_lattice(rng, 5, 4)
    loss, grad = ctc.mwer_loss(lat, [(1,), (2,), (1, 3)], [1, 2])
    assert loss == pytest.approx(1.0)
    assert np.max(np.abs(grad)) <= 1e-12


def test_mwer_two_hypotheses_equal_probability():
    # "a" and "b" each have probability 1/3 on a uniform 2x3 lattice; risks 0 and 1
    lat = uniform(2, 3)
    loss, grad = ctc.mwer_loss(lat, [(1,), (2,)], [1])
    assert loss == pytest.approx(0.5)
    lat2 = random_log_lattice(np.random.default_rng(3), 4, 3)
    loss2, grad2 = ctc.mwer_loss(lat2, [(1, 2), (2, 1)], [1, 2])
    # raising the correct hypothesis' symbols lowers the expected error
    step = lat2 - 1e-3 * grad2
    assert ctc.mwer_loss(step, [(1, 2), (2, 1)], [1, 2])[0] < loss2


def test_mwer_gradient_finite_differences(rng):
    lat = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    hyps = [(1, 2), (1, 3, 2), (2,)]
    err = grad_check(lambda: ctc.mwer_loss_tensor(lat, hyps, [1, 2]), [lat])
    assert err <= 1e-5


def test_mwer_mean_baseline_shifts_loss_not_gradient(rng):
    lat = random_log_lattice(rng, 5, 4)
    hyps = [(1, 2), (3,), (2, 2)]
    l0, g0 = ctc.mwer_loss(lat, hyps, [1, 2])
    l1, g1 = ctc.mwer_loss(lat, hyps, [1, 2], baseline="mean")
    np.testing.assert_allclose(g0, g1, atol=1e-12)
    assert l1 != l0


def test_path_probability_oracle_sanity():
    assert path_probability(uniform(2, 3), [1]) == pytest.approx(1 / 3)
