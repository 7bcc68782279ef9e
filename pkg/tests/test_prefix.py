import itertools
import math

import numpy as np
import pytest

from jointctc.adcore import log_softmax_np
from jointctc.ctc import (
    InfeasibleTargetError,
    ctc_brute_force,
    ctc_log_likelihood,
    is_log_zero,
    min_frames,
)
from jointctc.prefix import VocabError, prefix_eos_score, prefix_extend, prefix_init


def random_lattice(rng, frames, vocab):
    return log_softmax_np(rng.normal(size=(frames, vocab + 1)))


def all_blank_lattice(frames, vocab):
    scores = np.zeros((frames, vocab + 1))
    scores[:, vocab] = 60.0
    return log_softmax_np(scores)


def test_init_all_blank_mass():
    state = prefix_init(all_blank_lattice(4, 2))
    assert np.allclose(state.log_b, 0.0, atol=1e-12)
    assert all(is_log_zero(v) for v in state.log_nb)


def test_init_uniform_blank_products():
    lat = np.full((2, 2), math.log(0.5))
    state = prefix_init(lat)
    assert state.log_b == pytest.approx([math.log(0.5), math.log(0.25)], abs=1e-12)


def test_extend_single_frame():
    lat = random_lattice(np.random.default_rng(0), 1, 3)
    score, state = prefix_extend(prefix_init(lat), 2)
    assert score == pytest.approx(lat[0, 2], abs=1e-12)
    assert state.length == 1 and state.last == 2


def test_extend_repeat_without_room_is_log_zero():
    lat = random_lattice(np.random.default_rng(1), 2, 2)
    _, state = prefix_extend(prefix_init(lat), 0)
    score, _ = prefix_extend(state, 0)
    assert is_log_zero(score)


def test_extend_rejects_out_of_vocab_token():
    lat = random_lattice(np.random.default_rng(2), 3, 2)
    state = prefix_init(lat)
    with pytest.raises(VocabError):
        prefix_extend(state, 2)  # blank index
    with pytest.raises(VocabError):
        prefix_extend(state, -1)


def brute_prefix_mass(lat, prefix, vocab):
    """Enumeration oracle: total CTC mass of complete sequences extending
    ``prefix``, summed through the brute-force path enumerator."""
    frames = lat.shape[0]
    total = 0.0
    for length in range(len(prefix), frames + 1):
        for tail in itertools.product(range(vocab), repeat=length - len(prefix)):
            full = list(prefix) + list(tail)
            if min_frames(full) > frames:
                continue
            ll = ctc_brute_force(lat, full)
            if not is_log_zero(ll):
                total += math.exp(ll)
    return total


def test_extend_score_matches_enumeration_oracle():
    rng = np.random.default_rng(3)
    for _ in range(6):
        frames = int(rng.integers(2, 6))
        vocab = int(rng.integers(1, 4))
        lat = random_lattice(rng, frames, vocab)
        state = prefix_init(lat)
        prefix = []
        for _ in range(2):
            token = int(rng.integers(0, vocab))
            score, state = prefix_extend(state, token)
            prefix.append(token)
            expected = brute_prefix_mass(lat, prefix, vocab)
            if expected == 0.0:
                assert is_log_zero(score)
            else:
                assert math.exp(score) == pytest.approx(expected, abs=1e-9)


def test_eos_empty_prefix_on_all_blank_lattice():
    state = prefix_init(all_blank_lattice(3, 2))
    assert prefix_eos_score(state) == pytest.approx(0.0, abs=1e-9)


def test_eos_matches_ctc_likelihood():
    rng = np.random.default_rng(4)
    lat = random_lattice(rng, 5, 3)
    state = prefix_init(lat)
    for token in (0, 2, 1):
        _, state = prefix_extend(state, token)
    assert prefix_eos_score(state) == pytest.approx(
        ctc_log_likelihood(lat, [0, 2, 1]), abs=1e-9
    )


def test_prefix_longer_than_frames_is_log_zero():
    lat = random_lattice(np.random.default_rng(5), 2, 2)
    state = prefix_init(lat)
    for token in (0, 1, 0):
        score, state = prefix_extend(state, token)
    assert is_log_zero(score)
    assert is_log_zero(prefix_eos_score(state))


def _walk_prefixes(lat, vocab, max_len):
    """Yield (prefix, score, state) for every prefix reachable within max_len."""
    root = prefix_init(lat)
    stack = [((), 0.0, root)]
    while stack:
        prefix, score, state = stack.pop()
        yield prefix, score, state
        if len(prefix) < max_len:
            for c in range(vocab):
                s, st = prefix_extend(state, c)
                stack.append((prefix + (c,), s, st))


def test_consistency_with_ctc_for_all_short_prefixes():
    rng = np.random.default_rng(6)
    for _ in range(4):
        frames = int(rng.integers(1, 7))
        vocab = int(rng.integers(1, 4))
        lat = random_lattice(rng, frames, vocab)
        for prefix, _, state in _walk_prefixes(lat, vocab, 4):
            eos = prefix_eos_score(state)
            try:
                expected = ctc_log_likelihood(lat, list(prefix))
                assert abs(eos - expected) <= 1e-9
            except InfeasibleTargetError:
                assert is_log_zero(eos)


def test_monotonicity_extension_never_gains_mass():
    rng = np.random.default_rng(7)
    lat = random_lattice(rng, 6, 3)
    for prefix, score, state in _walk_prefixes(lat, 3, 3):
        for c in range(3):
            child, _ = prefix_extend(state, c)
            assert child <= score + 1e-12


def test_exhaustiveness_children_plus_eos_cover_prefix_mass():
    rng = np.random.default_rng(8)
    for _ in range(4):
        frames = int(rng.integers(1, 7))
        vocab = int(rng.integers(1, 4))
        lat = random_lattice(rng, frames, vocab)
        for prefix, score, state in _walk_prefixes(lat, vocab, 3):
            if is_log_zero(score):
                continue
            total = math.exp(prefix_eos_score(state)) if not is_log_zero(
                prefix_eos_score(state)
            ) else 0.0
            for c in range(vocab):
                child, _ = prefix_extend(state, c)
                if not is_log_zero(child):
                    total += math.exp(child)
            assert total == pytest.approx(math.exp(score), abs=1e-9)


def test_states_are_persistent_values():
    lat = random_lattice(np.random.default_rng(9), 4, 2)
    state = prefix_init(lat)
    s1, child1 = prefix_extend(state, 0)
    s2, child2 = prefix_extend(state, 1)
    # branching from one parent leaves the parent and siblings untouched
    s1_again, _ = prefix_extend(state, 0)
    assert s1 == s1_again
    assert child1.last == 0 and child2.last == 1
