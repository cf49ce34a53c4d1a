import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _invariants import check_masking_case
from espark import masking
from espark.masking import ActionDistribution, NumericError, apply_mask, masked_log_softmax, sample, sample_batch
from espark.types import ActionMask


def test_renormalisation_examples():
    d = ActionDistribution.from_probs([0.5, 0.5])
    assert apply_mask(d, ActionMask((True, False))).probs.tolist() == [1.0, 0.0]
    d = ActionDistribution.from_probs([0.2, 0.3, 0.5])
    assert np.allclose(apply_mask(d, [False, True, True]).probs, [0, 0.375, 0.625])


def test_all_masked_falls_back_and_counts():
    d = ActionDistribution.from_probs([0.2, 0.8])
    before = masking.FALLBACKS.count
    assert apply_mask(d, [False, False]) is d
    assert masking.FALLBACKS.count == before + 1


def test_mask_length_mismatch():
    with pytest.raises(ValueError):
        apply_mask(ActionDistribution.from_probs([1.0]), [True, False])


def test_distribution_invariants():
    with pytest.raises(ValueError):
        ActionDistribution.from_probs([0.5, 0.6])
    with pytest.raises(NumericError):
        ActionDistribution.from_probs([np.nan, 1.0])


def test_sample_degenerate_and_masked():
    gen = np.random.default_rng(0)
    d = ActionDistribution.from_probs([1.0, 0.0, 0.0])
    assert all(sample(d, gen) == (0, 0.0) for _ in range(100))
    m = apply_mask(ActionDistribution.from_probs([0.25] * 4), [True, False, True, False])
    seen = {sample(m, gen)[0] for _ in range(2000)}
    assert seen == {0, 2}


def test_sample_log_prob_is_masked():
    m = apply_mask(ActionDistribution.from_probs([0.2, 0.3, 0.5]), [False, True, True])
    i, lp = sample(m, np.random.default_rng(1))
    assert lp == pytest.approx(np.log(m.probs[i]))


def test_uniform_sampling_frequencies():
    gen = np.random.default_rng(3)
    n = 100_000
    counts = np.bincount(sample_batch(np.log(np.full((n, 4), 0.25)), gen), minlength=4)
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert (np.abs(counts - n / 4) < 3 * sigma).all()


def test_masked_log_softmax_matches_apply_mask():
    gen = np.random.default_rng(5)
    logits = gen.normal(size=(50, 6))
    allow = gen.random((50, 6)) < 0.5
    logp, fallback = masked_log_softmax(logits, allow)
    for row in range(50):
        ref = apply_mask(ActionDistribution.from_logits(logits[row]), allow[row])
        assert np.allclose(np.exp(logp[row]), ref.probs, atol=1e-12)
        assert fallback[row] == (not allow[row].any())


def test_sample_batch_never_picks_masked():
    gen = np.random.default_rng(2)
    logits = gen.normal(size=(1000, 5))
    allow = np.zeros((1000, 5), dtype=bool)
    allow[:, 3] = True
    logp, _ = masked_log_softmax(logits, allow)
    assert (sample_batch(logp, gen) == 3).all()


@settings(max_examples=300)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10).filter(lambda w: sum(w) > 1e-6),
       st.data())
def test_mask_properties(weights, data):
    p = np.asarray(weights)
    p = p / p.sum()
    allow = np.asarray(data.draw(st.lists(st.booleans(), min_size=len(p), max_size=len(p))))
    check_masking_case(p, allow)
