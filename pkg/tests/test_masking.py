import math

import numpy as np
import pytest

from ibunlearn import masking as M
from ibunlearn.numerics import ShapeError, seeded_rng


@pytest.mark.parametrize(
    "sr,strategy,eps,delta",
    [
        (0.2, M.WITH, 0.199, 0.182),
        (0.4, M.WITH, 0.398, 0.331),
        (0.6, M.WITH, 0.597, 0.453),
        (0.2, M.WITHOUT, 0.221, 0.200),
    ],
)
def test_account_reference_values(sr, strategy, eps, delta):
    acc = M.account(M.MaskSpec(784, sr, strategy))
    assert abs(acc.epsilon - eps) <= 0.003 and abs(acc.delta - delta) <= 0.003


def test_account_without_replacement_closed_form():
    acc = M.account(M.MaskSpec(784, 0.2, M.WITHOUT))
    assert acc.k == 157
    assert acc.epsilon == pytest.approx(math.log(785 / 628), rel=1e-15)


@pytest.mark.parametrize("strategy", M.STRATEGIES)
def test_account_k_zero_is_free(strategy):
    assert M.epsilon_delta(784, 0, strategy) == (0.0, 0.0)


def test_k_exceeds_n_without_replacement():
    with pytest.raises(ValueError):
        M.epsilon_delta(5, 6, M.WITHOUT)


@pytest.mark.parametrize(
    "kwargs", [dict(sr=0.0), dict(sr=1.5), dict(strategy="bernoulli"), dict(mask_value=2.0), dict(sr=0.01)]
)
def test_spec_validation(kwargs):
    args = dict(n=10, sr=0.5, strategy=M.WITH) | kwargs
    with pytest.raises(ValueError):
        M.MaskSpec(**args)


def test_k_rounds_half_up():
    assert M.MaskSpec(10, 0.25).k == 3
    assert M.MaskSpec(10, 0.35).k == 4  # 3.5 even though 0.35 * 10 is stored as 3.4999...
    assert M.MaskSpec(784, 0.6).k == 470


@pytest.mark.parametrize("n", [10, 100, 784])
@pytest.mark.parametrize("strategy", M.STRATEGIES)
def test_account_monotone_in_k(n, strategy):
    vals = np.array([M.epsilon_delta(n, k, strategy) for k in range(1, n + 1)])
    assert np.all(np.diff(vals, axis=0) >= 0)
    assert np.all(vals[:, 1] <= 1.0) and np.all(vals >= 0)


@pytest.mark.parametrize("n", [10, 100, 784])
def test_with_replacement_dominates(n):
    for k in range(1, n + 1):
        e_w, d_w = M.epsilon_delta(n, k, M.WITH)
        e_wo, d_wo = M.epsilon_delta(n, k, M.WITHOUT)
        assert e_w <= e_wo + 1e-15 and d_w <= d_wo + 1e-15


def test_account_depends_only_on_spec():
    spec = M.MaskSpec(50, 0.4, M.WITH)
    first = M.account(spec)
    M.masked_inputs(np.ones((3, 50)), spec, seeded_rng(0))
    assert M.account(spec) == first == M.account(M.MaskSpec(50, 0.4, M.WITH, mask_value=0.5))


def test_full_rate_without_replacement_is_identity():
    x = np.random.default_rng(0).uniform(size=12)
    out = M.mask(x, M.MaskSpec(12, 1.0, M.WITHOUT), seeded_rng(1))
    assert np.array_equal(out.values, x)
    assert out.sampled_indices.tolist() == list(range(12))


def test_without_replacement_reveals_exactly_k():
    spec = M.MaskSpec(20, 0.35, M.WITHOUT)
    out = M.mask(np.ones(20), spec, seeded_rng(2))
    assert np.count_nonzero(out.values == 1.0) == spec.k == 7


@pytest.mark.parametrize("strategy", M.STRATEGIES)
def test_masked_sample_invariants(strategy):
    x = np.random.default_rng(3).uniform(0.1, 0.9, size=30)
    spec = M.MaskSpec(30, 0.5, strategy, mask_value=0.0)
    out = M.mask(x, spec, seeded_rng(4))
    idx = out.sampled_indices
    assert np.all(np.diff(idx) > 0)
    assert np.array_equal(out.values[idx], x[idx])
    hidden = np.setdiff1d(np.arange(30), idx)
    assert np.all(out.values[hidden] == 0.0)


def test_mask_shape_error():
    with pytest.raises(ShapeError):
        M.mask(np.zeros(5), M.MaskSpec(6, 0.5), seeded_rng(0))


def test_distinct_count_monte_carlo():
    spec = M.MaskSpec(10, 1.0, M.WITH)
    rng = seeded_rng(5)
    counts = np.array([M.draw_indices(spec, rng).size for _ in range(100_000)])
    expected = 10 * (1 - 0.9**10)
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert 6.41 <= counts.mean() <= 6.61
    assert abs(counts.mean() - expected) <= 3 * se


@pytest.mark.parametrize("strategy", M.STRATEGIES)
def test_inclusion_frequencies(strategy):
    n, rows = 16, 1000
    spec = M.MaskSpec(n, 0.6, strategy)
    samples = M.mask_batch(np.ones((rows, n)), spec, seeded_rng(6))
    hits = np.zeros(n)
    for s in samples:
        hits[s.sampled_indices] += 1
    p = 1 - ((n - 1) / n) ** spec.k if strategy == M.WITH else spec.k / n
    se = math.sqrt(p * (1 - p) / rows)
    assert np.all(np.abs(hits / rows - p) <= 3 * se + 1e-12), (hits / rows, p)


def test_single_row_batch_matches_mask():
    spec = M.MaskSpec(8, 0.5)
    x = np.random.default_rng(7).uniform(size=8)
    one = M.mask_batch(x[None], spec, seeded_rng(8))[0]
    ref = M.mask(x, spec, seeded_rng(8))
    assert np.array_equal(one.values, ref.values)


def test_stream_progresses_between_rows():
    spec = M.MaskSpec(40, 0.3, M.WITHOUT)
    out = M.mask_batch(np.ones((2, 40)), spec, seeded_rng(9))
    assert not np.array_equal(out[0].sampled_indices, out[1].sampled_indices)


def test_mask_batch_rejects_1d():
    with pytest.raises(ShapeError):
        M.mask_batch(np.zeros(4), M.MaskSpec(4, 0.5), seeded_rng(0))
