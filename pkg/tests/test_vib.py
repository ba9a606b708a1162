import math

import numpy as np
import pytest

from ibunlearn import data as D
from ibunlearn import vib
from ibunlearn.numerics import NonFiniteError, ParamSet, ShapeError, finite_difference_check, seeded_rng


def _mapped(params, fn):
    return ParamSet({k: fn(v) for k, v in params.items()})


def _code(mean, log_var):
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    log_var = np.atleast_2d(np.asarray(log_var, dtype=float))
    return vib.GaussianCode(mean, log_var)


@pytest.fixture(scope="module")
def blobs():
    rng = seeded_rng(11)
    ds = D.synth_blobs(rng, 4, 200, 16, 0.05)
    return D.train_test_split(ds, 0.2, rng)


def test_encode_zero_model_is_unit_gaussian():
    model = vib.build_model(6, 3, 2, 1e-3)
    code = vib.encode(model, np.random.default_rng(0).uniform(size=(5, 6)))
    assert np.all(code.mean == 0.0) and np.all(code.log_var == 0.0)


def test_encode_row_independent_of_batch():
    model = vib.build_model(6, 3, 2, 1e-3, seeded_rng(0))
    row = np.random.default_rng(1).uniform(size=(1, 6))
    one = vib.encode(model, row)
    three = vib.encode(model, np.repeat(row, 3, axis=0))
    assert np.array_equal(np.repeat(one.mean, 3, axis=0), three.mean)
    assert np.array_equal(np.repeat(one.log_var, 3, axis=0), three.log_var)


def test_encode_clamps_log_var():
    model = vib.build_model(4, 2, 3, 1e-3, seeded_rng(0))
    big = _mapped(model.params, lambda v: 50.0 * v)
    code = vib.encode(model.with_params(big), np.random.default_rng(2).uniform(size=(64, 4)))
    assert np.all(np.isfinite(code.mean))
    assert np.abs(code.log_var).max() <= 10.0
    assert np.abs(code.raw_log_var).max() > 10.0  # the clamp was exercised


def test_encode_shape_error():
    model = vib.build_model(4, 2, 3, 1e-3)
    with pytest.raises(ShapeError):
        vib.encode(model, np.zeros((2, 5)))


def test_model_invariants():
    with pytest.raises(ValueError):
        vib.build_model(4, 2, 3, -1.0)


def test_sample_code_tight_at_min_log_var():
    code = _code(np.zeros((1000, 4)), np.full((1000, 4), -10.0))
    z, _ = vib.sample_code(code, seeded_rng(0))
    assert np.mean(np.abs(z) < 0.05) > 0.99


def test_sample_code_reproducible():
    code = _code(np.ones((3, 2)), np.zeros((3, 2)))
    a, _ = vib.sample_code(code, seeded_rng(4))
    b, _ = vib.sample_code(code, seeded_rng(4))
    assert np.array_equal(a, b)


def test_sample_code_monte_carlo_mean():
    code = _code(np.ones((10000, 1)), np.zeros((10000, 1)))
    z, _ = vib.sample_code(code, seeded_rng(5))
    assert 0.97 <= z.mean() <= 1.03


def test_kl_identity_and_closed_form():
    assert vib.kl_to_standard_normal(_code([0.0], [0.0])) == 0.0
    assert vib.kl_to_standard_normal(_code([1.0], [0.0])) == pytest.approx(0.5)


def test_kl_nonnegative_and_zero_only_at_prior():
    rng = np.random.default_rng(3)
    for _ in range(200):
        mu, lv = rng.normal(size=(1, 3)), rng.uniform(-3, 3, size=(1, 3))
        assert vib.kl_to_standard_normal(_code(mu, lv)) > 0.0


def test_kl_matches_monte_carlo_estimate():
    # E_q[log q(z) - log p(z)] with z ~ q, 2e5 samples per code
    rng = np.random.default_rng(9)
    for _ in range(5):
        mu, lv = rng.normal(size=3), rng.uniform(-2, 2, size=3)
        std = np.exp(0.5 * lv)
        eps = rng.standard_normal((200_000, 3))
        z = mu + std * eps
        log_q = -0.5 * np.sum(eps**2 + lv + math.log(2 * math.pi), axis=1)
        log_p = -0.5 * np.sum(z**2 + math.log(2 * math.pi), axis=1)
        mc = float(np.mean(log_q - log_p))
        exact = vib.kl_to_standard_normal(_code(mu, lv))
        assert abs(mc - exact) <= 0.02 * exact


def test_ib_loss_beta_zero_is_cross_entropy():
    model = vib.build_model(5, 3, 2, 0.0, seeded_rng(0))
    x = np.random.default_rng(0).uniform(size=(8, 5))
    out = vib.ib_loss(model, x, np.arange(8) % 3, seeded_rng(1))
    assert out.total == out.app_term


def test_ib_loss_zero_model_app_term_is_log_c():
    model = vib.build_model(5, 4, 2, 1e-3)
    out = vib.ib_loss(model, np.zeros((6, 5)), np.arange(6) % 4, seeded_rng(0))
    assert out.app_term == pytest.approx(math.log(4), abs=1e-12)
    assert out.total == pytest.approx(1e-3 * out.com_term + out.app_term)


def test_ib_loss_total_identity():
    model = vib.build_model(5, 3, 2, 0.37, seeded_rng(2))
    out = vib.ib_loss(model, np.random.default_rng(0).uniform(size=(8, 5)), np.arange(8) % 3, seeded_rng(3))
    assert out.total == pytest.approx(0.37 * out.com_term + out.app_term, rel=1e-12)


def test_ib_loss_non_finite_names_term():
    model = vib.build_model(2, 2, 1, 1e-3)
    bad = _mapped(model.params, lambda v: np.full_like(v, np.nan))
    with pytest.raises(NonFiniteError) as err:
        vib.ib_loss(model.with_params(bad), np.zeros((2, 2)), [0, 1], seeded_rng(0))
    assert err.value.term in ("app_term", "com_term", "total")


def test_ib_loss_gradient_check():
    rng = seeded_rng(6)
    model = vib.build_model(5, 3, 2, 0.2, rng, compressor_hidden=(4,), approximator_hidden=(4,))
    model = model.with_params(_mapped(model.params, lambda v: v + 0.1 * rng.standard_normal(v.shape)))
    x, y, eps = rng.uniform(size=(6, 5)), rng.integers(0, 3, 6), rng.standard_normal((6, 2))

    def objective(p):
        out = vib.ib_loss_with_noise(model.with_params(p), x, y, eps)
        return out.total, out.grads

    assert finite_difference_check(objective, model.params).passed


def test_train_zero_epochs_bitwise_unchanged(blobs):
    train, _ = blobs
    model = vib.build_model(16, 4, 8, 1e-3, seeded_rng(0))
    out, trace = vib.train(model, train, 0)
    assert out.params.equal(model.params) and trace.epoch_loss == []


def test_train_deterministic_and_trace_length(blobs):
    train, _ = blobs
    model = vib.build_model(16, 4, 8, 1e-3, seeded_rng(0))
    a, ta = vib.train(model, train, 3, rng=seeded_rng(1))
    b, tb = vib.train(model, train, 3, rng=seeded_rng(1))
    assert a.params.equal(b.params) and len(ta.epoch_loss) == 3 and ta.epoch_loss == tb.epoch_loss


def test_train_divergence_raises(blobs):
    train, _ = blobs
    model = vib.build_model(16, 4, 8, 1e-3, seeded_rng(0))
    with pytest.raises((vib.DivergenceError, NonFiniteError)):
        vib.train(model, train, 5, lr=1e4, rng=seeded_rng(1))


def test_train_negative_epochs(blobs):
    with pytest.raises(ValueError):
        vib.train(vib.build_model(16, 4, 8, 1e-3), blobs[0], -1)


def test_train_wide_inputs_loss_decreases():
    rng = seeded_rng(8)
    ds = D.synth_blobs(rng, 10, 20, 784, 0.05)
    model = vib.build_model(784, 10, 16, 1e-3, seeded_rng(9))
    _, trace = vib.train(model, ds, 3, rng=seeded_rng(10))
    assert all(np.isfinite(trace.epoch_loss))
    assert trace.epoch_loss[0] > trace.epoch_loss[1] > trace.epoch_loss[2]


def test_train_blobs_accuracy(blobs):
    train, test = blobs
    model, _ = vib.train(vib.build_model(16, 4, 8, 1e-3, seeded_rng(0)), train, 30, rng=seeded_rng(1))
    test_acc = vib.accuracy(model, test)
    assert test_acc >= 0.95
    assert vib.accuracy(model, train) >= test_acc - 0.05


def test_predict_mean_code_deterministic_and_zero_model_ties():
    model = vib.build_model(5, 3, 2, 1e-3)
    x = np.random.default_rng(0).uniform(size=(7, 5))
    assert vib.predict(model, x).tolist() == [0] * 7
    trained = vib.build_model(5, 3, 2, 1e-3, seeded_rng(0))
    assert np.array_equal(vib.predict(trained, x), vib.predict(trained, x))


def test_predict_sampled_needs_rng_and_unknown_mode():
    model = vib.build_model(5, 3, 2, 1e-3)
    with pytest.raises(ValueError):
        vib.predict(model, np.zeros((1, 5)), "sampled")
    with pytest.raises(ValueError):
        vib.predict(model, np.zeros((1, 5)), "median")


def test_kl_non_increasing_in_beta(blobs):
    train, _ = blobs
    kls = []
    for beta in (1e-4, 1e-2, 1.0):
        model, _ = vib.train(vib.build_model(16, 4, 8, beta, seeded_rng(0)), train, 30, rng=seeded_rng(1))
        kls.append(vib.kl_to_standard_normal(vib.encode(model, train.inputs)))
    assert kls[1] <= 1.05 * kls[0] and kls[2] <= 1.05 * kls[1], kls
