import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from fsdemc import girsanov, models
from fsdemc.girsanov import WeightError
from fsdemc.integrate import SimConfig, simulate
from fsdemc.paths import GridError

W = "reference-with-weights"
OU = models.build_model("ou")


def weighted_batch(Z, n=2000, horizon=1.0, seed=0, model=OU, **kw):
    kw.setdefault("record_stride", 10)
    return simulate(model, Z, None, SimConfig(0.01, horizon, n, seed, W, **kw))


class TestLogWeight:
    def test_zero_drift(self):
        b = weighted_batch(models.zero_drift(1), n=50)
        for t in (0.0, 0.5, 1.0):
            assert np.all(girsanov.log_weight(b, t) == 0.0)

    @given(st.floats(-2, 2), st.integers(0, 2**31))
    def test_constant_drift_closed_form(self, z, seed):
        b = weighted_batch(models.constant_drift([z]), n=20, seed=seed, record_stride=1)
        W_t = np.cumsum(b.dW[:, :, 0], axis=1)
        for k in (1, 37, 100):
            t = k * 0.01
            want = z * W_t[:, k - 1] - z * z * t / 2
            np.testing.assert_allclose(girsanov.log_weight(b, t), want, rtol=1e-12, atol=1e-12)

    def test_double_entry(self):
        b = weighted_batch(models.linear_drift([[1.0]]), n=3, record_stride=1)
        tr = b.trajectory(1)
        ref = oracles.log_weight_loop(tr.z_values, tr.dW, 0.01)
        for k in (0, 10, 100):
            assert girsanov.log_weight(tr, k * 0.01) == pytest.approx(ref[k], abs=1e-12)

    def test_errors(self):
        b = weighted_batch(models.constant_drift([1.0]), n=5)
        with pytest.raises(GridError):
            girsanov.log_weight(b, 0.505)
        r = simulate(OU, None, None, SimConfig(0.01, 1.0, 5, 0))
        with pytest.raises(WeightError):
            girsanov.log_weight(r, 0.5)
        with pytest.raises(WeightError):
            girsanov.log_weight(r.trajectory(0), 0.5)


class TestWeightedExpectation:
    def test_zero_drift_is_plain_mean(self):
        f = lambda s: s[:, -1, 0] ** 2
        a = simulate(OU, models.zero_drift(1), None, SimConfig(0.01, 1.0, 500, 4, W))
        b = simulate(OU, None, None, SimConfig(0.01, 1.0, 500, 4))
        est = girsanov.weighted_expectation(a, f, 1.0)
        assert est.value == np.mean(f(b.segments_at(1.0)))
        assert est.ess == pytest.approx(500) and est.n_used == 500

    def test_unit_function_is_martingale(self):
        b = weighted_batch(models.truncate_drift(models.linear_drift([[1.0]]), 1.5), n=20_000)
        est = girsanov.weighted_expectation(b, lambda s: np.ones(len(s)), 1.0)
        assert abs(est.value - 1) <= 3 * est.std_error

    def test_shrunk_ou_second_moment(self):
        # Z = -0.5 x from x = 0: total drift -(1 + sqrt(2)/2) x
        n = 40_000
        Z = models.linear_drift([[-0.5]])
        kw = dict(record_stride=None, store_noise=False)
        a = simulate(OU, Z, np.zeros((n, 1)), SimConfig(0.005, 1.0, n, 1, W, **kw))
        b = simulate(OU, Z, np.zeros((n, 1)), SimConfig(0.005, 1.0, n, 2, "perturbed-direct", **kw))
        f = lambda s: s[:, -1, 0] ** 2
        ea, eb = girsanov.weighted_expectation(a, f, 1.0), girsanov.weighted_expectation(b, f, 1.0)
        assert abs(ea.value - eb.value) <= 3 * math.hypot(ea.std_error, eb.std_error)
        exact = oracles.perturbed_ou_moments(0.0, 1.0, 1 + math.sqrt(2) / 2)["x2"]
        assert abs(eb.value - exact) <= 4 * eb.std_error + 0.01

    def test_estimate_invariants(self):
        b = weighted_batch(models.constant_drift([1.0]), n=300)
        for t in (0.3, 1.0):
            e = girsanov.weighted_expectation(b, lambda s: s[:, -1, 0], t)
            assert e.std_error >= 0 and 1 <= e.ess <= e.n_used
            assert not e.self_normalized and e.clip is None

    def test_self_normalized_and_clip(self):
        b = weighted_batch(models.constant_drift([1.0]), n=3000)
        one = lambda s: np.ones(len(s))
        sn = girsanov.weighted_expectation(b, one, 1.0, self_normalized=True)
        assert sn.value == pytest.approx(1.0, abs=1e-12) and sn.self_normalized
        cl = girsanov.weighted_expectation(b, one, 1.0, clip=1.0)
        assert cl.value < 1.0 and cl.clip == 1.0

    def test_negative_time(self):
        with pytest.raises(GridError):
            girsanov.weighted_expectation(weighted_batch(None, n=5), lambda s: s[:, -1, 0], -0.1)

    def test_flagged_excluded(self):
        b = weighted_batch(models.constant_drift([1.0]), n=100)
        b.flagged[:10] = True
        e = girsanov.weighted_expectation(b, lambda s: s[:, -1, 0], 1.0)
        assert e.n_used == 90 and e.n_excluded == 10
        b.flagged[:] = True
        with pytest.raises(WeightError):
            girsanov.weighted_expectation(b, lambda s: s[:, -1, 0], 1.0)


def test_weights_positive_without_overflow():
    for lw in (np.array([700.0, 699.0, -700.0]), np.array([-700.0, -699.5])):
        v, se, ess = girsanov.weighted_mean(np.ones(lw.size), lw)
        assert np.isfinite(v) and v > 0 and np.isfinite(se) and 1 <= ess <= lw.size
        assert v == pytest.approx(np.mean(np.exp(lw)), rel=1e-12)


def test_ess_decreases_in_time():
    esss = np.zeros(3)
    for rep in range(5):
        b = weighted_batch(models.constant_drift([0.8]), n=2000, horizon=2.0, seed=rep)
        esss += [girsanov.weighted_mean(np.ones(b.n), b.log_weight_at(t))[2] for t in (0.5, 1.0, 2.0)]
    assert esss[0] > esss[1] > esss[2]


@pytest.mark.slow
@pytest.mark.parametrize("name,params", [("ou", {"tau": 0.5}), ("hamiltonian", {}), ("galerkin_ou", {"n": 2}),
                                         ("gruschin", {})])
def test_oracle_equivalence_across_zoo(name, params):
    """Weighted reference runs match perturbed-direct runs for a bounded Z."""
    model = models.build_model(name, params)
    B = np.zeros((model.m, model.d))
    B[0, 0] = 1.0
    Z = models.truncate_drift(models.linear_drift(B, theta=-model.tau, tau=model.tau), 0.5)
    fam = (lambda s: s[:, -1, 0], lambda s: s[:, -1, 0] ** 2, lambda s: np.cos(s[:, -1, -1]))
    ests = []
    for mode, seed in ((W, 1), ("perturbed-direct", 2)):
        b = simulate(model, Z, None, SimConfig(1e-3, 1.0, 100_000, seed, mode, record_stride=None,
                                               store_noise=False))
        ests.append([girsanov.weighted_expectation(b, f, 1.0) for f in fam])
    for a, b in zip(*ests):
        assert abs(a.value - b.value) <= 3 * math.hypot(a.std_error, b.std_error)


class TestMartingaleCheck:
    def test_zero_drift_exact(self):
        rep = girsanov.martingale_check(weighted_batch(models.zero_drift(1), n=100), [0.5, 1.0])
        assert rep.mean_weight == [1.0, 1.0] and rep.z_score == [0.0, 0.0] and rep.passed

    def test_bounded_drift_passes(self):
        Z = models.truncate_drift(models.linear_drift([[1.0]]), 1.0)
        rep = girsanov.martingale_check(weighted_batch(Z, n=20_000, horizon=2.0, record_stride=50), [0.5, 1, 2])
        assert rep.passed and not any(rep.low_ess)

    def test_tiny_sample_flags_low_ess(self):
        rep = girsanov.martingale_check(weighted_batch(models.linear_drift([[1.0]]), n=10), [0.5, 1.0])
        assert all(rep.low_ess) and rep.passed
        assert all(se > 0 for se in rep.std_error)


class TestIntegrability:
    def test_zero(self):
        d = girsanov.integrability_diagnostic(weighted_batch(models.zero_drift(1), n=20), 1.0)
        assert np.all(d["integrals"] == 0) and d["fraction_exceeding"] == 0

    def test_constant(self):
        d = girsanov.integrability_diagnostic(weighted_batch(models.constant_drift([0.7]), n=20, horizon=2.0), 0.5)
        np.testing.assert_allclose(d["integrals"], 0.49 * 2.0, rtol=1e-12)
        assert d["fraction_exceeding"] == 1.0

    def test_stationary_linear(self):
        b = weighted_batch(models.linear_drift([[1.0]]), n=20_000, record_stride=None, store_noise=False)
        d = girsanov.integrability_diagnostic(b, 10.0)
        assert abs(d["mean"] - 1.0) <= 4 * d["std_error"]
        assert set(d["quantiles"]) == {"0.5", "0.9", "0.99"}
