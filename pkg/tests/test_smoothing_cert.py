import logging

import numpy as np
import pytest
import torch
from scipy import special
from scipy.stats import beta, binom, norm
from torch import nn

from robust_mapf.grid_env import EnvConfig
from robust_mapf.policy_net import PolicyOutput
from robust_mapf.smoothing_cert import (
    ABSTAIN,
    CertConfig,
    certified_curve,
    certify,
    clopper_pearson_lower,
    collect_pool,
    normal_quantile,
    radius_pool,
    state_rng,
)

_log = logging.getLogger(__name__)

CONFIDENT_RADIUS = 0.1 * norm.ppf(1e-3 ** (1 / 500))


class NoiseDrivenNet(nn.Module):
    """Logits are the injected noise on the first row, so the argmax is a fair die."""

    def forward(self, obs):
        noise = obs - obs.round()
        return PolicyOutput(noise[:, 0, 0, :], obs.new_zeros(obs.shape[0]))


@pytest.fixture
def blank_obs():
    return torch.zeros(3, 5, 5)


class TestNormalQuantile:
    def test_quantile_whenHalf_thenZero(self):
        assert normal_quantile(0.5) == 0.0

    def test_quantile_whenOneSigma_thenOne(self):
        assert normal_quantile(0.8413447) == pytest.approx(1.0, abs=1e-6)

    def test_quantile_whenMirrored_thenAntisymmetric(self):
        for p in np.random.default_rng(0).uniform(1e-6, 1 - 1e-6, size=100):
            assert normal_quantile(p) == pytest.approx(-normal_quantile(1 - p), abs=1e-8)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_quantile_whenOutsideOpenInterval_thenRaisesValueError(self, p):
        with pytest.raises(ValueError):
            normal_quantile(p)


class TestClopperPearson:
    def test_lower_whenNoSuccesses_thenZero(self):
        assert clopper_pearson_lower(0, 500, 1e-3) == 0.0

    def test_lower_whenAllSuccesses_thenClosedForm(self):
        assert clopper_pearson_lower(500, 500, 1e-3) == pytest.approx(1e-3 ** (1 / 500), abs=1e-9)

    def test_lower_whenInterior_thenMatchesBetaQuantile(self):
        # Act
        bound = clopper_pearson_lower(400, 500, 1e-3)

        # Assert
        assert 0.73 < bound < 0.78
        assert bound == pytest.approx(beta.ppf(1e-3, 400, 101), abs=1e-6)

    def test_lower_whenSuccessesGrow_thenNondecreasing(self):
        bounds = [clopper_pearson_lower(k, 100, 1e-3) for k in range(101)]
        assert all(b >= a for a, b in zip(bounds, bounds[1:]))

    @pytest.mark.parametrize("k, n", [(-1, 10), (11, 10), (0, 0)])
    def test_lower_whenInvalidCounts_thenRaisesValueError(self, k, n):
        with pytest.raises(ValueError):
            clopper_pearson_lower(k, n, 1e-3)


def binomial_tail_lower(k, n, alpha, iterations=80):
    """Lower bound p solving P(Bin(n, p) >= k) = alpha, by bisection on the binomial tail."""
    lo, hi = np.zeros(len(k)), np.ones(len(k))
    for _ in range(iterations):
        mid = (lo + hi) / 2
        below = binom.sf(k - 1, n, mid) < alpha
        lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
    return (lo + hi) / 2


def test_clopper_pearson_matches_binomial_tail_bisection():
    # Arrange
    rng = np.random.default_rng(0)
    n = rng.integers(1, 1001, size=1000)
    k = rng.integers(1, n + 1)

    # Act
    bounds = np.array([clopper_pearson_lower(int(a), int(b), 1e-3) for a, b in zip(k, n)])

    # Assert
    np.testing.assert_allclose(bounds, binomial_tail_lower(k, n, 1e-3), rtol=0, atol=1e-6)


def test_normal_quantile_matches_erf_bisection():
    # Arrange
    p = np.random.default_rng(1).uniform(1e-6, 1 - 1e-6, size=1000)
    lo, hi = np.full(p.shape, -40.0), np.full(p.shape, 40.0)
    for _ in range(100):
        mid = (lo + hi) / 2
        below = 0.5 * special.erfc(-mid / np.sqrt(2)) < p
        lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)

    # Act
    quantiles = np.array([normal_quantile(float(q)) for q in p])

    # Assert
    np.testing.assert_allclose(quantiles, (lo + hi) / 2, rtol=0, atol=1e-8)


def test_clopper_pearson_coverage():
    alpha, n, trials = 1e-3, 500, 10000
    counts = np.random.default_rng(0).binomial(n, 0.9, size=trials)
    bounds = {k: clopper_pearson_lower(int(k), n, alpha) for k in np.unique(counts)}
    misses = np.mean([bounds[k] > 0.9 for k in counts])
    assert misses <= alpha + 3 * np.sqrt(alpha * (1 - alpha) / trials)


class TestCertify:
    def test_certify_whenConstantLogits_thenRadiusFromClosedForm(self, confident_net, blank_obs):
        # Act
        cert = certify(confident_net, blank_obs, CertConfig(), state_rng(0, 0), state_id=3)

        # Assert
        assert cert.action == 0
        assert cert.count == 500
        assert cert.state_id == 3
        assert cert.p_lower == pytest.approx(1e-3 ** (1 / 500), abs=1e-9)
        assert cert.radius == pytest.approx(CONFIDENT_RADIUS, abs=1e-9)
        assert cert.radius == pytest.approx(0.2205, abs=1e-4)

    def test_certify_whenNoiseDecidesAction_thenAbstains(self, blank_obs):
        # Act
        cert = certify(NoiseDrivenNet(), blank_obs, CertConfig(), state_rng(0, 0))

        # Assert
        assert cert.abstained
        assert cert.action == ABSTAIN
        assert cert.radius == 0.0
        assert cert.p_lower <= 0.5

    def test_certify_whenSameStream_thenIdentical(self, net, blank_obs):
        a = certify(net, blank_obs, CertConfig(n=100), state_rng(5, 2))
        b = certify(net, blank_obs, CertConfig(n=100), state_rng(5, 2))
        assert a == b

    def test_certify_whenSmallBatches_thenSameCountsAsOneBatch(self, blank_obs):
        # Arrange: batching must not change the order of the noise stream
        one = certify(NoiseDrivenNet(), blank_obs, CertConfig(n=100, batch_size=500), state_rng(1, 0))
        many = certify(NoiseDrivenNet(), blank_obs, CertConfig(n=100, batch_size=7), state_rng(1, 0))

        # Assert
        assert one == many


class TestCertConfig:
    @pytest.mark.parametrize(
        "kwargs", [{"pool_size": 0}, {"n0": 0}, {"n": 10, "n0": 32}, {"alpha": 1.0}, {"sigma": 0.0}]
    )
    def test_config_whenInvalid_thenRaisesValueError(self, kwargs):
        with pytest.raises(ValueError):
            CertConfig(**kwargs)


class TestRadiusPool:
    def test_pool_whenConstantLogits_thenEveryStateSharesRadius(self, confident_net, small_env):
        # Act
        report = radius_pool(confident_net, small_env, CertConfig(pool_size=6), seed=0)

        # Assert
        assert report["mean_radius"] == pytest.approx(CONFIDENT_RADIUS, abs=1e-9)
        assert report["abstain_fraction"] == 0.0
        assert len(report["radii"]) == 6
        assert {"sigma", "n0", "n", "alpha", "pool_size", "curve"} <= set(report)

    def test_pool_whenNoiseDecidesAction_thenNothingCertified(self, small_env):
        # Act
        report = radius_pool(NoiseDrivenNet(), small_env, CertConfig(pool_size=4, n=200), seed=0)

        # Assert
        assert report["mean_radius"] == 0.0
        assert report["abstain_fraction"] == 1.0
        assert report["curve"]["fractions"][0] == 1.0
        assert all(f == 0.0 for f in report["curve"]["fractions"][1:])

    def test_pool_whenParallel_thenSameRadii(self, net, small_env):
        cfg = CertConfig(pool_size=4, n=100)
        assert radius_pool(net, small_env, cfg, seed=1, jobs=1) == radius_pool(net, small_env, cfg, seed=1, jobs=2)

    def test_collectPool_whenCalled_thenRequestedSize(self, confident_net):
        # Arrange: a policy that only waits spans several episodes
        env = EnvConfig(side=6, density=0.1, num_agents=2, horizon=4)

        # Act
        states = collect_pool(confident_net, env, 19)

        # Assert
        assert len(states) == 19
        assert all(s.shape == (3, 5, 5) for s in states)


def test_certified_curve_counts_radii_at_or_above_threshold():
    assert certified_curve([0.0, 0.1, 0.2, 0.3], [0.0, 0.1, 0.25, 0.5]) == [1.0, 0.75, 0.25, 0.0]


def test_certified_curve_rejects_empty_pool():
    with pytest.raises(ValueError):
        certified_curve([], [0.0])
