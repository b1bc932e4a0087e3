import math

import numpy as np
import pytest

from spotrank.errors import InputError
from spotrank.realized import (BlockingScheme, BlockSet, block_covariance_array, block_covariances, eigen_totals,
                               explained_variance, spot_gap_estimate, truncate_jumps, valid_block_counts)
from spotrank.simulate import (ObservationSet, SimulationSpec, constant_path, rotating_model, sample_increments,
                               sample_observations)
from spotrank.specmat import partial_trace_gt, sym_eigvals


def naive_blocks(dx, K):
    n, d = dx.shape
    m = n // K
    out = np.zeros((K, d, d))
    for k in range(K):
        for i in range(k * m, (k + 1) * m):
            out[k] += np.outer(dx[i], dx[i])
    return out * K


def test_scheme_validation():
    s = BlockingScheme(2000, 0.02)
    assert (s.K, s.m) == (50, 40)
    assert BlockingScheme.from_count(1950, 5).h == 0.2
    for n, h in [(2000, 0.03), (100, 0.0), (100, 1.5), (10, 0.05), (0, 0.5)]:
        with pytest.raises(InputError):
            BlockingScheme(n, h)
    assert valid_block_counts(12) == [1, 2, 3, 4, 6, 12]


def test_matches_naive_loop(rng):
    dx = rng.standard_normal((120, 3))
    blocks = block_covariances(dx, BlockingScheme(120, 1 / 8))
    np.testing.assert_allclose(blocks.sigma_hat, naive_blocks(dx, 8), rtol=1e-13)
    assert len(blocks) == 8 and blocks.d == 3
    b = blocks[3]
    assert b.k == 3
    np.testing.assert_allclose(b.spectrum.eigenvalues, sym_eigvals(b.sigma_hat))


def test_single_dyad():
    n = 100
    dx = np.zeros((n, 2))
    dx[:, 0] = 1 / math.sqrt(n)
    blocks = block_covariances(dx, BlockingScheme(n, 0.1))
    E11 = np.array([[1.0, 0.0], [0.0, 0.0]])
    for S in blocks.sigma_hat:
        np.testing.assert_allclose(S, E11, rtol=1e-14, atol=0)


def test_total_identity(rng):
    dx = rng.standard_normal((300, 4)) * 0.1
    bs = block_covariances(dx, BlockingScheme(300, 1 / 6))
    lhs = sum(bs.h * np.trace(S) for S in bs.sigma_hat)
    assert lhs == pytest.approx(np.sum(dx**2), rel=1e-13)


def test_scheme_mismatch(rng):
    with pytest.raises(InputError):
        block_covariances(rng.standard_normal((100, 2)), BlockingScheme(200, 0.1))


def test_wishart_deviation_oracle():
    # E||S_hat - I|| at nh=100 estimated by an independent direct Wishart draw
    n, h = 10_000, 0.01
    obs = sample_observations(SimulationSpec(n, constant_path(np.eye(2)), seed=3))
    bs = block_covariances(obs, BlockingScheme(n, h), vectors=False)
    stat = np.mean(np.abs(sym_eigvals(bs.sigma_hat - np.eye(2))).max(axis=1))
    g = np.random.default_rng(0)
    Z = g.standard_normal((5000, 100, 2))
    W = np.einsum("rmi,rmj->rij", Z, Z) / 100
    oracle = np.mean(np.abs(np.linalg.eigvalsh(W - np.eye(2))).max(axis=1))
    assert 0.5 * oracle <= stat <= 2 * oracle


def test_unbiasedness():
    n, m, reps = 500, 50, 500
    S = np.array([[1.0, 0.3], [0.3, 0.5]])
    spec = SimulationSpec(n, constant_path(S), seed=11)
    sig = np.stack([block_covariance_array(sample_increments(spec, r), m)[0] for r in range(reps)])
    se = sig.std(axis=0, ddof=1) / math.sqrt(reps)
    assert np.all(np.abs(sig.mean(axis=0) - S) <= 4 * se)


def test_quadratic_scaling_and_permutation(rng):
    dx = rng.standard_normal((60, 3))
    a = block_covariances(dx, BlockingScheme(60, 0.25))
    b = block_covariances(2.5 * dx, BlockingScheme(60, 0.25))
    np.testing.assert_allclose(b.sigma_hat, 6.25 * a.sigma_hat, rtol=1e-14)
    perm = [2, 0, 1]
    c = block_covariances(dx[:, perm], BlockingScheme(60, 0.25))
    np.testing.assert_allclose(c.sigma_hat, a.sigma_hat[:, perm][:, :, perm], rtol=1e-14)
    np.testing.assert_allclose(c.eigenvalues, a.eigenvalues, rtol=1e-12)


def test_block_average_beats_pointwise_partial_trace():
    path = rotating_model(1.0, 0.5, 0.07, 0.2, d=3)
    h = 0.05
    t = np.linspace(0, 1, 20_001)
    pointwise = partial_trace_gt(path(t), 1)
    for k in range(20):
        avg = path.integral(np.array([k * h]), np.array([(k + 1) * h]))[0] / h
        mask = (t >= k * h) & (t <= (k + 1) * h)
        assert partial_trace_gt(avg, 1) >= np.trapezoid(pointwise[mask], t[mask]) / h - 1e-6


def test_explained_variance_trivial():
    S = np.broadcast_to(np.diag([1.0, 0.5, 0.0]), (4, 3, 3))
    ev = explained_variance(BlockSet(S, 0.25))
    np.testing.assert_allclose(ev.fractions, [2 / 3, 1 / 3, 0], atol=1e-15)
    np.testing.assert_allclose(ev.totals, [1, 0.5, 0], atol=1e-15)
    zero = explained_variance(BlockSet(np.zeros((2, 2, 2)), 0.5))
    assert not zero.defined and zero.fractions is None
    with pytest.raises(InputError):
        explained_variance([], 0.5)


def test_explained_variance_grows_with_block_length():
    n, reps = 2**10, 200
    hs = [2.0**-k for k in range(8, 1, -1)]
    medians = []
    spec = SimulationSpec(n, rotating_model(1.0, 0.5, 0.5**2, 0.0), seed=21)
    dxs = [sample_increments(spec, r) for r in range(reps)]
    for h in hs:
        m = round(n * h)
        fr = []
        for dx in dxs:
            tot = eigen_totals(sym_eigvals(block_covariance_array(dx, m)), h)
            fr.append(tot[1] / tot.sum())
        medians.append(np.median(fr))
    assert np.all(np.diff(medians) > 0), medians


def test_truncation_gaussian_untouched():
    n = 10_000
    obs = sample_observations(SimulationSpec(n, constant_path(np.eye(2)), seed=2))
    out = truncate_jumps(obs, 5.0)
    assert len(out.meta["truncated"]) <= 0.001 * n
    untouched = truncate_jumps(obs, 1e12)
    np.testing.assert_array_equal(untouched.values, obs.values)


def test_truncation_removes_single_jump():
    n, expo = 5000, 0.49
    dx = sample_increments(SimulationSpec(n, constant_path(np.eye(2)), seed=4))
    s_loc = math.sqrt(np.sum(dx**2))
    dx[1234, 0] += 100 * s_loc * n**-expo
    obs = ObservationSet.from_increments(dx)
    out = truncate_jumps(obs, 4.0, expo)
    assert out.meta["truncated"] == [1234]
    keep = np.ones(n, bool)
    keep[1234] = False
    np.testing.assert_allclose(out.increments[keep], dx[keep], atol=1e-12)
    assert np.all(out.increments[1234] == 0)


def test_truncation_arguments():
    obs = ObservationSet.from_increments(np.ones((4, 1)))
    for c, e in [(0, 0.49), (4, 0.5), (4, 0.0)]:
        with pytest.raises(InputError):
            truncate_jumps(obs, c, e)


def test_gap_estimate():
    S = np.broadcast_to(np.diag([3.0, 1.0]), (5, 2, 2))
    bs = BlockSet(S, 0.2)
    assert spot_gap_estimate(bs, 2) == 1.0
    assert spot_gap_estimate(bs, 1) == 3.0
    assert spot_gap_estimate(bs, 1, "lambda_r_plus_1") == 1.0
    assert spot_gap_estimate(BlockSet(np.zeros((3, 2, 2)), 1 / 3), 1) == 0.0
    with pytest.raises(InputError):
        spot_gap_estimate(bs, 3)
    with pytest.raises(InputError):
        spot_gap_estimate(bs, 2, "lambda_r_plus_1")


def test_gap_estimate_monte_carlo():
    n = 100_000
    K = min((k for k in range(1, n + 1) if n % k == 0), key=lambda k: abs(k - math.sqrt(n)))
    obs = sample_observations(SimulationSpec(n, constant_path(np.diag([2.0, 1.0])), seed=6))
    est = spot_gap_estimate(block_covariances(obs, BlockingScheme.from_count(n, K), vectors=False), 1)
    assert 1.5 <= est <= 2.5


def test_demean_removes_drift():
    n = 400
    dx = np.tile([[0.1, -0.2]], (n, 1))
    bs = block_covariances(dx, BlockingScheme(n, 0.25), demean=True)
    np.testing.assert_allclose(bs.sigma_hat, 0, atol=1e-15)
