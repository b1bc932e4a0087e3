import math

import numpy as np
import pytest
from scipy import special

from spotrank.concentration import (WishartEnsemble, bernstein_quantities, expectation_bound, laplace_lower_bound,
                                    mc_fourth_moment, mc_laplace, mc_mean_deviation, mc_upper_tail, sample_sums,
                                    sample_triangular, stochastic_order_check, triangular_optimal_delta,
                                    triangular_upper_bound, upper_tail_bound, validate)
from spotrank.errors import InputError, ModelError


def identity_ensemble(J, d):
    return WishartEnsemble(np.broadcast_to(np.eye(d), (J, d, d)).copy())


def random_ensemble(g, J, d, K=None):
    shape = (J, d, d) if K is None else (J, K, d, d)
    G = g.standard_normal(shape)
    return WishartEnsemble(G @ np.swapaxes(G, -1, -2) / d)


def test_bernstein_quantities_identity():
    q = bernstein_quantities(identity_ensemble(7, 3))
    assert q.sigma2 == pytest.approx(7 * 5)
    assert q.R == pytest.approx(7)
    np.testing.assert_allclose(q.A_sum, 7 * np.eye(3))


def test_bernstein_quantities_single():
    q = bernstein_quantities(WishartEnsemble(np.diag([2.0, 0.0])[None]))
    assert q.sigma2 == pytest.approx(12.0)
    assert q.R == pytest.approx(10.0)


def test_bernstein_quantities_permutation_and_scaling(rng):
    ens = random_ensemble(rng, 12, 3)
    q = bernstein_quantities(ens)
    qp = bernstein_quantities(WishartEnsemble(ens.A[rng.permutation(12)]))
    assert qp.sigma2 == pytest.approx(q.sigma2, rel=1e-13) and qp.R == pytest.approx(q.R, rel=1e-13)
    c = 2.5
    qc = bernstein_quantities(WishartEnsemble(c * ens.A))
    assert qc.sigma2 == pytest.approx(c**2 * q.sigma2, rel=1e-13)
    assert qc.R == pytest.approx(c * q.R, rel=1e-13)


def test_sigma2_is_fourth_moment(rng):
    ens = random_ensemble(rng, 5, 3)
    assert mc_fourth_moment(ens, 100_000, seed=3) == pytest.approx(bernstein_quantities(ens).sigma2, rel=0.05)


def test_non_psd_rejected():
    with pytest.raises(ModelError):
        WishartEnsemble(np.diag([1.0, -1.0])[None])
    with pytest.raises(InputError):
        WishartEnsemble(np.eye(2))


def test_upper_tail_formula():
    q = bernstein_quantities(identity_ensemble(1, 1))
    q1 = type(q)(1.0, 0.0, q.A_sum)
    assert upper_tail_bound(2.0, q1, 1) == pytest.approx(math.exp(-2.0))
    assert upper_tail_bound(1e-9, q, 3) == 1.0
    with pytest.raises(InputError):
        upper_tail_bound(0.0, q, 1)


def test_expectation_bound_formula():
    q = bernstein_quantities(identity_ensemble(4, 1))
    assert expectation_bound(q, 1) == pytest.approx(math.sqrt(q.sigma2) + 4 * q.R)
    d = 3
    expected = math.sqrt(q.sigma2) * (2 * math.sqrt(math.log(d)) + 1) + 4 * q.R * (math.log(d) + 1)
    assert expectation_bound(q, d) == pytest.approx(expected)
    base = type(q)(1.0, 1.0, q.A_sum)
    assert expectation_bound(type(q)(2.0, 1.0, q.A_sum), 2) > expectation_bound(base, 2)
    assert expectation_bound(type(q)(1.0, 2.0, q.A_sum), 2) > expectation_bound(base, 2)


def test_tail_monte_carlo_identity():
    ens = identity_ensemble(50, 3)
    q = bernstein_quantities(ens)
    ts = np.linspace(0.5, 4, 20) * math.sqrt(q.sigma2)
    emp = mc_upper_tail(ens, ts, 100_000, seed=1)
    bounds = np.array([upper_tail_bound(t, q, 3) for t in ts])
    assert np.all(emp <= bounds)


def test_expectation_monte_carlo():
    ens = identity_ensemble(50, 3)
    assert mc_mean_deviation(ens, 10_000, seed=2) <= expectation_bound(bernstein_quantities(ens), 3)


def test_sampler_mean(rng):
    ens = random_ensemble(rng, 4, 2)
    S = sample_sums(ens, 40_000, seed=5)
    se = S.std(axis=0) / math.sqrt(40_000)
    assert np.all(np.abs(S.mean(axis=0) - ens.A.sum(axis=0)) <= 4 * se)


def test_triangular_single_column_reduces(rng):
    ens = random_ensemble(rng, 10, 2, K=1)
    col = ens.column(0)
    q = bernstein_quantities(col)
    delta, t = 0.5, 1.3
    M = float(np.max(np.abs(np.linalg.eigvalsh(ens.A)).max(axis=-1)))
    expected = (1 + delta) * (np.linalg.eigvalsh(q.A_sum).max() + expectation_bound(q, 2)) + 2 * (1 + 1 / delta) * M * t
    assert triangular_upper_bound(ens, delta, t) == pytest.approx(expected, rel=1e-12)


def test_triangular_delta_grid(rng):
    ens = random_ensemble(rng, 20, 2, K=5)
    t = 2.0
    deltas = np.geomspace(1e-4, 1e2, 200_001)
    vals = np.array([triangular_upper_bound(ens, x, t) for x in deltas[::2000]])
    # convex with an interior minimum
    i = int(np.argmin(vals))
    assert 0 < i < len(vals) - 1
    d_star, best = triangular_optimal_delta(ens, t)
    S = triangular_upper_bound(ens, 1.0, 1e-300) / 2
    M = (triangular_upper_bound(ens, 1.0, 1.0) - 2 * S) / 4
    fine = (1 + deltas) * S + 2 * (1 + 1 / deltas) * M * t
    assert best == pytest.approx(fine.min(), rel=1e-6)
    assert d_star == pytest.approx(deltas[np.argmin(fine)], rel=1e-3)
    assert triangular_upper_bound(ens, d_star, t) == pytest.approx(best, rel=1e-12)


def test_triangular_exceedance():
    g = np.random.default_rng(8)
    ens = random_ensemble(g, 20, 2, K=25)
    t = 2.0
    _, bound = triangular_optimal_delta(ens, t)
    emp = sample_triangular(ens, 10_000, seed=4)
    assert np.mean(emp > bound) <= math.exp(-t)


def test_triangular_requires_layout(rng):
    with pytest.raises(InputError):
        triangular_upper_bound(random_ensemble(rng, 3, 2), 1.0, 1.0)
    with pytest.raises(InputError):
        random_ensemble(rng, 3, 2).column(0)
    with pytest.raises(InputError):
        triangular_upper_bound(random_ensemble(rng, 3, 2, K=2), 0.0, 1.0)


def test_laplace_bound_formula():
    assert laplace_lower_bound(0.0, 5, 1, 1.0) == pytest.approx(1.0, rel=1e-14)
    J, d, th, lam = 12, 3, 0.7, 0.4
    direct = (special.gamma(0.5) * special.gamma((J + 1) / 2) / (special.gamma(d / 2) * special.gamma((J - d + 2) / 2))
              * (1 + 2 * th * lam) ** (-(J - d + 1) / 2))
    assert laplace_lower_bound(th, J, d, lam) == pytest.approx(direct, rel=1e-12)
    # no overflow where the gamma ratio itself would overflow
    assert math.isfinite(laplace_lower_bound(1.0, 400, 3, 1.0))
    with pytest.raises(InputError):
        laplace_lower_bound(1.0, 2, 3, 1.0)
    with pytest.raises(InputError):
        laplace_lower_bound(-1.0, 5, 1, 1.0)


def test_laplace_monte_carlo_scalar():
    ens = identity_ensemble(5, 1)
    thetas = [0.1, 1.0, 10.0]
    emp = mc_laplace(ens, thetas, 100_000, seed=6)
    for th, e in zip(thetas, emp):
        b = laplace_lower_bound(th, 5, 1, 1.0)
        assert e <= b + 3 * math.sqrt(e * (1 - e) / 100_000) + 1e-12


def test_stochastic_order():
    ok, worst = stochastic_order_check(2, 20, 20_000, seed=3)
    assert ok, worst


@pytest.mark.parametrize("preset", ["bernstein", "triangular", "lower"])
def test_validate_presets_small(preset):
    rows = validate(preset, draws=2000, seed=1)
    assert rows and all(r["ok"] for r in rows)
    with pytest.raises(InputError):
        validate("other", 2000)
    with pytest.raises(InputError):
        validate(preset, 10)
