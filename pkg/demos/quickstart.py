"""Simulate a two-asset path, test a rank hypothesis and estimate the rank."""

from spotrank.realized import BlockingScheme, block_covariances, explained_variance
from spotrank.ranktest import HypothesisParams, rank_critical_values, rank_estimate, run_test
from spotrank.simulate import SimulationSpec, rotating_model, sample_observations

n, h = 2000, 0.02

for gamma in (0.0, 1.0):
    path = rotating_model(lam=1.0, beta=0.5, h_rot=h, gamma=gamma)
    obs = sample_observations(SimulationSpec(n, path, seed=7))
    blocks = block_covariances(obs, BlockingScheme(n, h))

    report = run_test(blocks, HypothesisParams(r=1, L=0.25, alpha=0.1), n)
    print(f"gamma={gamma}: T={report.statistic:.4f} kappa={report.kappa:.4f} reject={report.reject}")

    kappas = rank_critical_values(HypothesisParams(r=0, L=0.25, alpha=0.1), n, h, blocks.d)
    est = rank_estimate(blocks, kappas)
    ev = explained_variance(blocks)
    print(f"  estimated rank {est.r_hat}, explained variance {ev.fractions}")
