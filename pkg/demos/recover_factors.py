"""Render a rain layer with known factors, then fit them back by gradient descent.

Starting from an upright, unscaled guess, the optimizer only sees the
target layer, the noise and the fixed mixing weights.
"""

import numpy as np

from rainforge import FactorConfig, FactorDistribution, RainContext, RecoveryProblem, fit_factors, sample_factors


def main(size=48):
    ctx = RainContext.seeded(M=30, K=6, cascade_depth=3, seed=0)
    truth_cfg = FactorConfig(theta=FactorDistribution.constant(20.0), s_l=FactorDistribution.constant(0.65),
                             s_w=FactorDistribution.constant(1.15), tau=FactorDistribution.constant(0.75))
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((size, size, ctx.K))
    truth = sample_factors(truth_cfg, ctx.M, ctx.K, rng)
    truth = truth.replace(alpha=truth.alpha * 4.0)
    _, target = ctx.rain_layer(Z, truth)
    problem = RecoveryProblem(target, ctx, Z, free=("theta", "s_l", "s_w"), lam=0.0)
    best, trace = fit_factors(problem, truth.replace(theta=0.0, s_l=1.0, s_w=1.0))
    print(f"{len(trace.losses)} iterations, {trace.status}, final loss {trace.best_losses[-1]:.3e}")
    for name, want in (("theta", 20.0), ("s_l", 0.65), ("s_w", 1.15)):
        print(f"  {name:5s} true {want:6.3f}  recovered {getattr(best, name):6.3f}")


if __name__ == "__main__":
    main()
