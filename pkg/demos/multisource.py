"""Five biased sources sharing one calibration parameter, against averaging them.

Run: python3 demos/multisource.py
"""

import numpy as np

from gpcalib import testbeds as tb
from gpcalib.mcmc import McmcConfig, run_mcmc
from gpcalib.multisource import MultiSourceProblem, Source, ms_mcmc, ms_predict, stack_sources
from gpcalib.predict import predict_posterior

sim = tb.multisource_simulate(rng=1)
x, reality = sim["x"], sim["reality"]
cfg = McmcConfig(n_samples=2000, burn_in=500, seed=1)


def rmse(a):
    return np.sqrt(np.mean((a - reality) ** 2))


for disc in ("gasp", "sgasp"):
    sources = [Source(x, y, tb.sin_model, discrepancy="gasp") for y in sim["observations"]]
    problem = MultiSourceProblem(sources, [[0.0, 5.0]], measurement_bias=True, shared_design=x,
                                 discrepancy=disc)
    post = ms_mcmc(problem, cfg)
    joint = ms_predict(post, problem, max_draws=300)
    stacked = stack_sources(problem, disc)
    spost = run_mcmc(stacked, cfg)
    avg = predict_posterior(spost, stacked, x, max_draws=500)
    print(f"{disc:>5}: theta {post.theta.mean():.2f} (stacked {spost.theta.mean():.2f}, truth {np.pi:.2f})  "
          f"reality RMSE {rmse(joint.reality[0]):.3f} (stacked {rmse(avg.mean):.3f})")
