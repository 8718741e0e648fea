"""Recover the Lorenz-96 forcing from 5% of a noisy state grid.

Run: python3 demos/lorenz96.py
"""

import numpy as np

from gpcalib import testbeds as tb
from gpcalib.mcmc import McmcConfig, run_mcmc
from gpcalib.model import CalibrationProblem

data = tb.lorenz96_scenario(1, rng=1)
print(f"{data['design'].shape[0]} observations of a {data['reality'].shape} state grid")
for disc in ("no-discrepancy", "gasp", "sgasp"):
    problem = CalibrationProblem(data["design"], data["observations"], tb.Lorenz96Model(data["x0"]),
                                 [[-20.0, 20.0]], discrepancy=disc)
    # the posterior is far narrower than the range, so the theta step is tiny
    sd = [0.0005] if disc == "no-discrepancy" else [0.0005, 0.25, 0.25, 0.25]
    post = run_mcmc(problem, McmcConfig(n_samples=2000, burn_in=400, seed=1, sd_proposal=sd))
    th = post.theta[:, 0]
    print(f"{disc:>15}: mean {th.mean():.3f}  95% ({np.quantile(th, 0.025):.3f}, {np.quantile(th, 0.975):.3f})")
