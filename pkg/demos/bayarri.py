"""Calibrate the exponential-decay model with three discrepancy choices.

Run: python3 demos/bayarri.py
"""

import numpy as np

from gpcalib import testbeds as tb
from gpcalib.mcmc import McmcConfig, run_mcmc
from gpcalib.model import CalibrationProblem
from gpcalib.predict import predict_posterior

xt = np.linspace(0.0, 5.0, 200)
truth = tb.bayarri07_truth(xt)

for disc in ("no-discrepancy", "gasp", "sgasp"):
    problem = CalibrationProblem(tb.BAYARRI07_INPUT, tb.BAYARRI07_OUTPUT, tb.bayarri07, [[0.0, 50.0]],
                                 trend=np.ones((10, 1)), discrepancy=disc)
    post = run_mcmc(problem, McmcConfig(n_samples=10000, burn_in=2000, seed=1))
    pred = predict_posterior(post, problem, xt, X_testing=np.ones((200, 1)), interval=(0.025, 0.975), seed=1)
    theta = post.theta[:, 0]
    cover = np.mean((pred.lower <= truth) & (truth <= pred.upper))
    print(f"{disc:>15}: theta median {np.median(theta):.3f}  "
          f"95% ({np.quantile(theta, 0.025):.3f}, {np.quantile(theta, 0.975):.3f})  "
          f"acceptance {post.acceptance_rate:.3f}")
    print(f"{'':>15}  RMSE model+trend {np.sqrt(np.mean((pred.math_model_mean - truth) ** 2)):.3f}  "
          f"RMSE reality {np.sqrt(np.mean((pred.mean - truth) ** 2)):.3f}  coverage {cover:.3f}")
