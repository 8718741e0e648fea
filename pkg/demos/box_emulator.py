"""Replace the Box ODE solver by a PP-GaSP emulator and compare calibrations.

Run: python3 demos/box_emulator.py
"""

import time

import numpy as np

from gpcalib import testbeds as tb
from gpcalib.emulator import bind_emulator, emu_predict, fit_ppgasp
from gpcalib.mcmc import McmcConfig, run_mcmc
from gpcalib.model import CalibrationProblem

times = np.arange(1.0, 351.0)
rng = np.random.default_rng(0)
design = 0.5 + tb.maximin_lhs(50, 2, rng)
runs = np.array([tb.box_model(times, *row) for row in design])
em = fit_ppgasp(design, runs, nugget=True, seed=0)
print("emulator:", {k: v for k, v in em.report().items() if k in ("gamma", "eta", "loo_rmse_relative")})

held = 0.5 + rng.random((5, 2))
truth = np.array([tb.box_model(times, *row) for row in held])
err = emu_predict(em, held).mean - truth
print(f"held-out RMSE {np.sqrt(np.mean(err ** 2)):.4f} on an output range of {np.ptp(truth):.1f}")

base = CalibrationProblem(tb.BOX_TIMES, tb.BOX_OUTPUT, tb.BoxModel(), [[0.5, 1.5], [0.5, 1.5]])
cfg = McmcConfig(n_samples=2000, burn_in=500, seed=11)
for label, problem in (("solver", base), ("emulator", bind_emulator(base, em, output_coords=times))):
    t0 = time.perf_counter()
    post = run_mcmc(problem, cfg)
    print(f"{label:>8}: posterior mean {post.theta.mean(axis=0).round(3)}  {time.perf_counter() - t0:.1f}s")
