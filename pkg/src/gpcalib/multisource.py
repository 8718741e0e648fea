"""Calibration against several sources of field data.

Source ``l`` is modelled as

    y_l(x) = f_l(x, theta[index_theta_l]) + delta(x) + delta_l(x) + h_l(x) mu_l + eps_l

Without measurement bias there is no shared ``delta`` and each source keeps
its own discrepancy ``delta_l``, so the sources are independent given
``theta``.  With measurement bias all sources share one design; ``delta`` is
then sampled explicitly at that design from its Gaussian full conditional,
and ``delta_l`` plays the role of a correlated measurement error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import KernelSpec, cholesky_with_jitter, corr_matrix, cross_corr, scaled_corr
from .mcmc import (
    JrPriorParams,
    McmcConfig,
    _Chain,
    _CovSolver,
    default_kernel_start,
    gibbs_sigma0,
    gibbs_trend,
    jr_log_prior,
    metropolis_range_nugget,
    metropolis_theta_block,
)
from .model import (
    CalibrationProblem,
    NonFiniteModelError,
    default_lambda_z,
    no_disc_profile_loglik,
    normalize_discrepancy,
    profile_loglik,
)

__all__ = [
    "Source",
    "MultiSourceProblem",
    "MsPosterior",
    "MsPrediction",
    "ms_loglik_no_bias",
    "ms_mcmc",
    "ms_predict",
    "stack_sources",
    "gibbs_shared_delta",
]


@dataclass
class Source:
    """One source of field data.

    ``index_theta`` lists the 0-based global calibration parameters passed,
    in order, to ``model``.  ``discrepancy`` is the model of ``delta_l``.
    """

    design: np.ndarray
    observations: object
    model: object
    index_theta: tuple | None = None
    trend: np.ndarray | None = None
    discrepancy: str = "gasp"
    kernel: KernelSpec | None = None
    output_weights: np.ndarray | None = None
    lambda_z: float | None = None


@dataclass
class MultiSourceProblem:
    """Sources sharing the calibration parameters ``theta``.

    With ``measurement_bias`` every source design must equal ``shared_design``
    and ``discrepancy`` selects the model of the shared ``delta``.
    """

    sources: list
    theta_range: np.ndarray
    measurement_bias: bool = False
    shared_design: np.ndarray | None = None
    discrepancy: str = "gasp"
    kernel: KernelSpec | None = None
    problems: list = field(init=False, repr=False)

    def __post_init__(self):
        tr = np.atleast_2d(np.asarray(self.theta_range, dtype=float))
        if tr.shape[1] != 2 or np.any(tr[:, 0] >= tr[:, 1]):
            raise ValueError("theta_range must have ordered rows (lower, upper)")
        self.theta_range = tr
        if not self.sources:
            raise ValueError("need at least one source")
        self.discrepancy = normalize_discrepancy(self.discrepancy)
        pt = tr.shape[0]
        self.problems = []
        for l, s in enumerate(self.sources):
            idx = tuple(range(pt)) if s.index_theta is None else tuple(int(i) for i in s.index_theta)
            if not idx or min(idx) < 0 or max(idx) >= pt:
                raise ValueError(f"source {l}: index_theta outside 0..{pt - 1}")
            s.index_theta = idx
            self.problems.append(CalibrationProblem(
                design=s.design, observations=s.observations, model=s.model,
                theta_range=tr[list(idx)], trend=s.trend, output_weights=s.output_weights,
                discrepancy=s.discrepancy, kernel=s.kernel, lambda_z=s.lambda_z,
            ))
        if self.measurement_bias:
            if self.shared_design is None:
                raise ValueError("measurement bias needs shared_design")
            xs = np.asarray(self.shared_design, dtype=float)
            xs = xs.reshape(-1, 1) if xs.ndim == 1 else xs
            for l, p in enumerate(self.problems):
                if p.design.shape != xs.shape or not np.allclose(p.design, xs):
                    raise ValueError(f"source {l}: design differs from shared_design")
            self.shared_design = xs
            if self.kernel is None:
                self.kernel = KernelSpec("matern_5_2", xs.shape[1])

    @property
    def k(self) -> int:
        return len(self.sources)

    @property
    def p_theta(self) -> int:
        return self.theta_range.shape[0]

    def sub_theta(self, l, theta):
        return np.asarray(theta, dtype=float)[list(self.sources[l].index_theta)]


def ms_loglik_no_bias(problem: MultiSourceProblem, params) -> float:
    """Sum of per-source profile log-likelihoods.

    ``params`` is the global ``theta`` followed, for every source with a
    discrepancy, by its ``(log_beta, log_eta)``.
    """
    if problem.measurement_bias:
        raise ValueError("the additive likelihood needs measurement_bias = False")
    params = np.asarray(params, dtype=float)
    pt = problem.p_theta
    need = pt + sum(p.p_x + 1 for p in problem.problems if p.has_kernel)
    if params.shape[0] != need:
        raise ValueError(f"expected {need} parameters, got {params.shape[0]}")
    theta, pos, total = params[:pt], pt, 0.0
    for l, p in enumerate(problem.problems):
        sub = problem.sub_theta(l, theta)
        if p.has_kernel:
            kp = params[pos : pos + p.p_x + 1]
            pos += p.p_x + 1
            total += profile_loglik(p, np.concatenate([sub, kp]))
        else:
            total += no_disc_profile_loglik(p, sub)
    return total


def stack_sources(problem: MultiSourceProblem, discrepancy: str | None = None) -> CalibrationProblem:
    """Single-source problem on the across-source average of the data.

    The computer model is the average of the source models.
    """
    ps = problem.problems
    x0 = ps[0].design
    for p in ps[1:]:
        if p.design.shape != x0.shape or not np.allclose(p.design, x0):
            raise ValueError("stacking needs identical designs across sources")
    ybar = np.mean([p.stats.ybar for p in ps], axis=0)
    models = [(s.model, list(s.index_theta)) for s in problem.sources]

    def model(design, theta):
        theta = np.asarray(theta, dtype=float)
        return np.mean([np.asarray(m(design, theta[i]), dtype=float) for m, i in models], axis=0)

    return CalibrationProblem(
        design=x0, observations=ybar, model=model, theta_range=problem.theta_range,
        discrepancy=discrepancy or problem.discrepancy, kernel=ps[0].kernel,
    )


def gibbs_shared_delta(residuals, covs, prior_cov, rng, return_moments=False):
    """Draw ``delta`` given ``residual_l ~ N(delta, cov_l)`` and ``delta ~ N(0, prior_cov)``.

    With ``A = prior_cov`` and ``B`` the covariance of the precision-weighted
    average of the residuals, the conditional is
    ``N(A (A + B)^{-1} m, A - A (A + B)^{-1} A)``.
    """
    A = np.asarray(prior_cov, dtype=float)
    n = A.shape[0]
    P = np.zeros((n, n))
    b = np.zeros(n)
    for r, C in zip(residuals, covs):
        Ci = C.solve(np.eye(n)) if isinstance(C, _CovSolver) else linalg.inv(C)
        Ci = 0.5 * (Ci + Ci.T)
        P += Ci
        b += Ci @ r
    chol_p, _ = cholesky_with_jitter(P)
    B = linalg.cho_solve((chol_p, True), np.eye(n), check_finite=False)
    m = B @ b
    chol_s, _ = cholesky_with_jitter(0.5 * (A + B + (A + B).T))
    G = linalg.cho_solve((chol_s, True), A, check_finite=False).T  # A (A + B)^{-1}
    mean = G @ m
    cov = A - G @ A
    cov = 0.5 * (cov + cov.T)
    chol_c, _ = cholesky_with_jitter(cov)
    draw = mean + chol_c @ rng.standard_normal(n)
    if return_moments:
        return draw, mean, cov
    return draw


@dataclass
class MsPosterior:
    """Retained draws; per-source arrays are lists indexed by source."""

    theta: np.ndarray
    log_beta: list
    log_eta: list
    sigma0_sq: list
    theta_m: list
    delta: np.ndarray | None
    delta_log_beta: np.ndarray | None
    delta_sigma_sq: np.ndarray | None
    accept_theta: np.ndarray
    n_iterations: int
    measurement_bias: bool
    delta_log_eta: np.ndarray | None = None

    def __len__(self):
        return self.theta.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return len(self.accept_theta) / self.n_iterations

    def summary(self) -> dict:
        return {
            "n_draws": len(self),
            "acceptance_rate": self.acceptance_rate,
            "theta_mean": self.theta.mean(axis=0).tolist(),
            "theta_median": np.median(self.theta, axis=0).tolist(),
            "theta_lower": np.quantile(self.theta, 0.025, axis=0).tolist(),
            "theta_upper": np.quantile(self.theta, 0.975, axis=0).tolist(),
            "measurement_bias": self.measurement_bias,
        }

    def columns(self):
        cols = [f"theta_{i + 1}" for i in range(self.theta.shape[1])]
        data = [self.theta]
        for l in range(len(self.sigma0_sq)):
            if self.log_beta[l] is not None:
                cols += [f"s{l + 1}_log_beta_{j + 1}" for j in range(self.log_beta[l].shape[1])]
                cols.append(f"s{l + 1}_log_eta")
                data += [self.log_beta[l], self.log_eta[l][:, None]]
            cols.append(f"s{l + 1}_sigma0_sq")
            data.append(self.sigma0_sq[l][:, None])
            if self.theta_m[l] is not None:
                cols += [f"s{l + 1}_theta_m_{j + 1}" for j in range(self.theta_m[l].shape[1])]
                data.append(self.theta_m[l])
        if self.delta is not None:
            cols += [f"delta_log_beta_{j + 1}" for j in range(self.delta_log_beta.shape[1])]
            data.append(self.delta_log_beta)
            if self.delta_log_eta is not None:
                cols.append("delta_log_eta")
                data.append(self.delta_log_eta[:, None])
            cols.append("delta_sigma_sq")
            data.append(self.delta_sigma_sq[:, None])
        return cols, np.hstack(data)

    def to_csv(self, path) -> None:
        import csv

        cols, data = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in data:
                w.writerow([repr(float(v)) for v in row])


class _SourceState:
    """Per-source sampler state: kernel factorization, noise variance and trend."""

    def __init__(self, problem: CalibrationProblem, sd_kernel, jr):
        self.p = problem
        self.chain = _Chain(problem)
        self.sd = sd_kernel
        self.jr = jr
        self.log_beta, self.log_eta = default_kernel_start(problem)
        self.kstate = self.chain.set_kernel(self.log_beta, self.log_eta)
        self.sigma0_sq = 1.0
        self.theta_m = np.zeros(problem.q)

    @property
    def solver(self):
        return self.kstate[1]

    def residual(self, f, delta):
        r0 = self.chain.ybar - f
        if delta is not None:
            r0 = r0 - delta
        v = r0 - self.p.trend @ self.theta_m if self.p.q else r0
        return r0, v

    def ll(self, v):
        return -0.5 * float(v @ self.solver.solve(v)) / self.sigma0_sq

    def update(self, f, delta, rng):
        p, px = self.p, self.p.p_x
        r0, v = self.residual(f, delta)
        if p.has_kernel:
            cache = {}

            def value(lp, ks):
                return (-0.5 * ks[1].logdet - 0.5 * float(v @ ks[1].solve(v)) / self.sigma0_sq
                        + jr_log_prior(np.exp(lp[:px]), np.exp(lp[px]), self.jr, log_coords=True))

            def target(lp):
                ks = self.chain.set_kernel(lp[:px], lp[px])
                cache["prop"] = ks
                return value(lp, ks)

            cur = np.concatenate([self.log_beta, [self.log_eta]])
            new, _, acc = metropolis_range_nugget(cur, target, self.sd, rng, value(cur, self.kstate))
            if acc:
                self.kstate = cache["prop"]
                self.log_beta, self.log_eta = new[:px], float(new[px])
        self.sigma0_sq = gibbs_sigma0(v, self.solver, rng, extra_ss=self.chain.sf2, n_total=self.chain.N)
        if p.q:
            self.theta_m = gibbs_trend(r0, self.solver, p.trend, self.sigma0_sq, rng)

    def noise_cov(self):
        """``sigma0^2 R_tilde`` as a dense matrix."""
        s = self.solver
        if s.diag:
            return np.diag(self.sigma0_sq * s.d)
        L = s.chol
        return self.sigma0_sq * (L @ L.T)


class _SharedDelta:
    """Shared discrepancy at the common design.

    Parameterized like a single-source discrepancy: ``(log_beta, log_eta)``
    under the JR prior, with variance ``sigma_sq = mean_l(sigma0_l^2) / eta``.
    A Gibbs step on ``sigma_sq`` under ``1/sigma^2`` would be drawn to zero
    because ``delta`` is sampled explicitly.
    """

    def __init__(self, problem: MultiSourceProblem, sd):
        self.x = problem.shared_design
        self.spec = problem.kernel
        self.kind = problem.discrepancy
        self.n, self.px = self.x.shape
        L = np.ptp(self.x, axis=0)
        self.L = np.where(L > 0, L, 1.0)
        self.jr = JrPriorParams.default(self.x)
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), (self.px + 1,)).copy()
        self.log_beta = -np.log(0.5 * self.L)
        self.log_eta = 0.0
        self.sigma_sq = 0.1
        self.value = np.zeros(self.n)

    def corr(self, log_beta, log_eta):
        gamma = np.exp(-np.asarray(log_beta))
        R = corr_matrix(self.x, self.spec, gamma)
        if self.kind == "sgasp":
            lz = default_lambda_z(gamma, float(np.exp(log_eta)), self.n, self.L)
            return scaled_corr(R, lz).Rz
        return R.R

    def update(self, states, fs, rng):
        s0 = float(np.mean([s.sigma0_sq for s in states]))
        self.sigma_sq = s0 / np.exp(self.log_eta)
        M = self.corr(self.log_beta, self.log_eta)
        res, covs = [], []
        for s, f in zip(states, fs):
            r0 = s.chain.ybar - f
            if s.p.q:
                r0 = r0 - s.p.trend @ s.theta_m
            res.append(r0)
            covs.append(s.noise_cov())
        self.value = gibbs_shared_delta(res, covs, self.sigma_sq * M, rng)

        def target(params):
            lb, le = params[:-1], params[-1]
            sig = s0 / np.exp(le)
            sol = _CovSolver(self.corr(lb, le))
            return (-0.5 * (sol.logdet + self.n * np.log(sig))
                    - 0.5 * float(self.value @ sol.solve(self.value)) / sig
                    + jr_log_prior(np.exp(lb), float(np.exp(le)), self.jr, log_coords=True))

        params, _, _ = metropolis_range_nugget(np.append(self.log_beta, self.log_eta), target, self.sd, rng)
        self.log_beta, self.log_eta = params[:-1], float(params[-1])
        self.sigma_sq = s0 / np.exp(self.log_eta)


def _pilot_theta(problem: MultiSourceProblem, rng, n_candidates=20):
    from .testbeds import maximin_lhs

    lo, hi = problem.theta_range[:, 0], problem.theta_range[:, 1]
    cands = [0.5 * (lo + hi)]
    cands += list(lo + maximin_lhs(n_candidates, problem.p_theta, rng, n_candidates=10) * (hi - lo))
    best, best_ll = cands[0], -np.inf
    for c in cands:
        try:
            ll = sum(no_disc_profile_loglik(p, problem.sub_theta(l, c)) for l, p in enumerate(problem.problems))
        except (NonFiniteModelError, np.linalg.LinAlgError, FloatingPointError):
            continue
        if ll > best_ll:
            best, best_ll = c, ll
    return np.array(best, dtype=float)


def ms_mcmc(problem: MultiSourceProblem, config: McmcConfig | None = None) -> MsPosterior:
    """Metropolis-within-Gibbs for the multi-source model.

    Per iteration: the global ``theta`` block; then, with measurement bias,
    the shared ``delta`` with its variance and range; then every source's
    kernel parameters, noise variance and trend.
    """
    cfg = config or McmcConfig()
    rng = np.random.default_rng(cfg.seed)
    P = problem
    pt = P.p_theta
    sd = cfg.sd_proposal
    width = P.theta_range[:, 1] - P.theta_range[:, 0]
    sd_theta = (np.full(pt, 0.05) if sd is None else sd[:pt]) * width
    sd_rest = 0.25 if sd is None or sd.shape[0] == pt else sd[pt:]

    states = []
    for p in P.problems:
        kern = np.broadcast_to(sd_rest, (p.p_x + 1,)) if np.ndim(sd_rest) == 0 or len(sd_rest) != p.p_x + 1 else sd_rest
        states.append(_SourceState(p, np.asarray(kern, dtype=float), JrPriorParams.default(p.design)))
    shared = _SharedDelta(P, 0.25) if (P.measurement_bias and P.discrepancy != "no-discrepancy") else None

    theta = (np.asarray(cfg.initial_theta, dtype=float).reshape(pt)
             if cfg.initial_theta is not None else _pilot_theta(P, rng))

    def model_values(th):
        return [p.evaluate(P.sub_theta(l, th)) for l, p in enumerate(P.problems)]

    fs = model_values(theta)
    for s, f in zip(states, fs):
        _, v = s.residual(f, None)
        s.sigma0_sq = max((float(v @ s.solver.solve(v)) + s.chain.sf2) / s.chain.N, 1e-12)
    if shared is not None:
        start = max(float(np.var(np.mean([s.chain.ybar - f for s, f in zip(states, fs)], axis=0))), 1e-6)
        shared.log_eta = float(np.log(np.mean([s.sigma0_sq for s in states]) / start))

    def theta_ll(th):
        delta = None if shared is None else shared.value
        total = 0.0
        for l, s in enumerate(states):
            _, v = s.residual(s.p.evaluate(P.sub_theta(l, th)), delta)
            total += s.ll(v)
        return total

    n_keep = (cfg.n_samples - cfg.burn_in) // cfg.thinning
    k = P.k
    th_out = np.empty((n_keep, pt))
    lb_out = [np.empty((n_keep, s.p.p_x)) if s.p.has_kernel else None for s in states]
    le_out = [np.empty(n_keep) if s.p.has_kernel else None for s in states]
    s2_out = [np.empty(n_keep) for _ in states]
    tm_out = [np.empty((n_keep, s.p.q)) if s.p.q else None for s in states]
    d_out = dl_out = de_out = ds_out = None
    if shared is not None:
        d_out = np.empty((n_keep, shared.n))
        dl_out = np.empty((n_keep, shared.px))
        de_out = np.empty(n_keep)
        ds_out = np.empty(n_keep)
    acc_theta = []
    row = 0
    for it in range(cfg.n_samples):
        theta, _, acc = metropolis_theta_block(theta, theta_ll, sd_theta, P.theta_range, rng)
        if acc:
            acc_theta.append(it)
        fs = model_values(theta)
        if shared is not None:
            shared.update(states, fs, rng)
        delta = None if shared is None else shared.value
        for s, f in zip(states, fs):
            s.update(f, delta, rng)
        j = it - cfg.burn_in + 1
        if j > 0 and j % cfg.thinning == 0 and row < n_keep:
            th_out[row] = theta
            for l, s in enumerate(states):
                if lb_out[l] is not None:
                    lb_out[l][row] = s.log_beta
                    le_out[l][row] = s.log_eta
                s2_out[l][row] = s.sigma0_sq
                if tm_out[l] is not None:
                    tm_out[l][row] = s.theta_m
            if shared is not None:
                d_out[row] = shared.value
                dl_out[row] = shared.log_beta
                de_out[row] = shared.log_eta
                ds_out[row] = shared.sigma_sq
            row += 1
    return MsPosterior(
        theta=th_out, log_beta=lb_out, log_eta=le_out, sigma0_sq=s2_out, theta_m=tm_out,
        delta=d_out, delta_log_beta=dl_out, delta_sigma_sq=ds_out,
        accept_theta=np.asarray(acc_theta, dtype=int), n_iterations=cfg.n_samples,
        measurement_bias=P.measurement_bias and shared is not None, delta_log_eta=de_out,
    )


@dataclass
class MsPrediction:
    """Posterior-mean estimates at ``m`` test inputs.

    ``reality[l]`` is ``f_l + h_l mu_l`` plus the shared ``delta`` (with
    measurement bias) or the source discrepancy (without).  ``source_delta[l]``
    is the estimate of ``delta_l``.
    """

    x_test: np.ndarray
    reality: np.ndarray
    model: np.ndarray
    delta: np.ndarray | None
    source_delta: np.ndarray


def _source_delta(p: CalibrationProblem, x, v, log_beta, log_eta):
    if not p.has_kernel:
        return np.zeros(x.shape[0])
    from .predict import discrepancy_update

    return discrepancy_update(p, x, v, np.exp(-np.asarray(log_beta)), float(np.exp(log_eta)))[0]


def ms_predict(post: MsPosterior, problem: MultiSourceProblem, x_test=None, X_testing=None,
               max_draws: int | None = 500) -> MsPrediction:
    """Average conditional means over retained draws.

    ``x_test`` defaults to the shared design (or each source design without
    measurement bias, which then must coincide).  ``X_testing`` is a per-source
    list of test trend bases.
    """
    P = problem
    if x_test is None:
        x_test = P.shared_design if P.shared_design is not None else P.problems[0].design
    x = np.asarray(x_test, dtype=float)
    px = P.problems[0].p_x
    x = x.reshape(-1, px) if x.ndim == 1 else x
    m, k = x.shape[0], P.k
    idx = np.arange(len(post))
    if max_draws is not None and len(idx) > max_draws:
        idx = np.unique(np.linspace(0, len(idx) - 1, max_draws).round().astype(int))
    acc_model = np.zeros((k, m))
    acc_real = np.zeros((k, m))
    acc_src = np.zeros((k, m))
    acc_delta = np.zeros(m) if post.delta is not None else None
    spec = P.kernel
    for i in idx:
        theta = post.theta[i]
        dstar = None
        if post.delta is not None:
            gamma = np.exp(-post.delta_log_beta[i])
            xs = P.shared_design
            R = corr_matrix(xs, spec, gamma)
            r = cross_corr(xs, x, spec, gamma).reshape(xs.shape[0], m)
            if P.discrepancy == "sgasp":
                if post.delta_log_eta is not None:
                    eta = float(np.exp(post.delta_log_eta[i]))
                else:
                    eta = float(np.mean([post.sigma0_sq[l][i] for l in range(k)])) / post.delta_sigma_sq[i]
                L = np.ptp(xs, axis=0)
                lz = default_lambda_z(gamma, eta, xs.shape[0], np.where(L > 0, L, 1.0))
                A = R.R + xs.shape[0] / lz * np.eye(xs.shape[0])
                ca, _ = cholesky_with_jitter(A)
                r = r - R.R @ linalg.cho_solve((ca, True), r, check_finite=False)
                M = scaled_corr(R, lz).Rz
            else:
                M = R.R
            cm, _ = cholesky_with_jitter(M)
            dstar = r.T @ linalg.cho_solve((cm, True), post.delta[i], check_finite=False)
            acc_delta += dstar
        for l, p in enumerate(P.problems):
            sub = P.sub_theta(l, theta)
            f_test = np.asarray(p.model(x, sub), dtype=float).reshape(-1)
            trend = 0.0
            v = p.stats.ybar - p.evaluate(sub)
            if post.delta is not None:
                v = v - post.delta[i]
            if p.q:
                tm = post.theta_m[l][i]
                v = v - p.trend @ tm
                if X_testing is not None:
                    trend = np.asarray(X_testing[l], dtype=float).reshape(m, -1) @ tm
            lb = None if post.log_beta[l] is None else post.log_beta[l][i]
            le = None if post.log_eta[l] is None else post.log_eta[l][i]
            sd = _source_delta(p, x, v, lb, le)
            acc_model[l] += f_test
            acc_src[l] += sd
            acc_real[l] += f_test + trend + (dstar if dstar is not None else sd)
    c = float(len(idx))
    return MsPrediction(
        x_test=x,
        reality=acc_real / c,
        model=acc_model / c,
        delta=None if acc_delta is None else acc_delta / c,
        source_delta=acc_src / c,
    )
