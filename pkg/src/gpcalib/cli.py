"""Command-line front end: ``gpcalib {calibrate,predict,emulate,simulate} CONFIG``.

Every command reads a JSON config (schema in ``docs/config.md``).  Relative
paths resolve against the config file's directory.  ``--set key=value``
overrides a config entry; dotted keys reach into nested objects and values
are parsed as JSON when possible.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.  Errors are
written to stderr as one JSON object ``{"error": {"code", "kind", "message",
"line"}}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from . import testbeds as tb
from .emulator import EmulatorFormatError, EmulatorModel, fit_ppgasp, fit_scalar, load_emulator, save_emulator
from .kernels import FAMILIES, KernelSpec
from .mcmc import McmcConfig, run_mcmc
from .mle import MleResult, OptimizerFailure, run_mle
from .model import DISCREPANCY_TYPES, CalibrationProblem, NonFiniteModelError, normalize_discrepancy
from .multisource import MsPosterior, MultiSourceProblem, Source, ms_mcmc, ms_predict
from .predict import predict_plugin, predict_posterior

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("calibrate", "predict", "emulate", "simulate")
TESTBEDS = ("bayarri07", "box", "lorenz96", "multisource")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


# ---------------------------------------------------------------- config


class Config:
    """Parsed config with line lookup for error messages."""

    def __init__(self, data: dict, text: str = "", base: Path = Path(".")):
        self.data = data
        self.text = text
        self.base = base

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        text = path.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc.msg}", exc.lineno) from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object", 1)
        for item in overrides:
            _apply_override(data, item)
        return cls(data, text, path.resolve().parent)

    def line_of(self, key):
        needle = f'"{key}"'
        for i, line in enumerate(self.text.splitlines(), start=1):
            if needle in line:
                return i
        return None

    def error(self, key, message):
        line = self.line_of(key)
        where = f"line {line}: " if line else ""
        return ConfigError(f"{where}{key}: {message}", line)

    def get(self, key, default=None):
        return self.data.get(key, default)

    def require(self, key):
        if key not in self.data:
            raise ConfigError(f"missing required field '{key}'")
        return self.data[key]

    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def input_path(self, key, value=None):
        value = self.require(key) if value is None else value
        p = self.path(value)
        if not p.exists():
            raise self.error(key, f"file not found: {p}")
        return p

    def number(self, key, default, lo=None, hi=None, integer=False):
        v = self.data.get(key, default)
        if v is None:
            return None
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        if ok and integer:
            ok = float(v).is_integer()
        if not ok or (lo is not None and v < lo) or (hi is not None and v > hi):
            kind = "an integer" if integer else "a number"
            rng = f" in [{lo}, {hi}]" if lo is not None or hi is not None else ""
            raise self.error(key, f"must be {kind}{rng}, got {v!r}")
        return int(v) if integer else float(v)

    def output_dir(self):
        out = self.path(self.data.get("output_dir", "."))
        out.mkdir(parents=True, exist_ok=True)
        return out


def _apply_override(data, item):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: '{part}' is not an object")
    node[parts[-1]] = value


def _kernel(cfg: Config, p_x: int, spec=None):
    spec = cfg.get("kernel") if spec is None else spec
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = {"family": spec}
    fam = spec.get("family", "matern_5_2")
    fams = fam if isinstance(fam, list) else [fam]
    for f in fams:
        if f not in FAMILIES:
            raise cfg.error("kernel", f"unknown family {f!r}; choose from {', '.join(FAMILIES)}")
    alpha = spec.get("alpha", 1.9)
    try:
        return KernelSpec(tuple(fams) if len(fams) > 1 else fams[0], p_x, alpha=alpha)
    except ValueError as exc:
        raise cfg.error("kernel", str(exc)) from None


def _theta_range(cfg: Config, value=None):
    tr = cfg.require("theta_range") if value is None else value
    arr = np.atleast_2d(np.asarray(tr, dtype=float))
    if arr.ndim != 2 or arr.shape[1] != 2 or np.any(arr[:, 0] >= arr[:, 1]):
        raise cfg.error("theta_range", "needs rows [lower, upper] with lower < upper")
    return arr


def _discrepancy(cfg: Config, value=None):
    value = cfg.get("discrepancy", "sgasp") if value is None else value
    try:
        return normalize_discrepancy(value)
    except ValueError:
        raise cfg.error("discrepancy", f"unknown type {value!r}; choose from {', '.join(DISCREPANCY_TYPES)}") from None


def _design(cfg: Config, key="design", value=None):
    return io.read_matrix(cfg.input_path(key, value))


def _optional_matrix(cfg: Config, key, value=None):
    value = cfg.get(key) if value is None else value
    return None if value is None else io.read_matrix(cfg.input_path(key, value))


def _weights(cfg: Config, key):
    w = cfg.get(key)
    if w is None:
        return None
    if isinstance(w, str):
        return io.read_matrix(cfg.input_path(key, w))[:, 0]
    return np.asarray(w, dtype=float)


def _simulator(cfg: Config, spec, design, key="simulator"):
    """Return ``(model, jacobian)`` for a simulator binding."""
    if spec is None:
        raise ConfigError(f"missing required field '{key}'")
    if isinstance(spec, str):
        spec = {"builtin": spec}
    if "builtin" in spec:
        name = spec["builtin"]
        if name == "bayarri07":
            return tb.bayarri07, tb.bayarri07_jacobian
        if name == "sin":
            return tb.sin_model, None
        if name == "box":
            return tb.BoxModel(step=float(spec.get("step", 1.0))), None
        if name == "lorenz96":
            if "x0" not in spec:
                raise cfg.error(key, "lorenz96 needs an 'x0' file with the initial state")
            x0 = io.read_matrix(cfg.input_path(key, spec["x0"])).reshape(-1)
            return tb.Lorenz96Model(x0, h=float(spec.get("h", 0.05))), None
        raise cfg.error(key, f"unknown builtin {name!r}; choose from bayarri07, sin, box, lorenz96")
    if "emulator" in spec:
        em = load_emulator(cfg.input_path(key, spec["emulator"]))
        coords = spec.get("output_coords")
        coords = None if coords is None else io.read_matrix(cfg.input_path(key, coords))
        loc = spec.get("loc_index")
        return EmulatorModel(em, coords, loc), None
    if "table" in spec:
        t = spec["table"]
        x = io.read_matrix(cfg.input_path(key, t["inputs"]))
        y = io.read_matrix(cfg.input_path(key, t["outputs"]))
        fit = fit_scalar if y.shape[1] == 1 else fit_ppgasp
        em = fit(x, y[:, 0] if y.shape[1] == 1 else y, nugget=bool(t.get("nugget", False)),
                 seed=cfg.get("seed"))
        coords = t.get("output_coords")
        coords = None if coords is None else io.read_matrix(cfg.input_path(key, coords))
        return EmulatorModel(em, coords, t.get("loc_index")), None
    raise cfg.error(key, "needs one of 'builtin', 'emulator' or 'table'")


def build_problem(cfg: Config) -> CalibrationProblem:
    design = _design(cfg)
    obs = io.read_observations(cfg.input_path("observations"), n=design.shape[0])
    model, jac = _simulator(cfg, cfg.get("simulator"), design)
    try:
        return CalibrationProblem(
            design=design,
            observations=obs,
            model=model,
            theta_range=_theta_range(cfg),
            trend=_optional_matrix(cfg, "trend"),
            output_weights=_weights(cfg, "output_weights"),
            discrepancy=_discrepancy(cfg),
            kernel=_kernel(cfg, design.shape[1]),
            lambda_z=cfg.number("lambda_z", None, lo=0.0),
            model_jacobian=jac,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_ms_problem(cfg: Config) -> MultiSourceProblem:
    entries = cfg.require("sources")
    if not isinstance(entries, list) or not entries:
        raise cfg.error("sources", "must be a non-empty list")
    sources = []
    for l, s in enumerate(entries):
        for field in ("design", "observations"):
            if not isinstance(s, dict) or field not in s:
                raise cfg.error("sources", f"source {l + 1} is missing '{field}'")
        design = _design(cfg, "sources", s.get("design"))
        obs = io.read_observations(cfg.input_path("sources", s.get("observations")), n=design.shape[0])
        model, _ = _simulator(cfg, s.get("simulator", cfg.get("simulator")), design, "sources")
        sources.append(Source(
            design=design,
            observations=obs,
            model=model,
            index_theta=s.get("index_theta"),
            trend=None if s.get("trend") is None else io.read_matrix(cfg.input_path("sources", s["trend"])),
            discrepancy=_discrepancy(cfg, s.get("discrepancy", "gasp")),
            kernel=_kernel(cfg, design.shape[1], s.get("kernel")),
        ))
    shared = cfg.get("shared_design")
    try:
        return MultiSourceProblem(
            sources=sources,
            theta_range=_theta_range(cfg),
            measurement_bias=bool(cfg.get("measurement_bias", False)),
            shared_design=None if shared is None else io.read_matrix(cfg.input_path("shared_design")),
            discrepancy=_discrepancy(cfg, cfg.get("discrepancy", "gasp")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def mcmc_config(cfg: Config, seed=None) -> McmcConfig:
    S = cfg.number("S", 10000, lo=1, integer=True)
    S0 = cfg.number("S_0", 2000, lo=0, integer=True)
    if S0 >= S:
        raise cfg.error("S_0", f"burn-in {S0} must be below S = {S}")
    sd = cfg.get("sd_proposal")
    if sd is not None and (not isinstance(sd, list) or any(not isinstance(v, (int, float)) or v <= 0 for v in sd)):
        raise cfg.error("sd_proposal", "must be a list of positive numbers")
    init = cfg.get("initial_values")
    return McmcConfig(
        n_samples=S,
        burn_in=S0,
        thinning=cfg.number("thinning", 1, lo=1, integer=True),
        sd_proposal=None if sd is None else np.asarray(sd, dtype=float),
        initial_theta=None if init is None else np.asarray(init, dtype=float).reshape(-1),
        seed=cfg.number("seed", None, lo=0, integer=True) if seed is None else seed,
    )


def _interval(cfg: Config):
    iv = cfg.get("interval")
    if iv is None:
        return None
    if not isinstance(iv, list) or not iv or any(not isinstance(p, (int, float)) or not 0 < p < 1 for p in iv):
        raise cfg.error("interval", "must be a list of probabilities inside (0, 1)")
    if any(b < a for a, b in zip(iv, iv[1:])):
        raise cfg.error("interval", "probabilities must be ascending")
    return iv


def _method(cfg: Config):
    m = cfg.get("method", "post_sample")
    if m not in ("post_sample", "mle"):
        raise cfg.error("method", f"must be 'post_sample' or 'mle', got {m!r}")
    return m


# -------------------------------------------------------------- commands


def _suffix(name, chain):
    if chain is None:
        return name
    stem, dot, ext = name.rpartition(".")
    return f"{stem}_{chain}.{ext}"


def _calibrate_one(cfg_data, text, base, seed, chain):
    cfg = Config(cfg_data, text, Path(base))
    out = cfg.output_dir()
    problem = build_problem(cfg)
    if _method(cfg) == "mle":
        fit = run_mle(problem, n_restarts=cfg.number("num_initial_starts", 4, lo=1, integer=True),
                      initial=cfg.get("initial_values"), seed=seed)
        summary = {"method": "mle", **fit.summary(), "p_x": problem.p_x}
        io.write_json(out / _suffix("summary.json", chain), summary)
        return summary
    post = run_mcmc(problem, mcmc_config(cfg, seed))
    post.to_csv(out / _suffix("chain.csv", chain))
    summary = {"method": "post_sample", **post.summary(), "p_x": problem.p_x,
               "n_iterations": post.n_iterations, "seed": seed, "columns": post.columns}
    io.write_json(out / _suffix("summary.json", chain), summary)
    return summary


def _save_ms_posterior(path, post: MsPosterior):
    arrays = {"theta": post.theta, "accept_theta": post.accept_theta,
              "n_iterations": np.array(post.n_iterations), "measurement_bias": np.array(post.measurement_bias)}
    for l in range(len(post.sigma0_sq)):
        arrays[f"sigma0_sq_{l}"] = post.sigma0_sq[l]
        for name in ("log_beta", "log_eta", "theta_m"):
            v = getattr(post, name)[l]
            if v is not None:
                arrays[f"{name}_{l}"] = v
    for name in ("delta", "delta_log_beta", "delta_log_eta", "delta_sigma_sq"):
        v = getattr(post, name)
        if v is not None:
            arrays[name] = v
    np.savez(path, k=np.array(len(post.sigma0_sq)), **arrays)


def _load_ms_posterior(path) -> MsPosterior:
    with np.load(path, allow_pickle=False) as z:
        k = int(z["k"])
        get = lambda n: z[n] if n in z.files else None  # noqa: E731
        return MsPosterior(
            theta=z["theta"],
            log_beta=[get(f"log_beta_{l}") for l in range(k)],
            log_eta=[get(f"log_eta_{l}") for l in range(k)],
            sigma0_sq=[z[f"sigma0_sq_{l}"] for l in range(k)],
            theta_m=[get(f"theta_m_{l}") for l in range(k)],
            delta=get("delta"),
            delta_log_beta=get("delta_log_beta"),
            delta_sigma_sq=get("delta_sigma_sq"),
            delta_log_eta=get("delta_log_eta"),
            accept_theta=z["accept_theta"],
            n_iterations=int(z["n_iterations"]),
            measurement_bias=bool(z["measurement_bias"]),
        )


def cmd_calibrate(cfg: Config, chains: int = 1) -> dict:
    """Run MCMC or MLE; write ``chain.csv`` (MCMC only) and ``summary.json``."""
    if "sources" in cfg.data:
        problem = build_ms_problem(cfg)
        _method(cfg)
        post = ms_mcmc(problem, mcmc_config(cfg))
        out = cfg.output_dir()
        post.to_csv(out / "chain.csv")
        _save_ms_posterior(out / "ms_posterior.npz", post)
        summary = {"method": "post_sample", "multisource": True, **post.summary()}
        io.write_json(out / "summary.json", summary)
        return summary
    _method(cfg)
    seed = cfg.number("seed", None, lo=0, integer=True)
    build_problem(cfg)  # validate before spawning workers
    if chains <= 1:
        return _calibrate_one(cfg.data, cfg.text, str(cfg.base), seed, None)
    base_seed = 0 if seed is None else seed
    with ProcessPoolExecutor(max_workers=chains) as pool:
        futs = [pool.submit(_calibrate_one, cfg.data, cfg.text, str(cfg.base), base_seed + c, c + 1)
                for c in range(chains)]
        results = [f.result() for f in futs]
    return {"chains": results}


def cmd_predict(cfg: Config) -> dict:
    """Predict at ``test_inputs`` from the fit stored in ``output_dir``."""
    out = cfg.output_dir()
    chain = cfg.number("chain", None, lo=1, integer=True)
    summary_path = out / _suffix("summary.json", chain)
    if not summary_path.exists():
        raise FileNotFoundError(f"no fit found: {summary_path} is missing; run calibrate first")
    summary = json.loads(summary_path.read_text())
    x_test = io.read_matrix(cfg.input_path("test_inputs"))
    interval = _interval(cfg)
    X_testing = _optional_matrix(cfg, "test_trend")
    notes = []

    if summary.get("multisource"):
        problem = build_ms_problem(cfg)
        post = _load_ms_posterior(out / "ms_posterior.npz")
        pr = ms_predict(post, problem, x_test, max_draws=cfg.number("max_draws", 500, lo=1, integer=True))
        cols = [f"x_{j + 1}" for j in range(pr.x_test.shape[1])]
        data = [pr.x_test]
        for l in range(pr.reality.shape[0]):
            cols += [f"s{l + 1}_math_model_mean", f"s{l + 1}_mean", f"s{l + 1}_measurement_bias"]
            data += [pr.model[l][:, None], pr.reality[l][:, None], pr.source_delta[l][:, None]]
        if pr.delta is not None:
            cols.append("delta")
            data.append(pr.delta[:, None])
        io.write_matrix(out / "prediction.csv", np.hstack(data), header=cols)
        return {"rows": pr.x_test.shape[0], "notes": notes}

    problem = build_problem(cfg)
    if X_testing is not None and problem.q == 0:
        notes.append("trend basis for test inputs ignored: the fit has no trend")
        X_testing = None
    if X_testing is None and problem.q:
        raise cfg.error("test_trend", "required because the fit uses a trend")
    weights = _weights(cfg, "test_output_weights")
    interval_data = bool(cfg.get("interval_data", False))
    if summary["method"] == "mle":
        fit = MleResult(
            discrepancy=summary["discrepancy"],
            theta=np.asarray(summary["theta"], dtype=float),
            gamma=None if summary["gamma"] is None else np.asarray(summary["gamma"], dtype=float),
            eta=summary["eta"],
            theta_m=None if summary["theta_m"] is None else np.asarray(summary["theta_m"], dtype=float),
            sigma0_sq=summary["sigma0_sq"],
            loglik=summary["loglik"],
            lambda_z=summary["lambda_z"],
        )
        res = predict_plugin(fit, problem, x_test, X_testing, interval=interval,
                             interval_data=interval_data, test_weights=weights)
    else:
        post = io.read_posterior_csv(out / _suffix("chain.csv", chain), summary["discrepancy"], problem.p_x,
                                     summary.get("n_iterations"))
        res = predict_posterior(post, problem, x_test, X_testing, interval=interval,
                                interval_data=interval_data, test_weights=weights,
                                seed=cfg.number("seed", None, lo=0, integer=True),
                                max_draws=cfg.number("max_draws", None, lo=1, integer=True))
    notes += res.extra.get("notes", [])
    res.to_csv(out / "prediction.csv")
    return {"rows": res.x_test.shape[0], "n_draws": res.n_draws, "n_skipped": res.n_skipped, "notes": notes}


def cmd_emulate(cfg: Config) -> dict:
    """Fit an emulator to simulator runs; write the emulator file and a fit report."""
    x = io.read_matrix(cfg.input_path("simul_inputs"))
    y = io.read_matrix(cfg.input_path("simul_outputs"))
    if y.shape[0] != x.shape[0]:
        raise cfg.error("simul_outputs", f"{y.shape[0]} rows for {x.shape[0]} input rows")
    kw = dict(nugget=bool(cfg.get("nugget", False)), kernel=_kernel(cfg, x.shape[1]),
              n_restarts=cfg.number("n_restarts", 3, lo=1, integer=True),
              seed=cfg.number("seed", None, lo=0, integer=True))
    em = fit_scalar(x, y[:, 0], **kw) if y.shape[1] == 1 else fit_ppgasp(x, y, **kw)
    out = cfg.output_dir()
    name = cfg.get("emulator_file", "emulator.npz")
    save_emulator(em, out / name)
    report = em.report()
    io.write_json(out / "emulator_report.json", report)
    return report


def cmd_simulate(cfg: Config) -> dict:
    """Write a builtin test dataset to ``output_dir``."""
    name = cfg.require("testbed")
    if name not in TESTBEDS:
        raise cfg.error("testbed", f"unknown testbed {name!r}; choose from {', '.join(TESTBEDS)}")
    seed = cfg.number("seed", None, lo=0, integer=True)
    out = cfg.output_dir()
    files = []

    def put(fname, arr, header=None):
        io.write_matrix(out / fname, arr, header)
        files.append(fname)

    if name == "bayarri07":
        x = tb.BAYARRI07_INPUT.reshape(-1, 1)
        put("design.csv", x, ["x"])
        put("observations.csv", tb.BAYARRI07_OUTPUT, ["y1", "y2", "y3"])
        put("trend.csv", np.ones(x.shape[0]), ["h1"])
        put("truth.csv", tb.bayarri07_truth(x[:, 0]), ["reality"])
    elif name == "box":
        put("design.csv", tb.BOX_TIMES, ["t"])
        put("observations.csv", tb.BOX_OUTPUT, ["y1", "y2"])
    elif name == "lorenz96":
        scen = cfg.number("scenario", 1, lo=1, hi=2, integer=True)
        d = tb.lorenz96_scenario(scen, rng=seed, obs_fraction=cfg.number("obs_fraction", 0.05, lo=0, hi=1))
        put("design.csv", d["design"], ["t", "j"])
        put("observations.csv", d["observations"], ["y"])
        put("x0.csv", d["x0"].reshape(1, -1))
        put("reality.csv", d["reality"], [f"x_{j + 1}" for j in range(d["reality"].shape[1])])
    else:
        d = tb.multisource_simulate(n=cfg.number("n", 100, lo=2, integer=True),
                                    k=cfg.number("k", 5, lo=1, integer=True), rng=seed)
        put("design.csv", d["x"], ["x"])
        for l, y in enumerate(d["observations"]):
            put(f"observations_{l + 1}.csv", y, ["y"])
        truth = np.column_stack([d["reality"], d["delta"], d["biases"].T])
        put("truth.csv", truth, ["reality", "delta"] + [f"bias_{l + 1}" for l in range(d["biases"].shape[0])])
    return {"testbed": name, "files": files}


# ------------------------------------------------------------------ main


def _fail(code, kind, message, line=None):
    err = {"error": {"code": code, "kind": kind, "message": message, "line": line}}
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gpcalib", description="Calibration of computer models with GP discrepancy.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config", help="path to a JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
    parser.add_argument("--chains", type=int, default=1, help="independent seeded chains (calibrate only)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else _fail(EXIT_CONFIG, "config", "invalid command line")
    try:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = Config.load(args.config, args.overrides)
        if args.chains < 1:
            raise ConfigError("--chains must be >= 1")
        if args.command == "calibrate":
            result = cmd_calibrate(cfg, args.chains)
        elif args.command == "predict":
            result = cmd_predict(cfg)
        elif args.command == "emulate":
            result = cmd_emulate(cfg)
        else:
            result = cmd_simulate(cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.line)
    except EmulatorFormatError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (OptimizerFailure, NonFiniteModelError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    for note in (result.get("notes") or []) if isinstance(result, dict) else []:
        sys.stderr.write(f"warning: {note}\n")
    sys.stdout.write(json.dumps(result, default=str) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
