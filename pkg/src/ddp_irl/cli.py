"""Command-line experiments: ``ddp-irl <verb> --config cfg.json --out dir``.

Every verb reads one JSON config (unknown keys are rejected), writes CSV
traces with 17 significant digits and JSON results, and finishes with a
``manifest.json`` that lists each emitted file with its sha256.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 check threshold
violated.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context

import numpy as np

log = logging.getLogger("ddp_irl")

VERBS = ("solve", "grad-check", "irl-open", "irl-closed", "ioc-recover", "rank-sweep",
         "noise-eval")
SOLVER_NAMES = ("ipddp", "active-set", "unconstrained")
FLAVORS = ("ip", "active-set", "barrier", "unconstrained", "pdp-oracle")
OPEN_LOOP_ETA = {"cartpole": 1e-3, "quadrotor": 1e-4, "arm2link": 1e-2, "rocket": 1e-4,
                 "scalar_example": 2.0, "lqr_ioc": 1e-2}

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str = None
    benchmark: str = "scalar_example"
    overrides: dict = field(default_factory=dict)
    constrained: bool = True
    solver: str = "ipddp"
    flavor: list = None                 # grad-check: flavors compared with the oracle
    theta: list = None                  # evaluation point, default theta*
    theta0_scale: float = 0.2           # learners start at theta* (1 + scale * U[-1, 1])
    seeds: list = field(default_factory=lambda: [0])
    sigma: list = field(default_factory=lambda: [0.0])
    sample: object = None               # None, a length, or explicit stage indices
    lengths: list = None                # rank-sweep sample lengths
    mus: list = field(default_factory=lambda: [1e-2, 1e-4, 1e-6])
    mu_demo: float = None               # ioc demos: barrier weight of the demonstration
    tol: float = 1e-9
    mu_floor: float = 1e-8
    t_max: int = None
    eta: float = None
    backtrack: bool = False
    check: bool = False
    threshold: float = 1e-5
    out: str = None

    def validate(self):
        from .benchmarks import NAMES
        if self.kind not in VERBS:
            raise ConfigError(f"kind: expected one of {VERBS}, got {self.kind!r}")
        if self.benchmark not in NAMES:
            raise ConfigError(f"benchmark: unknown name {self.benchmark!r}")
        if self.solver not in SOLVER_NAMES:
            raise ConfigError(f"solver: expected one of {SOLVER_NAMES}")
        if self.flavor is not None:
            if isinstance(self.flavor, str):
                self.flavor = [self.flavor]
            bad = [f for f in self.flavor if f not in FLAVORS]
            if bad:
                raise ConfigError(f"flavor: unknown {bad}")
        if not isinstance(self.overrides, dict):
            raise ConfigError("overrides: expected an object")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds: expected a nonempty list of integers")
        if isinstance(self.sigma, (int, float)):
            self.sigma = [self.sigma]
        if any(s < 0 for s in self.sigma):
            raise ConfigError("sigma: noise levels must be non-negative")
        if any(m <= 0 for m in self.mus):
            raise ConfigError("mus: barrier weights must be positive")
        if self.tol <= 0 or self.mu_floor <= 0:
            raise ConfigError("tol, mu_floor: must be positive")
        if self.theta0_scale < 0:
            raise ConfigError("theta0_scale: must be non-negative")
        if self.eta is not None and self.eta <= 0:
            raise ConfigError("eta: must be positive")
        if self.t_max is not None and self.t_max < 0:
            raise ConfigError("t_max: must be non-negative")
        return self


def config_load(path=None, text=None, kind=None):
    """Parse a JSON config; unknown keys and bad values raise ConfigError."""
    if text is None:
        if path is None:
            text = "{}"
        else:
            try:
                with open(path) as fh:
                    text = fh.read()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error at line {e.lineno} column {e.colno}: "
                          f"{e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if kind is not None:
        if raw.get("kind", kind) != kind:
            raise ConfigError(f"kind: config says {raw['kind']!r} but verb is {kind!r}")
        raw["kind"] = kind
    return ExperimentConfig(**raw).validate()


# --------------------------------------------------------------------------
# output helpers

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


class Output:
    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.files = []

    def csv(self, name, header, rows):
        path = os.path.join(self.root, name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)

    def json(self, name, obj):
        path = os.path.join(self.root, name)
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        self.files.append(name)

    def manifest(self, cfg):
        import jax
        import scipy
        cfg_d = asdict(cfg)
        blob = json.dumps(cfg_d, sort_keys=True).encode()
        entries = []
        for name in self.files:
            with open(os.path.join(self.root, name), "rb") as fh:
                entries.append({"file": name, "sha256": hashlib.sha256(fh.read()).hexdigest()})
        man = {"config": cfg_d, "config_sha256": hashlib.sha256(blob).hexdigest(),
               "versions": {"python": platform.python_version(), "numpy": np.__version__,
                            "scipy": scipy.__version__, "jax": jax.__version__},
               "files": entries}
        with open(os.path.join(self.root, "manifest.json"), "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return man


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


# --------------------------------------------------------------------------
# shared setup

def _setup(cfg):
    from .benchmarks import make_system
    from .solver import IpddpConfig
    p, spec = make_system(cfg.benchmark, cfg.overrides, constrained=cfg.constrained)
    scfg = IpddpConfig(tol=cfg.tol, mu_floor=cfg.mu_floor)
    theta = spec.theta_star if cfg.theta is None else np.asarray(cfg.theta, float)
    if theta.shape != spec.theta_star.shape:
        raise ConfigError(f"theta: expected {spec.theta_star.size} components")
    return p, spec, scfg, theta


def _solve(p, theta, x0, solver, scfg):
    from .solver import solve_active_set, solve_ipddp, solve_unconstrained
    fn = {"ipddp": solve_ipddp, "active-set": solve_active_set,
          "unconstrained": solve_unconstrained}[solver]
    return fn(p, theta, x0, scfg)


def _indices(cfg, N):
    if cfg.sample is None:
        return np.arange(N)
    if isinstance(cfg.sample, int):
        if not 1 <= cfg.sample <= N:
            raise ConfigError(f"sample: length must be within 1..{N}")
        return np.arange(cfg.sample)
    idx = np.asarray(cfg.sample, int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= N:
        raise ConfigError(f"sample: indices must lie in 0..{N - 1}")
    return idx


def _theta0(spec, scale, seed):
    rng = np.random.default_rng(10_000 + seed)
    th = spec.theta_star * (1 + scale * rng.uniform(-1, 1, spec.n_theta))
    return spec.clamp(th)


def _closed_solver(cfg):
    return "unconstrained" if cfg.solver == "unconstrained" else "ipddp"


# --------------------------------------------------------------------------
# verbs

def run_solve(cfg, out):
    p, spec, scfg, theta = _setup(cfg)
    t0 = time.perf_counter()
    res = _solve(p, theta, spec.x0, cfg.solver, scfg)
    wall = time.perf_counter() - t0
    t = res.traj
    nx, nu = p.n_x, p.n_u
    header = ["k"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
    rows = []
    for k in range(t.N + 1):
        u = t.controls[k] if k < t.N else np.full(nu, np.nan)
        rows.append([k, *t.states[k], *u])
    out.csv("trajectory.csv", header, rows)
    out.csv("iterations.csv", ["iteration", "mu", "merit", "cost", "alpha", "reg"],
            [[r[c] for c in ("iteration", "mu", "merit", "cost", "alpha", "reg")]
             for r in res.log])
    from .problem import evaluate_cost
    out.json("result.json", {"cost": evaluate_cost(p, t, theta), "merit": res.merit,
                             "iterations": res.iterations, "mu": res.mu, "wall_s": wall})
    return EXIT_OK


def run_grad_check(cfg, out):
    from .gradient import pdp_oracle_gradient, trajectory_gradient
    p, spec, scfg, theta = _setup(cfg)
    flavors = cfg.flavor or (["ip", "barrier", "active-set"] if p.has_constraints
                             else ["unconstrained"])
    rows, timing, worst = [], [], 0.0
    ip_res = as_res = None
    for fl in flavors:
        if fl == "active-set":
            as_res = as_res or _solve(p, theta, spec.x0, "active-set", scfg)
            res = as_res
        elif fl == "unconstrained":
            res = _solve(p, theta, spec.x0, "unconstrained", scfg)
        else:
            ip_res = ip_res or _solve(p, theta, spec.x0, "ipddp", scfg)
            res = ip_res
        t0 = time.perf_counter()
        G = trajectory_gradient(p, res.traj, theta, fl, mu=res.mu, active=res.active)
        t1 = time.perf_counter()
        if fl == "active-set":
            O = pdp_oracle_gradient(p, res.traj, theta, active=res.active)
        elif fl == "unconstrained" or not p.has_constraints:
            O = pdp_oracle_gradient(p.without_constraints(), res.traj, theta)
        else:
            O = pdp_oracle_gradient(p, res.traj, theta, mu=res.mu)
        t2 = time.perf_counter()
        for j, name in enumerate(spec.theta_names):
            d = max(np.abs(G.dx[..., j] - O.dx[..., j]).max(),
                    np.abs(G.du[..., j] - O.du[..., j]).max())
            worst = max(worst, d)
            rows.append([fl, name, d])
        timing.append([fl, t1 - t0, t2 - t1])
    out.csv("grad_diff.csv", ["flavor", "component", "max_abs_diff"], rows)
    out.csv("timing.csv", ["flavor", "ddp_s", "oracle_s"], timing)
    out.json("result.json", {"max_abs_diff": worst, "threshold": cfg.threshold})
    if cfg.check and worst >= cfg.threshold:
        log.error("gradient difference %.3e exceeds %.1e", worst, cfg.threshold)
        return EXIT_CHECK
    return EXIT_OK


def _closed_demo(cfg, p, spec, scfg, sigma, seed):
    from .irl_closed import NoiseModel, generate_closed_loop_demo
    return generate_closed_loop_demo(p, spec.theta_star, spec.x0, NoiseModel(sigma), seed,
                                     _indices(cfg, p.N), _closed_solver(cfg), scfg)


def _trace_rows(trace, names, keys):
    rows = []
    for r in trace:
        rows.append([r.get(k, np.nan) for k in keys] + list(r["theta"]))
    return rows, list(keys) + [f"theta_{n}" for n in names]


def _open_seed(cfg, seed):
    from .irl_open import OpenLoopConfig, OpenLoopDemo, run_open_loop
    p, spec, scfg, _ = _setup(cfg)
    demo = _closed_demo(cfg, p, spec, scfg, cfg.sigma[0], seed)
    eta = cfg.eta or OPEN_LOOP_ETA[cfg.benchmark]
    ocfg = OpenLoopConfig(_theta0(spec, cfg.theta0_scale, seed), eta, spec.theta_lo,
                          spec.theta_hi, t_max=200 if cfg.t_max is None else cfg.t_max,
                          backtrack=cfg.backtrack, solver=cfg.solver, solver_cfg=scfg)
    res = run_open_loop(p, [OpenLoopDemo.from_closed_loop(demo)], ocfg, spec.theta_star)
    return seed, res.trace, spec.theta_names


def _closed_seed(cfg, seed):
    from .irl_closed import LMConfig, run_closed_loop
    p, spec, scfg, _ = _setup(cfg)
    demo = _closed_demo(cfg, p, spec, scfg, cfg.sigma[0], seed)
    lcfg = LMConfig(_theta0(spec, cfg.theta0_scale, seed), spec.theta_lo, spec.theta_hi,
                    t_max=50 if cfg.t_max is None else cfg.t_max,
                    solver=_closed_solver(cfg), solver_cfg=scfg)
    res = run_closed_loop(p, [demo], lcfg, spec.theta_star)
    return seed, res.trace, spec.theta_names, demo.to_json()


def _map_seeds(fn, cfg, jobs):
    """Run ``fn(cfg, seed)`` for every seed; results come back in seed order."""
    if jobs <= 1 or len(cfg.seeds) == 1:
        return [fn(cfg, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as ex:
        return list(ex.map(fn, [cfg] * len(cfg.seeds), cfg.seeds))


def run_irl_open(cfg, out, jobs=1):
    for seed, trace, names in _map_seeds(_open_seed, cfg, jobs):
        rows, header = _trace_rows(trace, names, ("t", "loss_ol", "grad_norm", "eta",
                                                  "param_residual"))
        out.csv(f"trace_seed{seed}.csv", header, rows)
    return EXIT_OK


def run_irl_closed(cfg, out, jobs=1):
    for seed, trace, names, demo in _map_seeds(_closed_seed, cfg, jobs):
        rows, header = _trace_rows(trace, names, ("t", "loss_cl", "loss_ol", "eta_prime",
                                                  "step_norm", "rank", "param_residual"))
        out.csv(f"trace_seed{seed}.csv", header, rows)
        out.json(f"demo_seed{seed}.json", demo)
    return EXIT_OK


def run_ioc_recover(cfg, out):
    from .ioc_linear import build_recovery_system, generate_ioc_demo, recover_parameters
    p, spec, scfg, theta = _setup(cfg)
    mu_demo = cfg.mu_demo or min(cfg.mus)
    traj = generate_ioc_demo(p, theta, spec.x0, mu_demo, scfg)
    m = len(_indices(cfg, p.N)) - 1
    results, rows = {}, []
    for mu in cfg.mus:
        rec = recover_parameters(build_recovery_system(traj, p, mu, m), p.n_theta, p.n_x)
        d = rec.theta - theta
        results[format(mu, "g")] = {**rec.to_json(), "param_residual": float(d @ d)}
        rows.append([mu, rec.rank, float(d @ d), rec.residual_norm])
    out.csv("recovery.csv", ["mu", "rank", "param_residual", "residual_norm"], rows)
    out.json("recovery.json", {"mu_demo": mu_demo, "length": m + 1, "results": results})
    return EXIT_OK


def run_rank_sweep(cfg, out):
    p, spec, scfg, theta = _setup(cfg)
    lengths = cfg.lengths or list(range(1, p.N))
    if cfg.benchmark == "lqr_ioc":
        from .ioc_linear import generate_ioc_demo, rank_profile
        demos = {mu: generate_ioc_demo(p, theta, spec.x0, cfg.mu_demo or mu, scfg)
                 for mu in cfg.mus}
        rows = rank_profile(p, demos, lengths, theta)
        out.csv("rank_sweep.csv", ["length", "mu", "rank", "residual"],
                [[r["length"], r["mu"], r["rank"], r["residual"]] for r in rows])
        return EXIT_OK
    from .irl_closed import LMConfig, run_closed_loop
    seed = cfg.seeds[0]
    full = _closed_demo(cfg, p, spec, scfg, cfg.sigma[0], seed)
    rows = []
    for L in lengths:
        demo = full.with_indices(np.arange(L))
        lcfg = LMConfig(_theta0(spec, cfg.theta0_scale, seed), spec.theta_lo, spec.theta_hi,
                        t_max=50 if cfg.t_max is None else cfg.t_max,
                        solver=_closed_solver(cfg), solver_cfg=scfg)
        last = run_closed_loop(p, [demo], lcfg, spec.theta_star).trace[-1]
        rows.append([L, last["rank"], last["loss_cl"], last["param_residual"]])
    out.csv("rank_sweep.csv", ["length", "rank", "loss_cl", "param_residual"], rows)
    return EXIT_OK


def _noise_seed(cfg, seed):
    from .benchmarks import suboptimality_gap, trajectory_residual
    from .irl_closed import LMConfig, run_closed_loop
    from .irl_open import OpenLoopConfig, OpenLoopDemo, run_open_loop
    from .problem import rollout
    p, spec, scfg, _ = _setup(cfg)
    solver = _closed_solver(cfg)
    truth = _solve(p, spec.theta_star, spec.x0, solver, scfg).traj
    rows = []
    for sigma in cfg.sigma:
        demo = _closed_demo(cfg, p, spec, scfg, sigma, seed)
        th0 = _theta0(spec, cfg.theta0_scale, seed)
        ol = run_open_loop(p, [OpenLoopDemo.from_closed_loop(demo)], OpenLoopConfig(
            th0, cfg.eta or OPEN_LOOP_ETA[cfg.benchmark], spec.theta_lo, spec.theta_hi,
            t_max=200 if cfg.t_max is None else cfg.t_max, backtrack=cfg.backtrack,
            solver=solver, solver_cfg=scfg), spec.theta_star)
        cl = run_closed_loop(p, [demo], LMConfig(
            th0, spec.theta_lo, spec.theta_hi, t_max=50 if cfg.t_max is None else cfg.t_max,
            solver=solver, solver_cfg=scfg), spec.theta_star)
        for method, th in (("open", ol.theta), ("closed", cl.theta)):
            # executed plan: optimal controls under the learned parameters on the true system
            ctrl = _solve(p, th, spec.x0, solver, scfg).traj.controls
            plan = rollout(p, spec.x0, ctrl, spec.theta_star)
            d = th - spec.theta_star
            rows.append([sigma, seed, method, float(d @ d), trajectory_residual(truth, plan),
                         suboptimality_gap(plan, truth, p, spec.theta_star)])
    return rows


def run_noise_eval(cfg, out, jobs=1):
    rows = [r for chunk in _map_seeds(_noise_seed, cfg, jobs) for r in chunk]
    out.csv("noise_eval.csv", ["sigma", "seed", "method", "param_residual",
                               "traj_residual", "suboptimality"], rows)
    summary = {}
    for method in ("open", "closed"):
        for sigma in cfg.sigma:
            v = [r[3] for r in rows if r[2] == method and r[0] == sigma]
            summary[f"{method}@{sigma:g}"] = {"median_param_residual": float(np.median(v))}
    out.json("summary.json", summary)
    return EXIT_OK


_RUNNERS = {"solve": run_solve, "grad-check": run_grad_check, "irl-open": run_irl_open,
            "irl-closed": run_irl_closed, "ioc-recover": run_ioc_recover,
            "rank-sweep": run_rank_sweep, "noise-eval": run_noise_eval}
_PARALLEL = {"irl-open", "irl-closed", "noise-eval"}


def run_experiment(cfg, out_dir=None, jobs=1):
    """Run one configured experiment; returns (exit code, manifest or None)."""
    root = out_dir or cfg.out or os.environ.get("DDP_IRL_OUT") or "ddp_irl_out"
    out = Output(root)
    fn = _RUNNERS[cfg.kind]
    code = fn(cfg, out, jobs) if cfg.kind in _PARALLEL else fn(cfg, out)
    return code, out.manifest(cfg)


def build_parser():
    ap = argparse.ArgumentParser(prog="ddp-irl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", help="output directory (default $DDP_IRL_OUT)")
        sp.add_argument("--seed", type=int, help="replace the configured seed list")
        sp.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .linalg import SingularMatrixError
    from .problem import DivergenceError
    from .solver import SolverError
    try:
        cfg = config_load(args.config, kind=args.verb)
        if args.seed is not None:
            cfg.seeds = [args.seed]
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        code, man = run_experiment(cfg, args.out, args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, DivergenceError, SingularMatrixError) as e:
        print(f"solver failure in {args.verb}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps({"exit": code, "files": [f["file"] for f in man["files"]]}))
    return code


if __name__ == "__main__":
    sys.exit(main())
