"""Command-line front end: ``pnlss {generate,fit,forecast,benchmark,vectorfield,recover}``.

Exit codes: 0 success, 1 numerical or runtime failure, 2 usage error.
Log verbosity follows the ``PNLSS_LOG`` environment variable (e.g. ``INFO``).
"""
import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, _backend, dynamics, evaluation, learning, model
from .errors import InvalidInputError, NumericalError, PnlssError, SchemaError
from .features import RBF, RIDGE
from .inference import run_inference

log = logging.getLogger("pnlss")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _snapshot(out, args, extra=None):
    """Resolved configuration next to the primary output."""
    p = Path(out)
    snap = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    snap.update({"command": args.command, "version": __version__, "backend": _backend.backend_name()})
    if extra:
        snap.update(extra)
    path = p.with_name(p.name.split(".")[0] + ".config.json")
    with open(path, "w") as fh:
        json.dump(snap, fh, indent=1, default=str)
    return path


def _floats(text, name):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


def _grid(spec, dim):
    """``lo:hi:n`` (same for every axis) or one such triple per axis separated by commas."""
    parts = spec.split(",")
    if len(parts) not in (1, dim):
        raise UsageError(f"--grid needs 1 or {dim} lo:hi:n specs")
    axes = []
    for p in parts * (dim if len(parts) == 1 else 1):
        try:
            lo, hi, n = p.split(":")
            axes.append(np.linspace(float(lo), float(hi), int(n)))
        except ValueError:
            raise UsageError(f"--grid: bad axis spec {p!r}, expected lo:hi:n") from None
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _system(args):
    if args.system == "van_der_pol":
        return dynamics.OdeSystem.van_der_pol(args.gamma)
    if args.system == "lorenz":
        return dynamics.OdeSystem.lorenz(args.sigma, args.rho, args.beta)
    return dynamics.OdeSystem.fitzhugh_nagumo()


def _gen_spec(args, seed, x0=None):
    system = _system(args)
    _, span, _ = dynamics.PROTOCOLS[system.name]
    t_span = (args.t_start if args.t_start is not None else span[0],
              args.t_end if args.t_end is not None else span[1])
    if x0 is None and args.x0 is not None:
        x0 = _floats(args.x0, "x0")
    return dynamics.GenerationSpec(system, x0, t_span, args.samples, args.step, args.noise_var,
                                   args.standardize, seed, args.split)


def cmd_generate(args):
    spec = _gen_spec(args, args.seed)
    ds = dynamics.generate(spec)
    out = args.out or f"{spec.system.name}.csv"
    dynamics.save_dataset(out, ds, args.clean_out)
    _snapshot(out, args)
    print(f"{out}: {ds.observations.shape[0]} x {ds.observations.shape[1]} ({spec.system.name}, "
          f"t in [{spec.t_span[0]:g}, {spec.t_span[1]:g}], noise var {spec.noise_variance:g}, seed {spec.seed})")
    return EXIT_OK


def _load_data(path, split=None):
    Y, meta = dynamics.load_dataset(path)
    if split is None:
        split = meta.get("split_index")
    if split is not None:
        split = int(split)
        if not 1 <= split <= Y.shape[0]:
            raise UsageError(f"split {split} outside 1..{Y.shape[0]}")
    return Y, meta, split


def cmd_fit(args):
    Y, meta, split = _load_data(args.data, args.train_split)
    train = Y[:split] if split else Y
    D = args.latent_dim or train.shape[1]
    C = d = None
    if args.fix_C_identity:
        if D != train.shape[1]:
            raise UsageError("--fix-C-identity needs --latent-dim equal to the data width")
        C, d = np.eye(D), np.zeros(D)
    L = 0 if args.kind == "linear" else args.kernels
    kind = RBF if args.kind == "rbf" else RIDGE
    config = learning.EmConfig(max_iterations=args.max_iter, convergence_ratio=args.conv_ratio,
                               kernel_opt_max_steps=args.kernel_steps, seed=args.seed)
    params, trace = learning.fit(train, config, latent_dim=D, n_kernels=L, kind=kind, C=C, d=d)
    out = args.out
    model.save(params, out)
    trace_path = args.trace or str(Path(out).with_name("trace.csv"))
    trace.to_csv(trace_path)
    _snapshot(out, args, {"resolved_latent_dim": D, "resolved_kernels": L, "train_rows": train.shape[0],
                          "termination": trace.termination})
    print(f"{out}: {args.kind} D_x={D} L={L}, {len(trace)} iterations, best log-ML "
          f"{max(trace.log_ml):.6f} ({trace.termination}); trace in {trace_path}")
    for w in trace.warnings:
        log.warning(w)
    if trace.termination == learning.NUMERICAL_FAILURE:
        print("fit stopped on a numerical failure; last valid parameters saved", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_forecast(args):
    params = model.load(args.model)
    Y, meta, split = _load_data(args.data, args.train_split)
    if split is None:
        split = Y.shape[0]
    post = run_inference(params, Y[:split], smooth=False)
    fc = evaluation.forecast(params, post.filter_density(post.T), args.horizon, args.interval)
    Dy = params.obs_dim
    header = (["step"] + [f"mean_{i + 1}" for i in range(Dy)] + [f"lower_{i + 1}" for i in range(Dy)]
              + [f"upper_{i + 1}" for i in range(Dy)])
    rows = [[split + h + 1, *fc.obs_mean[h], *fc.lower[h], *fc.upper[h]] for h in range(fc.horizon)]
    _write_rows(args.out, header, rows)
    extra = {"interval_level": args.interval, "smape_zero_denominator": "term counts as 0"}
    truth = Y[split:]
    if args.truth:
        truth = dynamics.read_csv(args.truth)[0][split:]
    if truth.shape[0]:
        n = min(truth.shape[0], fc.horizon)
        if n < fc.horizon:
            log.warning("ground truth covers only %d of %d forecast steps; scoring the overlap", n, fc.horizon)
        score = evaluation.smape(truth[:n], fc.obs_mean[:n])
        extra["smape"] = score
        print(f"SMAPE over {n} steps: {score:.6f}")
    _snapshot(args.out, args, extra)
    print(f"{args.out}: {fc.horizon} forecast steps at {args.interval:g} level")
    return EXIT_OK


def cmd_benchmark(args):
    kernel_counts = [int(v) for v in _floats(args.kernels, "kernels")]
    datasets = []
    for k in range(args.trajectories):
        seed = args.seed + k
        system = _system(args)
        base = np.array(dynamics.PROTOCOLS[system.name][0])
        x0 = base + np.random.default_rng(seed).normal(0.0, 1.0, base.size) if k else base
        spec = _gen_spec(args, seed, x0=tuple(x0))
        datasets.append((f"{system.name}-{seed}", dynamics.generate(spec).observations))
    config = learning.EmConfig(max_iterations=args.max_iter, convergence_ratio=args.conv_ratio,
                               kernel_opt_max_steps=args.kernel_steps, seed=args.seed)
    D = args.latent_dim or datasets[0][1].shape[1]
    results = evaluation.benchmark_pnlss_vs_rbf(datasets, kernel_counts, config, latent_dim=D,
                                                em_iterations=args.em_iters,
                                                convergence_run=args.convergence_run, jobs=args.jobs)
    rows = [r.as_row() for r in results]
    header = list(rows[0])
    _write_rows(args.out, header, [[r[h] for h in header] for r in rows])
    summary = _benchmark_summary(results)
    with open(Path(args.out).with_suffix(".summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    _snapshot(args.out, args, {"resolved_latent_dim": D})
    print(f"{'method':>6} {'L':>4} {'s/iter mean':>12} {'2SD':>10} {'log-ML mean':>14}")
    for s in summary:
        print(f"{s['method']:>6} {s['n_kernels']:>4} {s['seconds_per_iteration_mean']:>12.4f} "
              f"{s['seconds_per_iteration_2sd']:>10.4f} {s['log_ml_mean']:>14.4f}")
    failed = [r for r in results if r.error]
    return EXIT_FAILURE if failed and len(failed) == len(results) else EXIT_OK


def _benchmark_summary(results):
    out = []
    keys = sorted({(r.mode, r.method, r.n_kernels) for r in results})
    for mode, method, L in keys:
        cell = [r for r in results if (r.mode, r.method, r.n_kernels) == (mode, method, L) and not r.error]
        t = np.array([r.seconds_per_iteration for r in cell])
        ll = np.array([r.log_ml for r in cell])
        out.append({"mode": mode, "method": method, "n_kernels": L, "runs": len(cell),
                    "seconds_per_iteration_mean": float(t.mean()) if t.size else float("nan"),
                    "seconds_per_iteration_2sd": float(2 * t.std(ddof=1)) if t.size > 1 else 0.0,
                    "log_ml_mean": float(ll.mean()) if ll.size else float("nan")})
    return out


def cmd_vectorfield(args):
    params = model.load(args.model)
    D = params.latent_dim
    vf = evaluation.vector_field(params, _grid(args.grid, D))
    header = (["stage", "kernel"] + [f"x{i + 1}" for i in range(D)] + [f"dx{i + 1}" for i in range(D)])
    rows = []
    for s in range(vf.stages.shape[0]):
        k = -1 if s == 0 else int(vf.order[s - 1])
        rows.extend([s, k, *x, *dx] for x, dx in zip(vf.points, vf.stages[s]))
    _write_rows(args.out, header, rows)
    _snapshot(args.out, args)
    print(f"{args.out}: {len(rows)} rows ({vf.points.shape[0]} points x {vf.stages.shape[0]} stages)")
    return EXIT_OK


def cmd_recover(args):
    params = model.load(args.model)
    D = params.latent_dim
    traj, diverged = evaluation.recover_dynamics(params, _grid(args.grid, D), args.steps)
    header = ["trajectory", "step", "diverged"] + [f"x{i + 1}" for i in range(D)]
    rows = [[p, t, int(diverged[p]), *traj[p, t]] for p in range(traj.shape[0]) for t in range(traj.shape[1])]
    _write_rows(args.out, header, rows)
    _snapshot(args.out, args, {"diverged": int(diverged.sum())})
    print(f"{args.out}: {traj.shape[0]} trajectories x {args.steps} steps, {int(diverged.sum())} diverged")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_system_flags(p, require):
    p.add_argument("--system", required=require, choices=["van_der_pol", "fitzhugh_nagumo", "lorenz"],
                   default=None if require else "lorenz")
    p.add_argument("--gamma", type=float, default=1.0, help="Van der Pol damping")
    p.add_argument("--sigma", type=float, default=10.0)
    p.add_argument("--rho", type=float, default=28.0)
    p.add_argument("--beta", type=float, default=8.0 / 3.0)
    p.add_argument("--x0", help="initial state, comma separated")
    p.add_argument("--t-start", type=float)
    p.add_argument("--t-end", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--step", type=float, default=dynamics.DEFAULT_STEP, help="RK4 internal step")
    p.add_argument("--noise-var", type=float, default=1e-4)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--split", type=int, help="train/test split index recorded in the metadata")
    p.add_argument("--seed", type=int, default=0)


def _add_em_flags(p, max_iter=100):
    p.add_argument("--max-iter", type=int, default=max_iter)
    p.add_argument("--conv-ratio", type=float, default=1e-4)
    p.add_argument("--kernel-steps", type=int, default=50, help="L-BFGS-B iterations per M-step")


def build_parser():
    parser = argparse.ArgumentParser(prog="pnlss", description="Projected nonlinear state-space models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of default flag values for the subcommand")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("generate", help="simulate an ODE system and write a noisy dataset")
    _add_system_flags(p, require=True)
    p.add_argument("--out")
    p.add_argument("--clean-out", help="also write the noise-free trajectory here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="learn a model with EM")
    p.add_argument("data")
    p.add_argument("--kind", choices=["linear", "pnlss", "rbf"], default="pnlss")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--kernels", type=int, default=10)
    p.add_argument("--fix-C-identity", action="store_true", help="fix C = I and d = 0")
    p.add_argument("--train-split", type=int, help="fit on the first N rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.pnlss.json")
    p.add_argument("--trace", help="EM trace CSV (default: trace.csv next to the model)")
    _add_em_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("forecast", help="filter a dataset and forecast ahead")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--train-split", type=int, help="filter through the first N rows (default: all)")
    p.add_argument("--interval", type=float, default=0.95)
    p.add_argument("--truth", help="CSV to score against instead of the data rows after the split")
    p.add_argument("--out", default="forecast.csv")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("benchmark", help="ridge vs RBF kernels: time per EM iteration and log-ML")
    _add_system_flags(p, require=False)
    p.add_argument("--kernels", default="8,16,32")
    p.add_argument("--trajectories", type=int, default=10)
    p.add_argument("--em-iters", type=int, default=50)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--convergence-run", action="store_true", help="also fit each cell to convergence")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="benchmark.csv")
    _add_em_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("vectorfield", help="one-step field f(x) - x with per-kernel stages")
    p.add_argument("model")
    p.add_argument("--grid", default="-3:3:25")
    p.add_argument("--out", default="vectorfield.csv")
    p.set_defaults(func=cmd_vectorfield)

    p = sub.add_parser("recover", help="deterministic rollouts from a grid of initial points")
    p.add_argument("model")
    p.add_argument("--grid", default="-2:2:5")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", default="recover.csv")
    p.set_defaults(func=cmd_recover)
    return parser


def _join_negative_values(argv, flags=("--grid", "--x0")):
    """Let ``--grid -3:3:25`` through; argparse would read ``-3:3:25`` as a flag."""
    out = []
    it = iter(argv)
    for tok in it:
        if tok in flags:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def _parse(parser, argv):
    argv = _join_negative_values(sys.argv[1:] if argv is None else list(argv))
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                defaults = json.load(fh)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        # re-parse with the file as defaults so explicit flags still win
        parser.subcommands[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    level = getattr(logging, os.environ.get("PNLSS_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = _parse(parser, argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (InvalidInputError, SchemaError, OSError) as exc:
        print(f"pnlss {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, PnlssError, np.linalg.LinAlgError) as exc:
        print(f"pnlss {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
