"""Command-line entry point.

Subcommands: mc, gams, lyapunov, collect, gain.  All outputs land under
--out-dir with fixed filenames; the resolved configuration is echoed to
config.json for provenance.  Exit codes: 0 success, 2 usage, 3 numerical
failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dynsys, genmodel, lyapunov, splitting, stats
from .dynsys import InitialConditionSampler, SystemKind, SystemSpec
from .errors import NumericalError, SplitstreamError, WeightsLoadError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

DEFAULT_THRESHOLD = {SystemKind.L96: 1300.0, SystemKind.KSE: 0.5}
DEFAULT_CHECKPOINTS = {SystemKind.L96: 64, SystemKind.KSE: 45}
DEFAULT_EPSILON = {SystemKind.L96: 0.871, SystemKind.KSE: 0.1}


def _spec_for(system: str) -> SystemSpec:
    if system == "l96":
        return SystemSpec.l96_default()
    if system == "kse":
        return SystemSpec.kse_default()
    raise argparse.ArgumentTypeError(f"unknown system {system!r}")


def _default_threads() -> int:
    env = os.environ.get("SPLITSTREAM_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _write_config(args: argparse.Namespace, out_dir: Path) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, default=str))


def _thresholds_for(spec: SystemSpec, sampler_seed: int, n: int = 200,
                    grid_size: int = 20) -> np.ndarray:
    """Deterministic threshold grid from a small unbiased pre-run."""
    sampler = InitialConditionSampler.for_spec(spec, sampler_seed)
    q = stats.mc_final_qois(spec, sampler, n)
    return stats.log_spaced_thresholds(q, n=grid_size, lo_quantile=0.5)


class _QoiPath:
    """Checkpoint-sampled QoI record; quacks like a Trajectory for
    compute_target_path."""

    def __init__(self, times: np.ndarray, qoi_series: np.ndarray):
        self.times = times
        self.qoi_series = qoi_series


def _target_path(spec: SystemSpec, threshold: float, checkpoints: np.ndarray,
                 n_runs: int, seed: int) -> splitting.TargetPath:
    """Mean-QoI target path from ``n_runs`` unbiased simulations."""
    model = dynsys.make_model(spec)
    sampler = InitialConditionSampler.for_spec(spec, seed)
    states = sampler.sample_batch(n_runs)
    times = np.concatenate([[0.0], checkpoints])
    qois = np.empty((n_runs, len(times)))
    qois[:, 0] = model.qoi(states)
    for i in range(1, len(times)):
        states = model.advance(states, float(times[i - 1]), float(times[i]))
        qois[:, i] = model.qoi(states)
    trajs = [_QoiPath(times, qois[j]) for j in range(n_runs)]
    return splitting.compute_target_path(trajs, threshold, times)


def build_gams_inputs(spec: SystemSpec, threshold: float, n_checkpoints: int,
                      target_runs: int, seed: int):
    """Checkpoint schedule plus target path for a splitting run."""
    checkpoints = lyapunov.checkpoint_times(spec.final_time, spec.dt, n_checkpoints)
    target = _target_path(spec, threshold, checkpoints, target_runs, seed)
    return splitting.build_schedule(checkpoints, target)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_mc(args) -> int:
    spec = _spec_for(args.system)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(args, out)
    thresholds = _thresholds_for(spec, args.seed)
    a = DEFAULT_THRESHOLD[spec.kind] if args.threshold is None else args.threshold
    thresholds = np.sort(np.unique(np.append(thresholds, a)))

    def runner(seed: int) -> np.ndarray:
        sampler = InitialConditionSampler.for_spec(spec, seed)
        q = stats.mc_final_qois(spec, sampler, args.n)
        return (q[None, :] > thresholds[:, None]).mean(axis=1)

    report = stats.repeated_experiment(
        runner, args.repetitions, args.seed, thresholds,
        method="MC", n_realizations_each=args.n, n_threads=args.threads)
    (out / "mc_report.json").write_text(report.to_json())
    report.curve_csv(out / "mc_curve.csv")
    print(f"MC: wrote {out / 'mc_report.json'}")
    return EXIT_OK


def cmd_gams(args) -> int:
    spec = _spec_for(args.system)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(args, out)

    a = DEFAULT_THRESHOLD[spec.kind] if args.threshold is None else args.threshold
    n_checkpoints = DEFAULT_CHECKPOINTS[spec.kind] if args.checkpoints is None \
        else args.checkpoints
    epsilon = DEFAULT_EPSILON[spec.kind] if args.epsilon is None else args.epsilon

    if args.clone_strategy == "ganisp":
        if not args.weights:
            print("error: --clone-strategy ganisp requires --weights", file=sys.stderr)
            return EXIT_USAGE
        weights = genmodel.load_weights(args.weights)
        strategy = genmodel.GanispCloning(
            weights=weights,
            pso=genmodel.PSOConfig(n_particles=args.pso_particles,
                                   n_iterations=args.pso_iterations),
            config=genmodel.GanispCloneConfig(
                stationary_onset=spec.stationary_onset,
                fallback_epsilon=epsilon,
                match_parent=not args.no_match_parent),
            qoi_fn=lambda s: dynsys.qoi(s, spec.kind))
    else:
        strategy = splitting.RandomCloning(epsilon)

    schedule = build_gams_inputs(spec, a, n_checkpoints, args.target_runs, args.seed)
    params = splitting.WeightParams(lambda_w=args.lambda_w, epsilon=epsilon)

    baseline = None
    if args.baseline:
        baseline = stats.EstimateReport.from_json(Path(args.baseline).read_text())
        thresholds = baseline.thresholds
    else:
        thresholds = np.sort(np.unique(
            np.append(_thresholds_for(spec, args.seed), a)))

    def run_one(seed: int) -> splitting.SplittingReport:
        sampler = InitialConditionSampler.for_spec(spec, seed)
        return splitting.run_gams(spec, sampler, args.n, a, schedule,
                                  strategy, params, seed)

    first = run_one(args.seed)
    (out / "gams_report.json").write_text(first.to_json())
    first.clone_distance_csv(out / "clone_distances.csv")

    if args.repetitions > 1:
        report = stats.repeated_experiment(
            lambda s: run_one(s).exceedance_curve(thresholds),
            args.repetitions, args.seed, thresholds,
            method="GANISP" if args.clone_strategy == "ganisp" else "GAMS_random",
            n_realizations_each=args.n, n_threads=args.threads)
        if baseline is not None:
            gains = stats.gain_curve(baseline, report)
            report.gain_vs_mc = np.array(
                [np.nan if g.gain is None else g.gain for g in gains])
            summary = [{"a": float(t), "gain": g.gain, "biased": g.biased}
                       for t, g in zip(thresholds, gains)]
            (out / "gain_summary.json").write_text(json.dumps(summary, indent=2))
        (out / "estimate_report.json").write_text(report.to_json())
        report.curve_csv(out / "gams_curve.csv")
    print(f"GAMS: p_hat={first.p_hat:.6g} at a={a}")
    return EXIT_OK


def cmd_lyapunov(args) -> int:
    spec = _spec_for(args.system)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(args, out)
    sampler = InitialConditionSampler.for_spec(spec, args.seed)
    est = lyapunov.estimate_lambda1(spec, sampler.sample(), seed=args.seed,
                                    n_renorm=args.renormalizations)
    (out / "lyapunov.json").write_text(est.to_json())
    print(f"lambda1 = {est.lambda1:.6g}")
    return EXIT_OK


def cmd_collect(args) -> int:
    spec = SystemSpec.kse_default()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(args, out)
    n = stats.collect_snapshots(
        spec, n_runs=args.runs, per_run=args.per_run, onset=args.onset,
        spacing=args.spacing, seed=args.seed,
        out_csv=out / "snapshots.csv", index_json=out / "snapshots_index.json",
        holdout=args.holdout)
    print(f"collect: wrote {n} rows")
    return EXIT_OK


def cmd_gain(args) -> int:
    mc = stats.EstimateReport.from_json(Path(args.mc).read_text())
    split = stats.EstimateReport.from_json(Path(args.split).read_text())
    gains = stats.gain_curve(mc, split)
    out = [{"a": float(t), "gain": g.gain, "biased": g.biased,
            "infinite": g.infinite}
           for t, g in zip(mc.thresholds, gains)]
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitstream",
        description="Rare-event probability estimation via genealogical splitting")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out-dir", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--threads", type=int, default=_default_threads())
        p.add_argument("--config", default=None,
                       help="JSON file of flag defaults; flags override it")

    p = sub.add_parser("mc", help="repeated Monte Carlo estimation")
    p.add_argument("--system", choices=("l96", "kse"), required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--repetitions", type=int, default=2)
    p.add_argument("--threshold", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("gams", help="genealogical splitting run")
    p.add_argument("--system", choices=("l96", "kse"), required=True)
    p.add_argument("--clone-strategy", choices=("random", "ganisp"), default="random")
    p.add_argument("--weights", default=None, help="generator manifest path")
    p.add_argument("--no-match-parent", action="store_true",
                   help="skip latent matching (bias-demonstration mode)")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--checkpoints", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--lambda-w", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--target-runs", type=int, default=100)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--baseline", default=None, help="MC report JSON for gain")
    p.add_argument("--pso-particles", type=int, default=256)
    p.add_argument("--pso-iterations", type=int, default=60)
    common(p)
    p.set_defaults(func=cmd_gams)

    p = sub.add_parser("lyapunov", help="first Lyapunov exponent estimate")
    p.add_argument("--system", choices=("l96", "kse"), required=True)
    p.add_argument("--renormalizations", type=int, default=200)
    common(p)
    p.set_defaults(func=cmd_lyapunov)

    p = sub.add_parser("collect", help="KSE training-snapshot dataset")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--per-run", type=int, default=10)
    p.add_argument("--onset", type=float, default=50.0)
    p.add_argument("--spacing", type=float, default=10.0)
    p.add_argument("--holdout", type=int, default=100)
    common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("gain", help="gain between two estimate reports")
    p.add_argument("--mc", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gain)

    return parser


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser,
                       argv: list[str]) -> argparse.Namespace:
    if getattr(args, "config", None) is None:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise SplitstreamError(f"cannot read config file: {exc}") from exc
    explicit = {a.lstrip("-").split("=")[0].replace("-", "_")
                for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and attr not in explicit:
            setattr(args, attr, value)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args, parser, argv)
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError, WeightsLoadError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except SplitstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
