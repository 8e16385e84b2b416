"""Monte Carlo baseline, repeated-experiment variance measurement,
computational gain, exceedance curves and training-snapshot collection."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynsys import (InitialConditionSampler, SystemKind, SystemSpec,
                     make_model, qoi)
from .errors import ConfigurationError

log = logging.getLogger(__name__)

__all__ = [
    "EstimateReport", "GainAssessment",
    "mc_estimate", "mc_final_qois", "theoretical_mc_variance",
    "repeated_experiment", "computational_gain",
    "collect_snapshots", "log_spaced_thresholds",
]


@dataclass
class EstimateReport:
    """Mean/std of a probability estimator over repeated experiments."""

    method: str
    thresholds: np.ndarray
    p_mean: np.ndarray
    p_std: np.ndarray
    n_repetitions: int
    n_realizations_each: int
    gain_vs_mc: np.ndarray | None = None
    seed: int = 0

    def to_json(self) -> str:
        d = {
            "method": self.method,
            "n_repetitions": self.n_repetitions,
            "n_realizations_each": self.n_realizations_each,
            "seed": self.seed,
            "per_threshold": [
                {"a": float(a), "p_mean": float(m), "p_std": float(s)}
                for a, m, s in zip(self.thresholds, self.p_mean, self.p_std)
            ],
        }
        if self.gain_vs_mc is not None:
            d["gain_vs_mc"] = [None if not np.isfinite(g) else float(g)
                               for g in self.gain_vs_mc]
        return json.dumps(d, indent=2)

    def curve_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("a,p_mean,p_std\n")
            for a, m, s in zip(self.thresholds, self.p_mean, self.p_std):
                f.write(f"{a:.17g},{m:.17g},{s:.17g}\n")

    @staticmethod
    def from_json(text: str) -> "EstimateReport":
        d = json.loads(text)
        rows = d["per_threshold"]
        return EstimateReport(
            method=d["method"],
            thresholds=np.array([r["a"] for r in rows]),
            p_mean=np.array([r["p_mean"] for r in rows]),
            p_std=np.array([r["p_std"] for r in rows]),
            n_repetitions=d["n_repetitions"],
            n_realizations_each=d["n_realizations_each"],
            seed=d.get("seed", 0),
        )


def mc_final_qois(system, sampler: InitialConditionSampler, n: int) -> np.ndarray:
    """Final-time QoI of n independent unbiased trajectories."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    model = system if hasattr(system, "advance") else make_model(system)
    final_time = getattr(model, "final_time", None)
    if final_time is None:
        spec = getattr(model, "spec", system)
        final_time = spec.final_time if isinstance(spec, SystemSpec) else None
    if final_time is None:
        raise ConfigurationError("cannot determine final time for the model")
    states = sampler.sample_batch(n)
    states = model.advance(states, 0.0, final_time)
    return np.atleast_1d(model.qoi(states))


def mc_estimate(system, sampler: InitialConditionSampler, n: int,
                thresholds: Sequence[float], seed: int | None = None) -> EstimateReport:
    """Plain Monte Carlo exceedance estimate at each threshold."""
    q = mc_final_qois(system, sampler, n)
    t = np.asarray(thresholds, dtype=float)
    p = (q[None, :] > t[:, None]).mean(axis=1)
    return EstimateReport(
        method="MC", thresholds=t, p_mean=p, p_std=np.zeros_like(p),
        n_repetitions=1, n_realizations_each=n,
        seed=sampler.rng_seed if seed is None else seed)


def theoretical_mc_variance(p: float, n: int) -> float:
    """Var of the MC estimator: (p - p^2) / N."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError("p must lie in [0, 1]")
    if n < 1:
        raise ConfigurationError("N must be >= 1")
    return (p - p * p) / n


def repeated_experiment(runner: Callable[[int], np.ndarray], r: int,
                        base_seed: int, thresholds: Sequence[float],
                        method: str = "MC",
                        n_realizations_each: int = 0,
                        n_threads: int = 1) -> EstimateReport:
    """Run ``runner(seed)`` R times with derived seeds and report the mean
    and (R-1)-normalized std of the per-threshold estimates.

    Each repetition is fully determined by its derived seed, so the report
    is identical for any ``n_threads``.
    """
    if r < 2:
        raise ConfigurationError("need at least 2 repetitions")
    seeds = _derived_seeds(base_seed, r)

    def one(s):
        try:
            return np.atleast_1d(np.asarray(runner(int(s)), dtype=float))
        except Exception as exc:
            raise type(exc)(f"repetition with seed {s} failed: {exc}") from exc

    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            estimates = list(pool.map(one, seeds))
    else:
        estimates = [one(s) for s in seeds]
    mat = np.stack(estimates)
    return EstimateReport(
        method=method, thresholds=np.asarray(thresholds, dtype=float),
        p_mean=mat.mean(axis=0), p_std=mat.std(axis=0, ddof=1),
        n_repetitions=r, n_realizations_each=n_realizations_each,
        seed=base_seed)


def _derived_seeds(base_seed: int, r: int) -> np.ndarray:
    ss = np.random.SeedSequence(base_seed)
    return ss.generate_state(r, dtype=np.uint32)


@dataclass
class GainAssessment:
    """Variance ratio vs MC, valid only when the bias gate passes."""

    gain: float | None
    biased: bool
    infinite: bool = False
    note: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "gain": self.gain, "biased": self.biased,
            "infinite": self.infinite, "note": self.note}, indent=2)


def computational_gain(var_mc: float, var_split: float,
                       p_mc: float, p_split: float,
                       stderr_mc: float, stderr_split: float,
                       tolerance: float = 3.0) -> GainAssessment:
    """var_mc / var_split, gated on |p_split - p_mc| <= tol * combined stderr.

    A biased splitting estimate yields no gain figure; zero splitting
    variance against nonzero MC variance is flagged as infinite.
    """
    combined = float(np.hypot(stderr_mc, stderr_split))
    if abs(p_split - p_mc) > tolerance * combined:
        return GainAssessment(gain=None, biased=True,
                              note=f"|{p_split:.4g} - {p_mc:.4g}| exceeds "
                                   f"{tolerance} x {combined:.4g}")
    if var_split == 0.0:
        if var_mc > 0.0:
            log.warning("splitting variance is zero; reporting infinite gain")
            return GainAssessment(gain=None, biased=False, infinite=True,
                                  note="zero splitting variance")
        return GainAssessment(gain=1.0, biased=False, note="both variances zero")
    return GainAssessment(gain=float(var_mc / var_split), biased=False)


def gain_curve(mc: EstimateReport, split: EstimateReport,
               tolerance: float = 3.0) -> list[GainAssessment]:
    """Per-threshold gains from two equal-protocol repeated experiments."""
    if mc.thresholds.shape != split.thresholds.shape or \
            not np.allclose(mc.thresholds, split.thresholds):
        raise ConfigurationError("reports use different threshold grids")
    out = []
    for i in range(len(mc.thresholds)):
        out.append(computational_gain(
            var_mc=float(mc.p_std[i] ** 2), var_split=float(split.p_std[i] ** 2),
            p_mc=float(mc.p_mean[i]), p_split=float(split.p_mean[i]),
            stderr_mc=float(mc.p_std[i] / np.sqrt(mc.n_repetitions)),
            stderr_split=float(split.p_std[i] / np.sqrt(split.n_repetitions)),
            tolerance=tolerance))
    return out


def log_spaced_thresholds(q_values: np.ndarray, n: int = 20,
                          lo_quantile: float = 0.5) -> np.ndarray:
    """Log-spaced threshold grid spanning the upper range of observed QoI."""
    q = np.asarray(q_values, dtype=float)
    lo = np.quantile(q, lo_quantile)
    hi = q.max()
    if lo <= 0:
        lo = max(q[q > 0].min(), 1e-12)
    return np.geomspace(lo, hi, n)


def collect_snapshots(spec: SystemSpec, n_runs: int, per_run: int, onset: float,
                      spacing: float, seed: int, out_csv, index_json,
                      holdout: int = 100) -> int:
    """Record stationary-regime snapshots of unbiased KSE runs.

    Each run contributes ``per_run`` rows at t = onset + k*spacing; a row is
    (Q, x0..x127).  ``holdout`` rows are reserved for testing and flagged in
    the companion index file.  Returns the number of rows written.
    """
    if spec.kind is not SystemKind.KSE:
        raise ConfigurationError("snapshot collection is defined for the KSE system")
    last = onset + (per_run - 1) * spacing
    if last > spec.final_time + 1e-9:
        raise ConfigurationError(
            f"last snapshot at t={last} exceeds final time {spec.final_time}")
    model = make_model(spec)
    sampler = InitialConditionSampler.for_spec(spec, seed)
    states = sampler.sample_batch(n_runs)

    snap_times = onset + spacing * np.arange(per_run)
    rows = np.empty((n_runs * per_run, 1 + spec.dimension))
    t = 0.0
    for k, t_snap in enumerate(snap_times):
        states = model.advance(states, t, float(t_snap))
        t = float(t_snap)
        q = model.qoi(states)
        # append-ordered by (run, snapshot) for determinism
        rows[k::per_run, 0] = q
        rows[k::per_run, 1:] = states

    header = "q," + ",".join(f"x{i}" for i in range(spec.dimension))
    np.savetxt(out_csv, rows, delimiter=",", header=header, comments="", fmt="%.17g")

    n_rows = rows.shape[0]
    if holdout >= n_rows:
        raise ConfigurationError("holdout must be smaller than the dataset")
    hold_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    holdout_idx = np.sort(hold_rng.choice(n_rows, size=holdout, replace=False))
    index = {
        "n_rows": int(n_rows),
        "holdout_row_indices": [int(i) for i in holdout_idx],
        "seed": int(seed),
        "spec": {
            "kind": spec.kind.value, "dimension": spec.dimension,
            "dt": spec.dt, "final_time": spec.final_time,
            "domain_length": spec.domain_length,
            "stationary_onset": spec.stationary_onset,
            "onset": onset, "spacing": spacing,
            "n_runs": n_runs, "per_run": per_run,
        },
    }
    Path(index_json).write_text(json.dumps(index, indent=2))
    return n_rows
