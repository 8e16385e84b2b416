"""Genealogical importance splitting with a fixed population size.

The engine repeatedly integrates an ensemble of realizations between
checkpoints, scores each one against a target reaction-coordinate path,
resamples the population (clone/prune) with importance-weight bookkeeping
that keeps the final probability estimator unbiased, and reads off the
weighted exceedance fraction at final time.

Cloning strategies are pluggable: the random perturbation cloner lives
here, the generative one in :mod:`splitstream.genmodel`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dynsys import InitialConditionSampler, SystemSpec, Trajectory, make_model
from .errors import ConfigurationError, DegeneratePathError, StrategyError

log = logging.getLogger(__name__)

__all__ = [
    "Realization", "TargetPath", "WeightParams", "SelectionSchedule",
    "CloningStrategy", "RandomCloning", "SplittingReport", "CheckpointRecord",
    "compute_target_path", "selection_weights", "resample_counts",
    "apply_selection", "estimate_probability", "run_gams",
    "build_schedule", "realization_rng",
]

_WEIGHT_FLOOR = 1e-30
_WEIGHT_CEIL = 1e30


@dataclass
class Realization:
    """One ensemble member: state, likelihood-ratio weight, lineage."""

    id: int
    state: np.ndarray
    importance: float = 1.0
    parent_id: int | None = None
    rng_stream: np.random.Generator | None = None
    qoi_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class TargetPath:
    """Reaction-coordinate values to steer the ensemble towards.

    ``checkpoint_times[0]`` is t=0; the value at the final checkpoint is
    the threshold the rare event is defined by.  ``q_scale`` is the
    per-checkpoint ensemble spread of Q used to normalize the selection
    potential, making one selection-strength setting usable across systems
    whose QoI magnitudes differ by orders of magnitude; ``None`` means no
    normalization.
    """

    checkpoint_times: np.ndarray
    q_star: np.ndarray
    q_scale: np.ndarray | None = None

    def __post_init__(self):
        if len(self.checkpoint_times) != len(self.q_star):
            raise ConfigurationError("target path arrays must have equal length")
        if self.q_scale is not None and len(self.q_scale) != len(self.q_star):
            raise ConfigurationError("q_scale must match the checkpoint count")


@dataclass(frozen=True)
class WeightParams:
    """Selection strength and random-clone noise magnitude."""

    lambda_w: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.lambda_w < 0 or self.epsilon < 0:
            raise ConfigurationError("lambda_w and epsilon must be nonnegative")


@dataclass(frozen=True)
class SelectionSchedule:
    """Checkpoint times (t_1..t_K with t_K = T) and the target path."""

    checkpoint_times: np.ndarray
    target: TargetPath


class CloningStrategy(Protocol):
    def clone(self, parent: Realization, n_copies: int, time: float) -> list[np.ndarray]:
        """Return n_copies perturbed copies of the parent state."""
        ...


class RandomCloning:
    """Clones are the parent state plus epsilon * standard-normal noise."""

    def __init__(self, epsilon: float):
        if epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative")
        self.epsilon = epsilon

    def clone(self, parent: Realization, n_copies: int, time: float) -> list[np.ndarray]:
        return random_clone(parent, n_copies, self.epsilon, parent.rng_stream)


def random_clone(parent: Realization, n_copies: int, epsilon: float,
                 rng: np.random.Generator) -> list[np.ndarray]:
    d = parent.state.shape[0]
    eta = rng.standard_normal((n_copies, d))
    return [parent.state + epsilon * eta[i] for i in range(n_copies)]


@dataclass
class CheckpointRecord:
    index: int
    time: float
    n_cloned: int
    n_pruned: int
    mean_clone_distance: float
    max_clone_distance: float
    mean_weight: float


@dataclass
class SplittingReport:
    p_hat: float
    n_realizations: int
    threshold: float
    seed: int
    checkpoint_log: list[CheckpointRecord]
    final_qois: np.ndarray
    final_importances: np.ndarray

    def exceedance_curve(self, thresholds: Sequence[float]) -> np.ndarray:
        """Weighted exceedance estimate at each threshold."""
        t = np.asarray(thresholds, dtype=float)
        hits = self.final_qois[None, :] > t[:, None]
        return (hits * self.final_importances[None, :]).sum(axis=1) / self.n_realizations

    def to_json(self) -> str:
        return json.dumps({
            "p_hat": self.p_hat,
            "n_realizations": self.n_realizations,
            "threshold": self.threshold,
            "seed": self.seed,
            "checkpoints": [
                {"index": r.index, "t": r.time, "n_cloned": r.n_cloned,
                 "n_pruned": r.n_pruned, "mean_clone_distance": r.mean_clone_distance,
                 "max_clone_distance": r.max_clone_distance, "mean_weight": r.mean_weight}
                for r in self.checkpoint_log
            ],
        }, indent=2)

    def clone_distance_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("checkpoint,t,mean_dist,max_dist\n")
            for r in self.checkpoint_log:
                f.write(f"{r.index},{r.time:.17g},{r.mean_clone_distance:.17g},"
                        f"{r.max_clone_distance:.17g}\n")


def realization_rng(master_seed: int, realization_id: int,
                    checkpoint_index: int) -> np.random.Generator:
    """Private stream keyed by (seed, realization, checkpoint) so results do
    not depend on execution order."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(1, checkpoint_index, realization_id))
    return np.random.default_rng(ss)


def _coordinator_rng(master_seed: int, checkpoint_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(master_seed, spawn_key=(2, checkpoint_index))
    return np.random.default_rng(ss)


# ---------------------------------------------------------------------------
# Target path and selection weights
# ---------------------------------------------------------------------------

def compute_target_path(mc_trajectories: Sequence[Trajectory], threshold: float,
                        checkpoints: Sequence[float]) -> TargetPath:
    """Ensemble-mean QoI path rescaled self-similarly so its final value is
    exactly the threshold: q*(t) = Qbar(t) * (a / Qbar(T))."""
    if len(mc_trajectories) < 2:
        raise ConfigurationError("need at least 2 trajectories for the target path")
    times = np.asarray(checkpoints, dtype=float)
    mean_q = np.zeros_like(times)
    std_q = np.zeros_like(times)
    for i, t in enumerate(times):
        vals = []
        for traj in mc_trajectories:
            j = int(np.argmin(np.abs(traj.times - t)))
            if abs(traj.times[j] - t) > 1e-6 * max(1.0, abs(t)):
                raise ConfigurationError(
                    f"trajectory does not cover checkpoint time {t}")
            vals.append(traj.qoi_series[j])
        mean_q[i] = np.mean(vals)
        std_q[i] = np.std(vals, ddof=1)
    q_final = mean_q[-1]
    if q_final == 0.0:
        raise DegeneratePathError("ensemble-mean QoI vanishes at final time")
    scale_floor = 1e-3 * max(1e-300, abs(threshold))
    return TargetPath(checkpoint_times=times,
                      q_star=mean_q * (threshold / q_final),
                      q_scale=np.maximum(std_q, scale_floor))


def selection_weights(ensemble: Sequence[Realization], target: TargetPath,
                      checkpoint_index: int, params: WeightParams) -> np.ndarray:
    """w_j = exp(lambda_w * (V_j(t_i) - V_j(t_{i-1}))), V = -|Q - q*| / scale.

    ``scale`` is the target path's per-checkpoint ensemble spread when
    available (1 otherwise), so lambda_w has comparable meaning for QoIs
    of any magnitude.  Weights are clamped to [1e-30, 1e30]; a clamp is
    logged, never raised.
    """
    if checkpoint_index < 1:
        raise ConfigurationError("checkpoint_index must be >= 1")
    qs_now = target.q_star[checkpoint_index]
    qs_prev = target.q_star[checkpoint_index - 1]
    if target.q_scale is not None:
        s_now = target.q_scale[checkpoint_index]
        s_prev = target.q_scale[checkpoint_index - 1]
    else:
        s_now = s_prev = 1.0
    q_now = np.array([r.qoi_history[checkpoint_index] for r in ensemble])
    q_prev = np.array([r.qoi_history[checkpoint_index - 1] for r in ensemble])
    v_now = -np.abs(q_now - qs_now) / s_now
    v_prev = -np.abs(q_prev - qs_prev) / s_prev
    w = np.exp(params.lambda_w * (v_now - v_prev))
    if np.any(w < _WEIGHT_FLOOR) or np.any(w > _WEIGHT_CEIL):
        log.warning("selection weights clamped at checkpoint %d", checkpoint_index)
        w = np.clip(w, _WEIGHT_FLOOR, _WEIGHT_CEIL)
    return w


def resample_counts(weights: np.ndarray, n: int, rng: np.random.Generator,
                    method: str = "systematic") -> np.ndarray:
    """Residual resampling: deterministic floors of N*w/sum(w) plus a random
    assignment of the remainder over the residual probabilities.

    Counts sum to N exactly and have expectation N*w_j/sum(w) under either
    remainder method.  "systematic" (default) places the remainder with a
    single stratified-uniform draw and measurably lowers the estimator
    variance; "multinomial" draws the remainder independently.
    """
    if method not in ("systematic", "multinomial"):
        raise ConfigurationError(f"unknown remainder method {method!r}")
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ConfigurationError("all weights must be strictly positive")
    total = w.sum()
    if total <= 0:
        raise ConfigurationError("weights sum to zero")
    expected = n * w / total
    counts = np.floor(expected).astype(int)
    remainder = n - counts.sum()
    if remainder > 0:
        residual = expected - counts
        residual_sum = residual.sum()
        probs = w / total if residual_sum <= 0 else residual / residual_sum
        if method == "multinomial":
            counts += rng.multinomial(remainder, probs)
        else:
            edges = np.cumsum(probs) * remainder
            points = rng.random() + np.arange(remainder)
            idx = np.searchsorted(edges, points)
            counts += np.bincount(np.clip(idx, 0, len(w) - 1), minlength=len(w))
    return counts


def apply_selection(ensemble: list[Realization], counts: np.ndarray,
                    weights: np.ndarray, strategy: CloningStrategy, time: float,
                    id_start: int) -> tuple[list[Realization], float, float, int]:
    """Prune zero-count members; keep one unperturbed continuation per
    survivor plus (count - 1) strategy clones.  Every child carries
    importance = parent.importance * (mean weight / parent weight).

    Returns (children, mean clone distance, max clone distance, next id).
    """
    counts = np.asarray(counts)
    n = int(counts.sum())
    if len(counts) != len(ensemble):
        raise ConfigurationError("counts and ensemble sizes differ")
    w_bar = float(np.sum(weights)) / n
    children: list[Realization] = []
    distances: list[float] = []
    next_id = id_start
    for parent, count, w in zip(ensemble, counts, weights):
        if count == 0:
            continue
        factor = w_bar / w
        child_importance = parent.importance * factor
        children.append(Realization(
            id=next_id, state=parent.state, importance=child_importance,
            parent_id=parent.id, qoi_history=list(parent.qoi_history)))
        next_id += 1
        if count > 1:
            try:
                clone_states = strategy.clone(parent, int(count) - 1, time)
            except Exception as exc:
                raise StrategyError(
                    f"cloning failed for realization {parent.id}: {exc}") from exc
            if len(clone_states) != count - 1:
                raise StrategyError(
                    f"strategy returned {len(clone_states)} clones, expected {count - 1}")
            for cs in clone_states:
                cs = np.asarray(cs, dtype=float)
                if cs.shape != parent.state.shape:
                    raise StrategyError("clone state has wrong dimension")
                distances.append(float(np.linalg.norm(cs - parent.state)))
                children.append(Realization(
                    id=next_id, state=cs, importance=child_importance,
                    parent_id=parent.id, qoi_history=list(parent.qoi_history)))
                next_id += 1
    mean_d = float(np.mean(distances)) if distances else 0.0
    max_d = float(np.max(distances)) if distances else 0.0
    return children, mean_d, max_d, next_id


def estimate_probability(ensemble: Sequence[Realization], threshold: float) -> float:
    """(1/N) sum importance_j * 1{Q_j(T) > a}."""
    n = len(ensemble)
    total = sum(r.importance for r in ensemble if r.qoi_history[-1] > threshold)
    return total / n


# ---------------------------------------------------------------------------
# Schedule construction and the full run
# ---------------------------------------------------------------------------

def build_schedule(checkpoints: np.ndarray, target: TargetPath) -> SelectionSchedule:
    cps = np.asarray(checkpoints, dtype=float)
    if len(target.checkpoint_times) != len(cps) + 1:
        raise ConfigurationError(
            "target path must cover t=0 plus every selection checkpoint")
    if not np.allclose(target.checkpoint_times[1:], cps):
        raise ConfigurationError("target path times do not match checkpoints")
    return SelectionSchedule(checkpoint_times=cps, target=target)


def run_gams(system, sampler: InitialConditionSampler, n_realizations: int,
             threshold: float, schedule: SelectionSchedule,
             strategy: CloningStrategy, params: WeightParams,
             seed: int) -> SplittingReport:
    """Full splitting run with a constant population of ``n_realizations``.

    ``system`` may be a SystemSpec or any ensemble model.  With
    lambda_w = 0 and a zero-noise strategy the run degenerates to plain
    Monte Carlo over the same sampler draws.
    """
    if n_realizations < 2:
        raise ConfigurationError("need at least 2 realizations")
    model = system if hasattr(system, "advance") else make_model(system)
    n = n_realizations

    states = sampler.sample_batch(n)
    q0 = np.atleast_1d(model.qoi(states))
    ensemble = [Realization(id=i, state=states[i], qoi_history=[float(q0[i])])
                for i in range(n)]
    next_id = n

    times = np.concatenate([[0.0], schedule.checkpoint_times])
    records: list[CheckpointRecord] = []
    for i in range(1, len(times)):
        t_prev, t_now = times[i - 1], times[i]
        batch = np.stack([r.state for r in ensemble])
        batch = model.advance(batch, t_prev, t_now)
        q = np.atleast_1d(model.qoi(batch))
        for j, r in enumerate(ensemble):
            r.state = batch[j]
            r.qoi_history.append(float(q[j]))

        weights = selection_weights(ensemble, schedule.target, i, params)
        if params.lambda_w == 0.0:
            # selection disabled: identity step, keep MC bit-identical
            records.append(CheckpointRecord(i, float(t_now), 0, 0, 0.0, 0.0, 1.0))
            continue
        counts = resample_counts(weights, n, _coordinator_rng(seed, i))
        for r in ensemble:
            r.rng_stream = realization_rng(seed, r.id, i)
        ensemble, mean_d, max_d, next_id = apply_selection(
            ensemble, counts, weights, strategy, float(t_now), next_id)
        assert len(ensemble) == n
        records.append(CheckpointRecord(
            index=i, time=float(t_now),
            n_cloned=int(np.sum(np.maximum(counts - 1, 0))),
            n_pruned=int(np.sum(counts == 0)),
            mean_clone_distance=mean_d, max_clone_distance=max_d,
            mean_weight=float(np.mean(weights))))

    p_hat = estimate_probability(ensemble, threshold)
    return SplittingReport(
        p_hat=p_hat, n_realizations=n, threshold=threshold, seed=seed,
        checkpoint_log=records,
        final_qois=np.array([r.qoi_history[-1] for r in ensemble]),
        final_importances=np.array([r.importance for r in ensemble]))
