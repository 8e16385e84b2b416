"""First Lyapunov exponent via the two-trajectory renormalization method,
and the derived selection interval for the splitting schedule."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .dynsys import SystemSpec, make_model
from .errors import ConfigurationError, DegeneratePerturbationError

log = logging.getLogger(__name__)

__all__ = ["LyapunovEstimate", "estimate_lambda1", "selection_interval",
           "checkpoint_steps", "checkpoint_times"]


@dataclass
class LyapunovEstimate:
    lambda1: float
    renorm_interval: float
    n_renormalizations: int
    per_window_log_growth: list[float]

    def to_json(self) -> str:
        d = asdict(self)
        del d["per_window_log_growth"]
        return json.dumps(d, indent=2)


def estimate_lambda1(system, x0: np.ndarray, delta0: float = 1e-6,
                     renorm_interval: float | None = None, n_renorm: int = 200,
                     seed: int = 0, transient_fraction: float = 0.1) -> LyapunovEstimate:
    """Top Lyapunov exponent from a reference/perturbed trajectory pair.

    Every ``renorm_interval`` the separation d_i is measured, log(d_i/delta0)
    accumulated, and the perturbed trajectory pulled back to distance delta0
    along the current difference direction.  ``system`` may be a SystemSpec
    or any ensemble model exposing advance()/dimension/dt.

    A transient of ``transient_fraction`` * n_renorm * renorm_interval is
    integrated before measurement starts so x0 need not sit on the attractor.
    """
    if delta0 <= 0:
        raise ConfigurationError("delta0 must be positive")
    model = system if hasattr(system, "advance") else make_model(system)
    if renorm_interval is None:
        renorm_interval = 10.0 * model.dt

    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(model.dimension)
    direction /= np.linalg.norm(direction)

    x_ref = np.asarray(x0, dtype=float).copy()
    t = 0.0
    n_transient = max(0, round(transient_fraction * n_renorm))
    for _ in range(n_transient):
        x_ref = model.advance(x_ref, t, t + renorm_interval)
        t += renorm_interval

    x_pert = x_ref + delta0 * direction
    log_growth = []
    for _ in range(n_renorm):
        x_ref = model.advance(x_ref, t, t + renorm_interval)
        x_pert = model.advance(x_pert, t, t + renorm_interval)
        t += renorm_interval
        diff = x_pert - x_ref
        dist = float(np.linalg.norm(diff))
        if dist == 0.0:
            raise DegeneratePerturbationError(
                "reference and perturbed trajectories coincide exactly")
        log_growth.append(np.log(dist / delta0))
        x_pert = x_ref + (delta0 / dist) * diff

    lam = float(np.mean(log_growth) / renorm_interval)
    return LyapunovEstimate(
        lambda1=lam,
        renorm_interval=renorm_interval,
        n_renormalizations=n_renorm,
        per_window_log_growth=[float(g) for g in log_growth],
    )


def checkpoint_steps(total_steps: int, n_checkpoints: int) -> list[int]:
    """Split ``total_steps`` into n_checkpoints intervals of near-equal step
    counts; earlier intervals absorb the remainder so the last checkpoint
    lands exactly at the final step."""
    if n_checkpoints <= 0 or total_steps < n_checkpoints:
        raise ConfigurationError(
            f"cannot split {total_steps} steps into {n_checkpoints} checkpoints")
    base = total_steps // n_checkpoints
    extra = total_steps - base * n_checkpoints
    return [base + 1] * extra + [base] * (n_checkpoints - extra)


def checkpoint_times(T: float, dt: float, n_checkpoints: int) -> np.ndarray:
    """Selection times t_1..t_K (t_K = T) built from checkpoint_steps."""
    steps = checkpoint_steps(round(T / dt), n_checkpoints)
    return dt * np.cumsum(steps)


def selection_interval(lambda1: float, n_checkpoints_hint: int, T: float, dt: float) -> float:
    """Base selection interval: an integer number of steps, dividing [0, T]
    into at least ``n_checkpoints_hint`` intervals, no longer than 1/lambda1.

    Returns the shortest interval of the resulting schedule (the remainder
    policy makes some intervals one step longer).  Non-positive lambda1
    falls back to the hint-based uniform schedule with a warning.
    """
    if not np.isfinite(lambda1):
        raise ConfigurationError("lambda1 must be finite")
    total_steps = round(T / dt)
    n = n_checkpoints_hint
    if lambda1 <= 0:
        warnings.warn("lambda1 <= 0: falling back to the hint-based schedule",
                      stacklevel=2)
    else:
        max_interval_steps = max(1, int(np.floor(1.0 / (lambda1 * dt))))
        n = max(n, int(np.ceil(total_steps / max_interval_steps)))
    steps = checkpoint_steps(total_steps, n)
    return min(steps) * dt
