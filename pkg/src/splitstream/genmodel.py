"""Conditional-generator inference and the generative cloning strategy.

The generator is executed from an exported weights file (JSON manifest +
raw float32 blob) rather than a hard-coded architecture; the interpreter
understands a small layer vocabulary: dense, conv1d (circular padding),
prelu, depth_to_space and add_skip_marker (residual connections, realized
as named push/add pairs).  Latent matching to the parent realization uses
global-best particle swarm optimization over the [-1, 1]^16 latent box.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InferenceError, WeightsLoadError
from .splitting import Realization, random_clone

log = logging.getLogger(__name__)

__all__ = [
    "LayerDesc", "GeneratorWeights", "PSOConfig", "PSOResult",
    "GanispCloneConfig", "GanispCloning",
    "load_weights", "generator_forward", "generator_forward_batch",
    "pso_minimize", "gan_clone", "hybrid_clone",
]

_LAYER_TYPES = ("dense", "conv1d", "prelu", "depth_to_space", "add_skip_marker")


@dataclass(frozen=True)
class LayerDesc:
    type: str
    name: str
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class GeneratorWeights:
    layers: tuple[LayerDesc, ...]
    latent_dim: int
    cond_dim: int
    output_dim: int
    n_parameters: int


def load_weights(manifest_path, blob_path=None) -> GeneratorWeights:
    """Load and validate a manifest + blob weights file pair.

    The blob is raw little-endian float32; parameter offsets are in float
    elements and must tile the blob exactly.  The blob's sha256 must match
    the manifest's ``blob_sha256``; by default the blob sits next to the
    manifest with a ``.bin`` suffix.
    """
    manifest_path = Path(manifest_path)
    if blob_path is None:
        blob_path = manifest_path.with_suffix(".bin")
    blob_path = Path(blob_path)
    if not manifest_path.exists() or not blob_path.exists():
        raise WeightsLoadError(f"missing weights files {manifest_path} / {blob_path}")

    manifest = json.loads(manifest_path.read_text())
    raw = blob_path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != manifest.get("blob_sha256"):
        raise WeightsLoadError("blob checksum does not match manifest")
    blob = np.frombuffer(raw, dtype="<f4")

    layers = []
    spans = []
    for idx, entry in enumerate(manifest["layers"]):
        ltype = entry["type"]
        if ltype not in _LAYER_TYPES:
            raise WeightsLoadError(f"layer {idx}: unsupported type {ltype!r}")
        params = {}
        for p in entry.get("params", []):
            shape = tuple(p["shape"])
            size = int(np.prod(shape))
            offset = int(p["offset"])
            if offset < 0 or offset + size > blob.size:
                raise WeightsLoadError(
                    f"layer {idx}: parameter {p['name']!r} exceeds blob bounds")
            spans.append((offset, offset + size))
            params[p["name"]] = blob[offset:offset + size].astype(np.float64).reshape(shape)
        layers.append(LayerDesc(
            type=ltype, name=entry["name"],
            input_shape=tuple(entry.get("input_shape", ())),
            output_shape=tuple(entry.get("output_shape", ())),
            params=params))

    spans.sort()
    cursor = 0
    for lo, hi in spans:
        if lo != cursor:
            raise WeightsLoadError(
                f"parameter offsets leave a gap or overlap at element {cursor}")
        cursor = hi
    if cursor != blob.size:
        raise WeightsLoadError(
            f"parameters tile {cursor} elements but blob holds {blob.size}")

    w = GeneratorWeights(
        layers=tuple(layers),
        latent_dim=int(manifest["latent_dim"]),
        cond_dim=int(manifest["cond_dim"]),
        output_dim=int(manifest["output_dim"]),
        n_parameters=int(blob.size))
    _validate_stem(w)
    return w


def _validate_stem(w: GeneratorWeights) -> None:
    if not w.layers:
        raise WeightsLoadError("manifest declares no layers")
    stem = w.layers[0]
    if stem.type != "dense":
        raise WeightsLoadError("first layer must be the dense conditioning embedding")
    if stem.params["weight"].shape[1] != w.cond_dim:
        raise WeightsLoadError("embedding layer does not consume cond_dim inputs")


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _dense(x: np.ndarray, layer: LayerDesc) -> np.ndarray:
    wgt, bias = layer.params["weight"], layer.params["bias"]
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != wgt.shape[1]:
        raise InferenceError(
            f"layer {layer.name!r}: dense expects {wgt.shape[1]} inputs, got {flat.shape[1]}")
    return flat @ wgt.T + bias


def _conv1d(x: np.ndarray, layer: LayerDesc) -> np.ndarray:
    # kernel (out_ch, in_ch, k), circular padding, offsets centered at k//2
    kern, bias = layer.params["weight"], layer.params["bias"]
    out_ch, in_ch, k = kern.shape
    if x.shape[1] != in_ch:
        raise InferenceError(
            f"layer {layer.name!r}: conv1d expects {in_ch} channels, got {x.shape[1]}")
    half = (k - 1) // 2
    b, _, l = x.shape
    if out_ch >= 4:
        # gather circular patches and do one (b*l, c*k) @ (c*k, o) product;
        # much faster than per-tap contractions for wide outputs
        padded = np.concatenate([x[:, :, l - half:], x, x[:, :, :k - 1 - half]],
                                axis=2)
        s0, s1, s2 = padded.strides
        patches = np.lib.stride_tricks.as_strided(
            padded, (b, in_ch, l, k), (s0, s1, s2, s2))
        flat = patches.transpose(0, 2, 1, 3).reshape(b * l, in_ch * k)
        y = (flat @ kern.reshape(out_ch, in_ch * k).T)
        return y.reshape(b, l, out_ch).transpose(0, 2, 1) + bias[None, :, None]
    y = np.zeros((b, out_ch, l))
    for s in range(k):
        shifted = np.roll(x, half - s, axis=2)
        y += np.einsum("oc,bcl->bol", kern[:, :, s], shifted)
    return y + bias[None, :, None]


def _prelu(x: np.ndarray, layer: LayerDesc) -> np.ndarray:
    alpha = layer.params["alpha"]
    if x.ndim == 2:
        a = alpha if alpha.size == x.shape[1] else np.full(x.shape[1], alpha.item())
        return np.where(x > 0, x, a[None, :] * x)
    if alpha.size not in (1, x.shape[1]):
        raise InferenceError(
            f"layer {layer.name!r}: prelu alpha size {alpha.size} vs {x.shape[1]} channels")
    a = alpha if alpha.size == x.shape[1] else np.full(x.shape[1], alpha.item())
    return np.where(x > 0, x, a[None, :, None] * x)


def _depth_to_space(x: np.ndarray, layer: LayerDesc) -> np.ndarray:
    # out[c, x*r + s] = in[c*r + s, x]
    c_in, l_in = x.shape[1], x.shape[2]
    c_out, l_out = layer.output_shape
    if c_out * l_out != c_in * l_in or l_out % l_in != 0:
        raise InferenceError(f"layer {layer.name!r}: incompatible depth_to_space shapes")
    r = l_out // l_in
    if c_in % r != 0 or c_in // r != c_out:
        raise InferenceError(f"layer {layer.name!r}: channel count not divisible by {r}")
    b = x.shape[0]
    return x.reshape(b, c_out, r, l_in).transpose(0, 1, 3, 2).reshape(b, c_out, l_out)


def generator_forward_batch(weights: GeneratorWeights, q: float,
                            z: np.ndarray) -> np.ndarray:
    """Forward pass over a batch of latents; returns (batch, output_dim)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != weights.latent_dim:
        raise InferenceError(f"latent must have {weights.latent_dim} components")

    stem = weights.layers[0]
    q_in = np.full((z.shape[0], weights.cond_dim), float(q))
    embed = _dense(q_in, stem)
    x = np.concatenate([embed, z], axis=1)

    skips: dict[str, np.ndarray] = {}
    for layer in weights.layers[1:]:
        if layer.type == "add_skip_marker":
            if layer.name in skips:
                saved = skips.pop(layer.name)
                if saved.shape != x.shape:
                    raise InferenceError(
                        f"layer {layer.name!r}: skip shapes differ {saved.shape} vs {x.shape}")
                x = x + saved
            else:
                skips[layer.name] = x
            continue
        if layer.input_shape:
            expect = int(np.prod(layer.input_shape))
            if x.reshape(x.shape[0], -1).shape[1] != expect:
                raise InferenceError(
                    f"layer {layer.name!r}: expects {layer.input_shape}, "
                    f"activation has {x.shape[1:]}")
            x = x.reshape(x.shape[0], *layer.input_shape)
        if layer.type == "dense":
            x = _dense(x, layer)
        elif layer.type == "conv1d":
            x = _conv1d(x, layer)
        elif layer.type == "prelu":
            x = _prelu(x, layer)
        elif layer.type == "depth_to_space":
            x = _depth_to_space(x, layer)
    if skips:
        raise InferenceError(f"unmatched skip markers: {sorted(skips)}")

    out = x.reshape(x.shape[0], -1)
    if out.shape[1] != weights.output_dim:
        raise InferenceError(
            f"network emitted {out.shape[1]} values, manifest declares {weights.output_dim}")
    return out


def generator_forward(weights: GeneratorWeights, q: float, z: np.ndarray) -> np.ndarray:
    """Single-latent forward pass G(q, z) -> field of length output_dim."""
    return generator_forward_batch(weights, q, z)[0]


# ---------------------------------------------------------------------------
# Particle swarm optimization on the latent box
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PSOConfig:
    n_particles: int = 256
    n_iterations: int = 60
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    velocity_clamp: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.n_particles, self.n_iterations) <= 0 or \
                min(self.inertia, self.cognitive, self.social, self.velocity_clamp) <= 0:
            raise ConfigurationError("PSO parameters must be positive")


@dataclass
class PSOResult:
    best_z: np.ndarray
    best_value: float
    positions: np.ndarray   # final swarm, (n_particles, dim)
    values: np.ndarray      # objective at the final positions


def pso_minimize(objective: Callable[[np.ndarray], np.ndarray],
                 config: PSOConfig, dim: int = 16) -> PSOResult:
    """Global-best PSO over [-1, 1]^dim.

    ``objective`` is evaluated on the whole swarm at once: (P, dim) -> (P,).
    Deterministic for a fixed config seed; the final swarm is returned so
    callers can pick the n closest samples.
    """
    rng = np.random.default_rng(config.seed)
    p, d = config.n_particles, dim
    pos = rng.uniform(-1.0, 1.0, size=(p, d))
    vel = np.zeros((p, d))
    val = np.asarray(objective(pos), dtype=float)
    if val.shape != (p,):
        raise ConfigurationError("objective must map (P, dim) to (P,)")
    pbest = pos.copy()
    pbest_val = val.copy()
    g = int(np.argmin(val))
    gbest = pos[g].copy()
    gbest_val = float(val[g])

    for _ in range(config.n_iterations):
        r1 = rng.random((p, d))
        r2 = rng.random((p, d))
        vel = (config.inertia * vel
               + config.cognitive * r1 * (pbest - pos)
               + config.social * r2 * (gbest[None, :] - pos))
        np.clip(vel, -config.velocity_clamp, config.velocity_clamp, out=vel)
        pos = np.clip(pos + vel, -1.0, 1.0)
        val = np.asarray(objective(pos), dtype=float)
        improved = val < pbest_val
        pbest[improved] = pos[improved]
        pbest_val[improved] = val[improved]
        g = int(np.argmin(pbest_val))
        if pbest_val[g] < gbest_val:
            gbest = pbest[g].copy()
            gbest_val = float(pbest_val[g])

    return PSOResult(best_z=gbest, best_value=gbest_val, positions=pos, values=val)


# ---------------------------------------------------------------------------
# Cloning
# ---------------------------------------------------------------------------

_JITTER = 1e-4


def gan_clone(parent: Realization, n_copies: int, q: float,
              weights: GeneratorWeights, pso: PSOConfig,
              match_parent: bool = True,
              rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Generate clones from the conditional generator.

    With ``match_parent`` the latent is optimized to match the parent state
    and the n_copies closest distinct final-swarm samples are returned, in
    ascending distance order.  Without it (bias-demonstration mode) the
    latents are drawn uniformly and no optimization happens.
    """
    if parent.state.shape[0] != weights.output_dim:
        raise ConfigurationError(
            f"parent state has {parent.state.shape[0]} components, "
            f"generator emits {weights.output_dim}")
    if rng is None:
        rng = parent.rng_stream or np.random.default_rng(pso.seed)

    if not match_parent:
        z = rng.uniform(-1.0, 1.0, size=(n_copies, weights.latent_dim))
        fields = generator_forward_batch(weights, q, z)
        return [fields[i] for i in range(n_copies)]

    if n_copies > pso.n_particles:
        raise ConfigurationError(
            f"n_copies={n_copies} exceeds swarm size {pso.n_particles}")
    target = parent.state

    def objective(z_batch: np.ndarray) -> np.ndarray:
        fields = generator_forward_batch(weights, q, z_batch)
        return np.linalg.norm(fields - target[None, :], axis=1)

    run_seed = int(rng.integers(0, 2**63 - 1)) if parent.rng_stream is not None else pso.seed
    result = pso_minimize(objective, PSOConfig(
        n_particles=pso.n_particles, n_iterations=pso.n_iterations,
        inertia=pso.inertia, cognitive=pso.cognitive, social=pso.social,
        velocity_clamp=pso.velocity_clamp, seed=run_seed), dim=weights.latent_dim)

    order = np.argsort(result.values, kind="stable")
    chosen = []
    seen = set()
    for idx in order:
        key = result.positions[idx].tobytes()
        if key in seen:
            continue
        seen.add(key)
        chosen.append(result.positions[idx])
        if len(chosen) == n_copies:
            break
    if len(chosen) < n_copies:
        log.warning("collapsed swarm: jittering %d duplicate latents",
                    n_copies - len(chosen))
        while len(chosen) < n_copies:
            base = chosen[len(chosen) % max(len(chosen), 1)]
            chosen.append(np.clip(
                base + rng.uniform(-_JITTER, _JITTER, size=base.shape), -1.0, 1.0))
    z_sel = np.stack(chosen)
    fields = generator_forward_batch(weights, q, z_sel)
    dists = np.linalg.norm(fields - target[None, :], axis=1)
    order = np.argsort(dists, kind="stable")
    return [fields[i] for i in order]


@dataclass(frozen=True)
class GanispCloneConfig:
    """Hybrid dispatch: random cloning before the stationary regime sets in,
    generative cloning after."""

    stationary_onset: float = 50.0
    fallback_epsilon: float = 0.1
    match_parent: bool = True

    def __post_init__(self):
        if self.stationary_onset < 0:
            raise ConfigurationError("stationary_onset must be nonnegative")


def hybrid_clone(parent: Realization, n_copies: int, time: float,
                 config: GanispCloneConfig, weights: GeneratorWeights,
                 pso: PSOConfig,
                 qoi_fn: Callable[[np.ndarray], float]) -> list[np.ndarray]:
    """Random cloning for t < stationary_onset, generative cloning after."""
    if time < config.stationary_onset:
        return random_clone(parent, n_copies, config.fallback_epsilon,
                            parent.rng_stream or np.random.default_rng(pso.seed))
    q = float(qoi_fn(parent.state))
    return gan_clone(parent, n_copies, q, weights, pso,
                     match_parent=config.match_parent)


class GanispCloning:
    """CloningStrategy adapter around hybrid_clone."""

    def __init__(self, weights: GeneratorWeights, pso: PSOConfig,
                 config: GanispCloneConfig,
                 qoi_fn: Callable[[np.ndarray], float]):
        self.weights = weights
        self.pso = pso
        self.config = config
        self.qoi_fn = qoi_fn

    def clone(self, parent: Realization, n_copies: int, time: float) -> list[np.ndarray]:
        return hybrid_clone(parent, n_copies, time, self.config,
                            self.weights, self.pso, self.qoi_fn)
