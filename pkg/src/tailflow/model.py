"""Conditional flow-matching model with per-expert residual adapters.

The backbone is a small vector-input residual MLP: the noisy data vector,
a sinusoidal time embedding, and the conditioning vector are projected into
a shared hidden state, which passes through L feedforward blocks with skip
connections and out to a velocity prediction. Each block's output is

    h_{l+1} = F_l(h_l) + A_{k,l}(h_l)

where F_l is the frozen base block and A_{k,l}(h) = W2 sigma(W1 h) is the
two-layer residual adapter owned by expert k at block l. Experts are
selected by a precomputed partition: routing is a pure lookup, there is no
gate. Up-projections start at zero, so a freshly adapted model reproduces
the frozen backbone bit for bit.

Training uses the rectified flow objective: x_t = (1-t) x0 + t x1 with
velocity target x1 - x0 and squared error loss. Sampling integrates the
learned velocity field with Euler steps from t = 0 to t = 1, optionally
blending conditional and unconditional predictions
(v = v_u + s (v_c - v_u)); scales 0 and 1 collapse exactly to the pure
unconditional / conditional trajectories.

Forward and backward passes are hand-written numpy; gradients exist only
for the adapters routed by a batch (and for the backbone only when it is
explicitly unfrozen, which the fine-tuning contract forbids).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractViolationError, UnknownSampleError
from .seeding import rng_for

__all__ = [
    "BackboneConfig",
    "AdapterParams",
    "AdapterStack",
    "ModelState",
    "LossGradients",
    "init_backbone",
    "init_adapters",
    "resolve_placement",
    "backbone_forward",
    "model_forward",
    "adapter_forward",
    "block_forward",
    "route",
    "flow_matching_loss",
    "sgd_step",
    "cfg_sample",
    "sample_batch",
    "sample_conditional",
    "sample_unconditional",
    "per_sample_probe_gradients",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0.0).astype(np.float64)


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "gelu": (_gelu, _gelu_grad),
    "relu": (_relu, _relu_grad),
}


@dataclass(frozen=True)
class BackboneConfig:
    data_dim: int
    hidden_dim: int = 64
    num_blocks: int = 4
    cond_dim: int = 16
    time_embed_dim: int = 8

    def validate(self) -> None:
        for name in ("data_dim", "hidden_dim", "num_blocks", "cond_dim", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even (sin/cos pairs)")

    @property
    def ff_dim(self) -> int:
        return 2 * self.hidden_dim


@dataclass
class AdapterParams:
    """Down/up projection pair owned by one (expert, block) slot."""

    w1: np.ndarray  # (adapter_dim, hidden_dim)
    w2: np.ndarray  # (hidden_dim, adapter_dim)
    expert_id: int
    block_id: int


@dataclass
class AdapterStack:
    num_experts: int
    adapter_dim: int
    placement: tuple[int, ...]
    nonlinearity: str
    params: dict[tuple[int, int], AdapterParams]

    def validate(self, config: BackboneConfig) -> None:
        if self.nonlinearity not in _ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        expected = {(k, l) for k in range(self.num_experts) for l in self.placement}
        if set(self.params) != expected:
            raise ValueError("adapter params must cover exactly experts x placement")
        for (k, l), p in self.params.items():
            if p.w1.shape != (self.adapter_dim, config.hidden_dim):
                raise ValueError(f"adapter ({k},{l}): bad w1 shape {p.w1.shape}")
            if p.w2.shape != (config.hidden_dim, self.adapter_dim):
                raise ValueError(f"adapter ({k},{l}): bad w2 shape {p.w2.shape}")
            if (p.expert_id, p.block_id) != (k, l):
                raise ValueError(f"adapter ({k},{l}): mislabeled params")

    def parameter_count(self) -> int:
        return sum(p.w1.size + p.w2.size for p in self.params.values())


@dataclass
class ModelState:
    config: BackboneConfig
    backbone: dict[str, np.ndarray]
    adapters: AdapterStack | None = None
    frozen: bool = True


@dataclass
class LossGradients:
    """Adapter gradients for every (expert, block) slot; experts that routed
    no sample hold exact zeros. Backbone gradients exist only when the
    backbone is unfrozen."""

    adapters: dict[tuple[int, int], dict[str, np.ndarray]]
    backbone: dict[str, np.ndarray] | None = None


def resolve_placement(num_blocks: int, spec: str | Sequence[int]) -> tuple[int, ...]:
    """Placement spec: "all", "none", "last:<m>", or explicit block ids."""
    if isinstance(spec, str):
        if spec == "all":
            return tuple(range(num_blocks))
        if spec == "none":
            return ()
        if spec.startswith("last:"):
            m = int(spec.split(":", 1)[1])
            if not 0 <= m <= num_blocks:
                raise ValueError(f"last:{m} out of range for {num_blocks} blocks")
            return tuple(range(num_blocks - m, num_blocks))
        blocks = tuple(int(b) for b in spec.split(","))
    else:
        blocks = tuple(int(b) for b in spec)
    if any(not 0 <= b < num_blocks for b in blocks):
        raise ValueError(f"block id out of range in placement {blocks}")
    return tuple(sorted(set(blocks)))


def init_backbone(config: BackboneConfig, seed: int) -> dict[str, np.ndarray]:
    config.validate()
    rng = rng_for(seed, "backbone-init")
    d, ff = config.hidden_dim, config.ff_dim

    def w(shape, fan_in):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    # zero-init output head and damped residual branches keep activations
    # near the input scale at init, so plain SGD stays stable on raw
    # (unnormalized) data vectors
    params = {
        "w_in": w((d, config.data_dim), config.data_dim),
        "b_in": np.zeros(d),
        "w_time": w((d, config.time_embed_dim), config.time_embed_dim),
        "w_cond": w((d, config.cond_dim), config.cond_dim),
        "w_out": np.zeros((config.data_dim, d)),
        "b_out": np.zeros(config.data_dim),
    }
    damp = config.num_blocks
    for l in range(config.num_blocks):
        params[f"block{l}.v"] = w((ff, d), d)
        params[f"block{l}.c"] = np.zeros(ff)
        params[f"block{l}.u"] = w((d, ff), ff) / damp
        params[f"block{l}.e"] = np.zeros(d)
    return params


def init_adapters(
    config: BackboneConfig,
    num_experts: int,
    adapter_dim: int,
    placement: str | Sequence[int] = "all",
    nonlinearity: str = "gelu",
    seed: int = 0,
) -> AdapterStack:
    """Zero-init up-projections: a fresh stack is an exact identity add-on."""
    if num_experts < 1 or adapter_dim < 1:
        raise ValueError("num_experts and adapter_dim must be positive")
    blocks = resolve_placement(config.num_blocks, placement)
    params: dict[tuple[int, int], AdapterParams] = {}
    for k in range(num_experts):
        for l in blocks:
            rng = rng_for(seed, "adapter-init", k, l)
            w1 = rng.standard_normal((adapter_dim, config.hidden_dim)) / math.sqrt(
                config.hidden_dim
            )
            w2 = np.zeros((config.hidden_dim, adapter_dim))
            params[(k, l)] = AdapterParams(w1=w1, w2=w2, expert_id=k, block_id=l)
    stack = AdapterStack(
        num_experts=num_experts,
        adapter_dim=adapter_dim,
        placement=blocks,
        nonlinearity=nonlinearity,
        params=params,
    )
    stack.validate(config)
    return stack


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(np.arange(half) * (math.log(1000.0) / max(half - 1, 1)))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _check_expert(state: ModelState, expert_id: int | None) -> None:
    if state.adapters is None:
        return
    if expert_id is None or not 0 <= expert_id < state.adapters.num_experts:
        raise ValueError(f"expert_id {expert_id} out of range for {state.adapters.num_experts}")


def _forward_group(
    state: ModelState,
    X: np.ndarray,
    T: np.ndarray,
    C: np.ndarray,
    expert_id: int | None,
    keep_cache: bool = False,
):
    """Batched forward for samples sharing one expert (or no adapters)."""
    cfg = state.config
    p = state.backbone
    use_adapters = state.adapters is not None and expert_id is not None
    if use_adapters:
        act, _ = _ACTIVATIONS[state.adapters.nonlinearity]
    tau = time_features(T, cfg.time_embed_dim)
    h = X @ p["w_in"].T + tau @ p["w_time"].T + C @ p["w_cond"].T + p["b_in"]
    cache = {"X": X, "tau": tau, "C": C, "h": [h]} if keep_cache else None
    blocks = []
    for l in range(cfg.num_blocks):
        a = h @ p[f"block{l}.v"].T + p[f"block{l}.c"]
        g = _gelu(a)
        f = g @ p[f"block{l}.u"].T + p[f"block{l}.e"]
        entry = {"a": a, "g": g}
        if use_adapters and l in state.adapters.placement:
            ad = state.adapters.params[(expert_id, l)]
            y = h @ ad.w1.T
            z = act(y)
            entry["y"], entry["z"] = y, z
            h = h + f + z @ ad.w2.T
        else:
            h = h + f
        if keep_cache:
            blocks.append(entry)
            cache["h"].append(h)
    out = h @ p["w_out"].T + p["b_out"]
    if keep_cache:
        cache["blocks"] = blocks
        cache["expert_id"] = expert_id if use_adapters else None
        return out, cache
    return out


def _backward_group(
    state: ModelState,
    cache: dict,
    d_out: np.ndarray,
    adapter_grads: dict[tuple[int, int], dict[str, np.ndarray]] | None,
    backbone_grads: dict[str, np.ndarray] | None,
    want_input_grad: bool = False,
) -> np.ndarray | None:
    """Accumulate parameter gradients for one forward cache; optionally
    return the gradient with respect to the input X."""
    cfg = state.config
    p = state.backbone
    expert_id = cache["expert_id"]
    if expert_id is not None:
        _, act_grad = _ACTIVATIONS[state.adapters.nonlinearity]

    h_last = cache["h"][-1]
    if backbone_grads is not None:
        backbone_grads["w_out"] += d_out.T @ h_last
        backbone_grads["b_out"] += d_out.sum(axis=0)
    dh = d_out @ p["w_out"]

    for l in reversed(range(cfg.num_blocks)):
        entry = cache["blocks"][l]
        h_in = cache["h"][l]
        a, g = entry["a"], entry["g"]
        dg = dh @ p[f"block{l}.u"]
        da = dg * _gelu_grad(a)
        if backbone_grads is not None:
            backbone_grads[f"block{l}.u"] += dh.T @ g
            backbone_grads[f"block{l}.e"] += dh.sum(axis=0)
            backbone_grads[f"block{l}.v"] += da.T @ h_in
            backbone_grads[f"block{l}.c"] += da.sum(axis=0)
        dh_ff = da @ p[f"block{l}.v"]

        dh_ad = 0.0
        if "y" in entry:
            ad = state.adapters.params[(expert_id, l)]
            y, z = entry["y"], entry["z"]
            dz = dh @ ad.w2
            dy = dz * act_grad(y)
            if adapter_grads is not None:
                slot = adapter_grads[(expert_id, l)]
                slot["w2"] += dh.T @ z
                slot["w1"] += dy.T @ h_in
            dh_ad = dy @ ad.w1

        dh = dh + dh_ff + dh_ad

    if backbone_grads is not None:
        backbone_grads["w_in"] += dh.T @ cache["X"]
        backbone_grads["b_in"] += dh.sum(axis=0)
        backbone_grads["w_time"] += dh.T @ cache["tau"]
        backbone_grads["w_cond"] += dh.T @ cache["C"]
    if want_input_grad:
        return dh @ p["w_in"]
    return None


def model_forward(
    state: ModelState,
    X: np.ndarray,
    T: np.ndarray,
    C: np.ndarray,
    expert_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Velocity predictions for a batch; samples may belong to different
    experts (the batch is processed in expert groups)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    T = np.atleast_1d(np.asarray(T, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    if state.adapters is None:
        return _forward_group(state, X, T, C, None)
    if expert_ids is None:
        raise ValueError("expert_ids required when adapters are attached")
    expert_ids = np.asarray(expert_ids)
    out = np.empty((len(X), state.config.data_dim))
    for k in np.unique(expert_ids):
        idx = np.flatnonzero(expert_ids == k)
        _check_expert(state, int(k))
        out[idx] = _forward_group(state, X[idx], T[idx], C[idx], int(k))
    return out


def backbone_forward(state: ModelState, x_t: np.ndarray, t: float, cond: np.ndarray) -> np.ndarray:
    """Single-sample frozen-backbone velocity (no adapters applied)."""
    cfg = state.config
    x_t = np.asarray(x_t, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if x_t.shape != (cfg.data_dim,):
        raise ValueError(f"x_t shape {x_t.shape}, expected ({cfg.data_dim},)")
    if cond.shape != (cfg.cond_dim,):
        raise ValueError(f"cond shape {cond.shape}, expected ({cfg.cond_dim},)")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    bare = ModelState(config=cfg, backbone=state.backbone, adapters=None, frozen=state.frozen)
    return _forward_group(bare, x_t[None, :], np.array([t]), cond[None, :], None)[0]


def adapter_forward(adapter: AdapterParams, h: np.ndarray, nonlinearity: str = "gelu") -> np.ndarray:
    """W2 sigma(W1 h) for one adapter."""
    act, _ = _ACTIVATIONS[nonlinearity]
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (adapter.w1.shape[1],):
        raise ValueError(f"h shape {h.shape}, expected ({adapter.w1.shape[1]},)")
    return adapter.w2 @ act(adapter.w1 @ h)


def block_forward(
    state: ModelState, block_id: int, h: np.ndarray, expert_id: int | None = None
) -> np.ndarray:
    """One block: base feedforward plus the routed expert's adapter (if the
    block carries adapters). Only that expert's parameters are read."""
    cfg = state.config
    if not 0 <= block_id < cfg.num_blocks:
        raise ValueError(f"block_id {block_id} out of range")
    h = np.asarray(h, dtype=np.float64)
    p = state.backbone
    a = h @ p[f"block{block_id}.v"].T + p[f"block{block_id}.c"]
    f = _gelu(a) @ p[f"block{block_id}.u"].T + p[f"block{block_id}.e"]
    base = h + f
    if state.adapters is not None and block_id in state.adapters.placement:
        _check_expert(state, expert_id)
        ad = state.adapters.params[(expert_id, block_id)]
        return base + adapter_forward(ad, h, state.adapters.nonlinearity)
    return base


def route(sample, partition) -> int:
    """Deterministic expert lookup for a sample; stable across calls."""
    sample_id = sample.sample_id if hasattr(sample, "sample_id") else int(sample)
    if not 0 <= sample_id < len(partition.assignments):
        raise UnknownSampleError(sample_id)
    return int(partition.assignments[sample_id])


def _zero_adapter_grads(stack: AdapterStack) -> dict[tuple[int, int], dict[str, np.ndarray]]:
    return {
        key: {"w1": np.zeros_like(p.w1), "w2": np.zeros_like(p.w2)}
        for key, p in stack.params.items()
    }


def _zero_backbone_grads(backbone: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in backbone.items()}


def flow_matching_loss(
    state: ModelState,
    batch,
    seed: int,
    cond_dropout: float = 0.0,
) -> tuple[float, LossGradients]:
    """Rectified-flow loss and gradients for one batch.

    Per sample: t ~ U[0,1], x0 ~ N(0,I), x_t = (1-t) x0 + t x1, target
    velocity x1 - x0, squared error averaged over the batch and data
    dimensions. Draw order is fixed (t, then x0, then the conditioning
    dropout mask) so runs are reproducible. With a frozen backbone the
    returned gradients cover adapters only.
    """
    if state.adapters is not None and not state.frozen:
        raise ContractViolationError(
            "adapter fine-tuning requires a frozen backbone; unfreeze only for "
            "the no-adapter full-training control"
        )
    cfg = state.config
    records = [s for s, _ in batch.samples]
    experts = np.array([k for _, k in batch.samples], dtype=np.int64)
    n = len(records)
    x1 = np.stack([s.x for s in records])
    cond = np.stack([s.embedding for s in records]).astype(np.float64)

    rng = rng_for(seed, "flow-loss")
    t = rng.uniform(0.0, 1.0, size=n)
    x0 = rng.standard_normal((n, cfg.data_dim))
    if cond_dropout > 0.0:
        drop = rng.uniform(0.0, 1.0, size=n) < cond_dropout
        cond = cond.copy()
        cond[drop] = 0.0

    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    v_target = x1 - x0

    adapter_grads = _zero_adapter_grads(state.adapters) if state.adapters is not None else {}
    backbone_grads = None if state.frozen else _zero_backbone_grads(state.backbone)

    v_pred = np.empty_like(v_target)
    groups: list[tuple[np.ndarray, dict]] = []
    if state.adapters is None:
        out, cache = _forward_group(state, x_t, t, cond, None, keep_cache=True)
        v_pred[:] = out
        groups.append((np.arange(n), cache))
    else:
        for k in np.unique(experts):
            idx = np.flatnonzero(experts == k)
            _check_expert(state, int(k))
            out, cache = _forward_group(state, x_t[idx], t[idx], cond[idx], int(k), keep_cache=True)
            v_pred[idx] = out
            groups.append((idx, cache))

    resid = v_pred - v_target
    loss = float((resid * resid).mean())
    d_pred = 2.0 * resid / resid.size

    for idx, cache in groups:
        _backward_group(state, cache, d_pred[idx], adapter_grads or None, backbone_grads)

    return loss, LossGradients(adapters=adapter_grads, backbone=backbone_grads)


def sgd_step(state: ModelState, grads: LossGradients, lr: float) -> None:
    """In-place plain SGD update. Frozen backbones are never touched."""
    if state.adapters is not None:
        for key, g in grads.adapters.items():
            p = state.adapters.params[key]
            p.w1 -= lr * g["w1"]
            p.w2 -= lr * g["w2"]
    if grads.backbone is not None:
        if state.frozen:
            raise ContractViolationError("backbone gradients supplied for a frozen backbone")
        for name, g in grads.backbone.items():
            state.backbone[name] -= lr * g


def _euler_integrate(
    state: ModelState,
    x: np.ndarray,
    steps: int,
    velocity: Callable[[np.ndarray, float], np.ndarray],
) -> np.ndarray:
    dt = 1.0 / steps
    for i in range(steps):
        t = i / steps
        x = x + dt * velocity(x, t)
    return x


def _velocity_fn(
    state: ModelState, cond: np.ndarray, expert_id: int | None, guidance_scale: float
) -> Callable[[np.ndarray, float], np.ndarray]:
    cfg = state.config
    null = np.zeros_like(cond)

    def cond_v(x, t):
        n = len(x)
        return model_forward(
            state, x, np.full(n, t), np.tile(cond, (n, 1)),
            None if expert_id is None else np.full(n, expert_id),
        )

    def uncond_v(x, t):
        n = len(x)
        return model_forward(
            state, x, np.full(n, t), np.tile(null, (n, 1)),
            None if expert_id is None else np.full(n, expert_id),
        )

    # scales 0 and 1 must collapse exactly, not just up to rounding
    if guidance_scale == 1.0:
        return cond_v
    if guidance_scale == 0.0:
        return uncond_v

    def blended(x, t):
        vu = uncond_v(x, t)
        return vu + guidance_scale * (cond_v(x, t) - vu)

    return blended


def sample_batch(
    state: ModelState,
    cond: np.ndarray,
    expert_id: int | None,
    guidance_scale: float,
    steps: int,
    count: int,
    seed: int,
) -> np.ndarray:
    """Euler-integrate ``count`` trajectories from seeded noise to data."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    _check_expert(state, expert_id)
    cond = np.asarray(cond, dtype=np.float64)
    x0 = rng_for(seed, "sample-noise").standard_normal((count, state.config.data_dim))
    return _euler_integrate(state, x0, steps, _velocity_fn(state, cond, expert_id, guidance_scale))


def cfg_sample(
    state: ModelState,
    cond: np.ndarray,
    expert_id: int | None,
    guidance_scale: float,
    steps: int,
    seed: int,
) -> np.ndarray:
    """One guided sample: v = v_uncond + s (v_cond - v_uncond) per step."""
    return sample_batch(state, cond, expert_id, guidance_scale, steps, 1, seed)[0]


def sample_conditional(
    state: ModelState, cond: np.ndarray, expert_id: int | None, steps: int, seed: int
) -> np.ndarray:
    """Pure conditional sampling (no guidance blending)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_expert(state, expert_id)
    cond = np.asarray(cond, dtype=np.float64)
    x0 = rng_for(seed, "sample-noise").standard_normal((1, state.config.data_dim))
    fn = _velocity_fn(state, cond, expert_id, 1.0)
    return _euler_integrate(state, x0, steps, fn)[0]


def sample_unconditional(
    state: ModelState, expert_id: int | None, steps: int, seed: int
) -> np.ndarray:
    """Pure unconditional sampling (null conditioning throughout)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_expert(state, expert_id)
    null = np.zeros(state.config.cond_dim)
    x0 = rng_for(seed, "sample-noise").standard_normal((1, state.config.data_dim))
    fn = _velocity_fn(state, null, expert_id, 0.0)
    return _euler_integrate(state, x0, steps, fn)[0]


def per_sample_probe_gradients(
    state: ModelState,
    x1: np.ndarray,
    cond: np.ndarray,
    t_draws: np.ndarray,
    x0_draws: np.ndarray,
) -> np.ndarray:
    """Per-sample flow-loss gradients with respect to a shared probe adapter.

    The state must hold a single-expert adapter stack (the probe). Every
    sample is evaluated at the same (t, x0) draws and its gradient averaged
    over them, so gradients are comparable across samples. Returns one
    flattened gradient row per sample.
    """
    if state.adapters is None or state.adapters.num_experts != 1:
        raise ValueError("probe gradients need a single-expert adapter stack")
    stack = state.adapters
    _, act_grad = _ACTIVATIONS[stack.nonlinearity]
    cfg = state.config
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    n = len(x1)
    dim = cfg.data_dim
    width = sum(
        stack.params[(0, l)].w1.size + stack.params[(0, l)].w2.size for l in stack.placement
    )
    total = np.zeros((n, width))
    for t_val, x0 in zip(t_draws, x0_draws):
        x_t = (1.0 - t_val) * x0[None, :] + t_val * x1
        v_target = x1 - x0[None, :]
        out, cache = _forward_group(
            state, x_t, np.full(n, t_val), cond, expert_id=0, keep_cache=True
        )
        resid = out - v_target
        d_out = 2.0 * resid / dim  # per-sample loss: mean over dimensions only

        dh = d_out @ state.backbone["w_out"]
        per_block: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for l in reversed(range(cfg.num_blocks)):
            entry = cache["blocks"][l]
            h_in = cache["h"][l]
            dg = dh @ state.backbone[f"block{l}.u"]
            da = dg * _gelu_grad(entry["a"])
            dh_ff = da @ state.backbone[f"block{l}.v"]
            dh_ad = 0.0
            if "y" in entry:
                ad = stack.params[(0, l)]
                dz = dh @ ad.w2
                dy = dz * act_grad(entry["y"])
                dw2 = np.einsum("ni,nj->nij", dh, entry["z"])
                dw1 = np.einsum("ni,nj->nij", dy, h_in)
                per_block[l] = (dw1, dw2)
                dh_ad = dy @ ad.w1
            dh = dh + dh_ff + dh_ad

        offset = 0
        for l in stack.placement:
            dw1, dw2 = per_block[l]
            total[:, offset : offset + dw1[0].size] += dw1.reshape(n, -1)
            offset += dw1[0].size
            total[:, offset : offset + dw2[0].size] += dw2.reshape(n, -1)
            offset += dw2[0].size
    return total / len(t_draws)


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "data_dim": state.config.data_dim,
            "hidden_dim": state.config.hidden_dim,
            "num_blocks": state.config.num_blocks,
            "cond_dim": state.config.cond_dim,
            "time_embed_dim": state.config.time_embed_dim,
        },
        "frozen": state.frozen,
        "adapters": None
        if state.adapters is None
        else {
            "num_experts": state.adapters.num_experts,
            "adapter_dim": state.adapters.adapter_dim,
            "placement": list(state.adapters.placement),
            "nonlinearity": state.adapters.nonlinearity,
        },
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, arr in state.backbone.items():
        arrays[f"backbone/{name}"] = arr
    if state.adapters is not None:
        for (k, l), p in state.adapters.params.items():
            arrays[f"adapter/{k}/{l}/w1"] = p.w1
            arrays[f"adapter/{k}/{l}/w2"] = p.w2
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> ModelState:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        config = BackboneConfig(**meta["config"])
        backbone = {
            name[len("backbone/") :]: data[name] for name in data.files if name.startswith("backbone/")
        }
        adapters = None
        if meta["adapters"] is not None:
            am = meta["adapters"]
            params = {}
            for k in range(am["num_experts"]):
                for l in am["placement"]:
                    params[(k, l)] = AdapterParams(
                        w1=data[f"adapter/{k}/{l}/w1"],
                        w2=data[f"adapter/{k}/{l}/w2"],
                        expert_id=k,
                        block_id=l,
                    )
            adapters = AdapterStack(
                num_experts=am["num_experts"],
                adapter_dim=am["adapter_dim"],
                placement=tuple(am["placement"]),
                nonlinearity=am["nonlinearity"],
                params=params,
            )
            adapters.validate(config)
    return ModelState(config=config, backbone=backbone, adapters=adapters, frozen=meta["frozen"])
