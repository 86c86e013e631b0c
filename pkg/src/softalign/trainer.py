"""Toy dual-stream encoders, optimizer, schedule, and training loop.

Each modality (image, text, roi, tag) gets a two-layer tanh head that
projects its raw view to a shared embedding dimension; the ROI view is
first pooled over its M features (mean/max/min or a single-query
attention). Heads are trained with AdamW (decoupled weight decay) under a
linear-warmup + cosine-anneal schedule. Everything is deterministic given
the config seed: per-epoch shuffles are re-derived from (seed, epoch), so
resuming from a checkpoint replays the exact uninterrupted trajectory.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import backend, container, gradcheck
from .distributions import Temperature
from .errors import (
    BatchTooSmall,
    EmptySequence,
    FormatError,
    IndexOutOfRange,
    ShapeMismatch,
)
from .objectives import LossConfig
from .synthgen import SynthDataset

CKPT_MAGIC = "SALB-CKPT"

AGGREGATION_MODES = ("mean", "max", "min", "attention")
LOSS_VARIANTS = ("clip", "label_smooth", "soft", "soft_re", "total", "mixed_gamma")

_MODALITIES = ("image", "text", "roi", "tag")
# the temperature parameters are adapted but never decayed
_NO_DECAY = ("tau_log_inv", "tau_log_inv_guidance")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and architecture settings for one training run."""

    epochs: int = 40
    max_steps: Optional[int] = None
    batch_size: int = 64
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.10
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    roi_aggregation: str = "mean"
    hidden_dim: int = 64
    embed_dim: int = 32
    attention_dim: int = 32
    grad_clip: Optional[float] = None
    seed: int = 0
    loss_variant: str = "total"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(
                f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}"
            )
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("optimizer betas must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.roi_aggregation not in AGGREGATION_MODES:
            raise ValueError(
                f"roi_aggregation must be one of {AGGREGATION_MODES}, "
                f"got {self.roi_aggregation!r}"
            )
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(
                f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}"
            )
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        for name in ("hidden_dim", "embed_dim", "attention_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            loss_d = d["loss"]
            unknown_loss = set(loss_d) - set(LossConfig.__dataclass_fields__)
            if unknown_loss:
                raise ValueError(f"unknown LossConfig keys: {sorted(unknown_loss)}")
            d["loss"] = LossConfig(**loss_d)
        return cls(**d)


@dataclass(frozen=True)
class AttentionParams:
    """Single-query attention pool over a ROI feature sequence."""

    query: np.ndarray       # (d_att,)
    key_proj: np.ndarray    # (d_roi, d_att)
    value_proj: np.ndarray  # (d_roi, d_roi)


@dataclass
class TrainState:
    """Everything a run needs to continue: parameters, moments, step."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    config: TrainConfig

    @property
    def temperature(self) -> Temperature:
        return Temperature(float(self.params["tau_log_inv"][0]))

    @property
    def guidance_temperature(self) -> Optional[Temperature]:
        if "tau_log_inv_guidance" not in self.params:
            return None
        return Temperature(float(self.params["tau_log_inv_guidance"][0]))

    def attention_params(self) -> Optional[AttentionParams]:
        if "roi_pool.query" not in self.params:
            return None
        return AttentionParams(
            query=self.params["roi_pool.query"],
            key_proj=self.params["roi_pool.key_proj"],
            value_proj=self.params["roi_pool.value_proj"],
        )


def init_state(spec, cfg: TrainConfig) -> TrainState:
    """Fresh parameters for a dataset spec, deterministic in cfg.seed."""
    rng = np.random.default_rng((cfg.seed, 1))
    h, d_out = cfg.hidden_dim, cfg.embed_dim
    in_dims = {der: getattr(spec, f"d_{der}") for der in _MODALITIES}
    params: dict[str, np.ndarray] = {}
    for mod in _MODALITIES:
        d_in = in_dims[mod]
        params[f"{mod}.w1"] = rng.standard_normal((d_in, h)) / math.sqrt(d_in)
        params[f"{mod}.b1"] = np.zeros(h)
        params[f"{mod}.w2"] = rng.standard_normal((h, d_out)) / math.sqrt(h)
        params[f"{mod}.b2"] = np.zeros(d_out)
    if cfg.roi_aggregation == "attention":
        d_roi, d_att = in_dims["roi"], cfg.attention_dim
        # zero query -> uniform weights; identity values -> exact mean pooling
        params["roi_pool.query"] = np.zeros(d_att)
        params["roi_pool.key_proj"] = rng.standard_normal((d_roi, d_att)) / math.sqrt(d_roi)
        params["roi_pool.value_proj"] = np.eye(d_roi)
    params["tau_log_inv"] = np.array([-math.log(cfg.loss.tau_init)])
    if cfg.loss.split_guidance_temperature:
        params["tau_log_inv_guidance"] = np.array([-math.log(cfg.loss.tau_init)])
    zeros = {name: np.zeros_like(p) for name, p in params.items()}
    return TrainState(
        params=params,
        m={name: z.copy() for name, z in zeros.items()},
        v={name: z.copy() for name, z in zeros.items()},
        step=0,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# ROI aggregation
# ---------------------------------------------------------------------------

def roi_aggregate(rois, mode: str, attention: Optional[AttentionParams] = None
                  ) -> np.ndarray:
    """Pool an (M, d) ROI feature sequence to a single d-vector."""
    rois = np.asarray(rois, dtype=np.float64)
    if rois.ndim != 2:
        raise ShapeMismatch(f"rois must be (M, d), got shape {rois.shape}")
    if rois.shape[0] < 1:
        raise EmptySequence("cannot aggregate an empty ROI sequence")
    if mode == "mean":
        return rois.mean(axis=0)
    if mode == "max":
        return rois.max(axis=0)
    if mode == "min":
        return rois.min(axis=0)
    if mode == "attention":
        if attention is None:
            raise ValueError("attention aggregation needs AttentionParams")
        out, _ = _attention_batch(rois[None, :, :], attention)
        return out[0]
    raise ValueError(f"unknown aggregation mode {mode!r}")


def _attention_batch(rois: np.ndarray, p: AttentionParams):
    """(N, M, d) -> (N, d) via softmax(q . k_m / sqrt(d_att)) weights."""
    d_att = p.query.shape[0]
    keys = rois @ p.key_proj                       # (N, M, d_att)
    scores = (keys @ p.query) / math.sqrt(d_att)   # (N, M)
    weights = backend.softmax_rows(scores)
    values = rois @ p.value_proj                   # (N, M, d)
    pooled = np.einsum("nm,nmd->nd", weights, values)
    cache = {"keys": keys, "weights": weights, "values": values, "rois": rois}
    return pooled, cache


def _attention_backward(d_pooled: np.ndarray, p: AttentionParams, cache) -> dict:
    keys, weights, values, rois = (
        cache["keys"], cache["weights"], cache["values"], cache["rois"],
    )
    d_att = p.query.shape[0]
    d_values = weights[:, :, None] * d_pooled[:, None, :]
    d_value_proj = np.einsum("nmd,nme->de", rois, d_values)
    d_weights = np.einsum("nmd,nd->nm", values, d_pooled)
    d_scores = backend.softmax_vjp_rows(weights, d_weights)
    d_query = np.einsum("nma,nm->a", keys, d_scores) / math.sqrt(d_att)
    d_keys = d_scores[:, :, None] * p.query[None, None, :] / math.sqrt(d_att)
    d_key_proj = np.einsum("nmd,nma->da", rois, d_keys)
    return {
        "roi_pool.query": d_query,
        "roi_pool.key_proj": d_key_proj,
        "roi_pool.value_proj": d_value_proj,
    }


def _aggregate_for_batch(state: TrainState, rois: np.ndarray):
    mode = state.config.roi_aggregation
    if mode == "mean":
        return rois.mean(axis=1), None
    if mode == "max":
        return rois.max(axis=1), None
    if mode == "min":
        return rois.min(axis=1), None
    return _attention_batch(rois, state.attention_params())


# ---------------------------------------------------------------------------
# encoder forward / backward
# ---------------------------------------------------------------------------

def _head_forward(state: TrainState, mod: str, x: np.ndarray):
    p = state.params
    a1 = x @ p[f"{mod}.w1"] + p[f"{mod}.b1"]
    h1 = np.tanh(a1)
    out = h1 @ p[f"{mod}.w2"] + p[f"{mod}.b2"]
    return out, {"x": x, "h1": h1}


def _head_backward(state: TrainState, mod: str, d_out: np.ndarray, cache,
                   need_input_grad: bool = False):
    p = state.params
    x, h1 = cache["x"], cache["h1"]
    grads = {
        f"{mod}.w2": h1.T @ d_out,
        f"{mod}.b2": d_out.sum(axis=0),
    }
    d_h1 = d_out @ p[f"{mod}.w2"].T
    d_a1 = d_h1 * (1.0 - h1 * h1)
    grads[f"{mod}.w1"] = x.T @ d_a1
    grads[f"{mod}.b1"] = d_a1.sum(axis=0)
    d_x = d_a1 @ p[f"{mod}.w1"].T if need_input_grad else None
    return grads, d_x


def _gather_views(dataset: SynthDataset, indices: np.ndarray) -> dict:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size < 2:
        raise BatchTooSmall(f"need at least 2 indices, got {idx.size}")
    if (idx < 0).any() or (idx >= dataset.n).any():
        raise IndexOutOfRange(
            f"indices must be in [0, {dataset.n}), got range "
            f"[{int(idx.min())}, {int(idx.max())}]"
        )
    return {
        "image": dataset.image_features[idx],
        "text": dataset.text_features[idx],
        "roi": dataset.roi_features[idx],
        "tag": dataset.tag_features[idx],
    }


def _forward_raw(state: TrainState, dataset: SynthDataset, indices):
    """Raw (pre-normalization) head outputs plus backward caches."""
    views = _gather_views(dataset, indices)
    pooled, agg_cache = _aggregate_for_batch(state, views["roi"])
    inputs = {"image": views["image"], "text": views["text"],
              "roi": pooled, "tag": views["tag"]}
    raw, caches = {}, {}
    for mod in _MODALITIES:
        raw[mod], caches[mod] = _head_forward(state, mod, inputs[mod])
    return raw, caches, agg_cache


def forward_batch(state: TrainState, dataset: SynthDataset, indices):
    """Unit-row embedding batches (v, t, r, a) for a set of samples."""
    raw, _, _ = _forward_raw(state, dataset, indices)
    out = []
    for mod in _MODALITIES:
        m = raw[mod]
        out.append(m / np.sqrt((m * m).sum(axis=1))[:, None])
    return tuple(out)


def loss_and_grads(state: TrainState, dataset: SynthDataset, indices):
    """(loss value, components, parameter gradients) for one batch."""
    cfg = state.config
    raw, caches, agg_cache = _forward_raw(state, dataset, indices)
    value, comps, bundle = gradcheck.backward_with_components(
        cfg.loss_variant, raw["image"], raw["text"], raw["roi"], raw["tag"],
        state.temperature, cfg.loss,
        guidance_tau=state.guidance_temperature,
    )
    d_raw = {"image": bundle.d_v, "text": bundle.d_t,
             "roi": bundle.d_r, "tag": bundle.d_a}
    grads: dict[str, np.ndarray] = {}
    for mod in _MODALITIES:
        need_input = mod == "roi" and cfg.roi_aggregation == "attention"
        head_grads, d_x = _head_backward(state, mod, d_raw[mod], caches[mod],
                                         need_input_grad=need_input)
        grads.update(head_grads)
        if need_input:
            grads.update(_attention_backward(d_x, state.attention_params(),
                                             agg_cache))
    grads["tau_log_inv"] = np.array([bundle.d_log_inv_tau])
    if "tau_log_inv_guidance" in state.params:
        grads["tau_log_inv_guidance"] = np.array(
            [bundle.d_log_inv_tau_guidance or 0.0]
        )
    for name, p in state.params.items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return value, comps, grads


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then cosine anneal."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step must be in [0, {total_steps}), got {step}")
    warmup = min(int(round(cfg.warmup_fraction * total_steps)), total_steps - 1)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(state: TrainState, grads: dict, lr: float,
                   cfg: Optional[TrainConfig] = None) -> TrainState:
    """One AdamW update (in place); decay is decoupled from the moments."""
    cfg = cfg or state.config
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(
                f"gradient for {name} has shape {g.shape}, expected {p.shape}"
            )
        wd = 0.0 if name in _NO_DECAY else cfg.weight_decay
        backend.adamw_update(
            p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
            state.m[name].reshape(-1), state.v[name].reshape(-1),
            lr, wd, cfg.beta1, cfg.beta2, cfg.adam_eps, bc1, bc2,
        )
    state.step = t
    return state


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, 2, epoch)).permutation(n)


def total_steps_for(dataset: SynthDataset, cfg: TrainConfig) -> int:
    batches = dataset.n // cfg.batch_size
    if batches < 1:
        raise BatchTooSmall(
            f"dataset has {dataset.n} samples < batch_size {cfg.batch_size}"
        )
    return cfg.max_steps if cfg.max_steps is not None else cfg.epochs * batches


def train(dataset: SynthDataset, cfg: TrainConfig,
          state: Optional[TrainState] = None,
          stop_at_step: Optional[int] = None):
    """Run (or resume) a training loop; returns (state, metrics log).

    Batches are drawn without replacement per epoch, dropping the final
    short batch; shuffles derive from (seed, epoch) so a resumed run is
    bitwise identical to an uninterrupted one. ``stop_at_step`` interrupts
    early without changing the schedule (checkpoint and resume later).
    """
    total = total_steps_for(dataset, cfg)
    batches = dataset.n // cfg.batch_size
    if state is None:
        state = init_state(dataset.spec, cfg)
    end = total if stop_at_step is None else min(total, stop_at_step)
    metrics: list[dict] = []
    perm_epoch = -1
    perm = None
    for step in range(state.step, end):
        epoch, b = divmod(step, batches)
        if epoch != perm_epoch:
            perm = _epoch_permutation(cfg.seed, epoch, dataset.n)
            perm_epoch = epoch
        indices = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        value, comps, grads = loss_and_grads(state, dataset, indices)
        if cfg.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        lr = lr_at(step, total, cfg)
        optimizer_step(state, grads, lr, cfg)
        metrics.append({
            "step": step,
            "lr": lr,
            "total": value,
            "clip": comps.get("clip", 0.0),
            "soft": comps.get("soft", 0.0),
            "soft_re": comps.get("soft_re", 0.0),
            "tau": state.temperature.tau,
        })
    return state, metrics


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    """Write a checkpoint container; resuming from it is bitwise exact."""
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "param_order": list(state.params.keys()),
    }
    arrays = {}
    for name, p in state.params.items():
        arrays[f"param/{name}"] = p
        arrays[f"m/{name}"] = state.m[name]
        arrays[f"v/{name}"] = state.v[name]
    container.write(path, CKPT_MAGIC, meta, arrays)


def load_checkpoint(path) -> TrainState:
    meta, arrays = container.read(path, CKPT_MAGIC)
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        order = meta["param_order"]
        step = int(meta["step"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint metadata is invalid: {exc}") from exc
    params, m, v = {}, {}, {}
    for name in order:
        try:
            params[name] = arrays[f"param/{name}"]
            m[name] = arrays[f"m/{name}"]
            v[name] = arrays[f"v/{name}"]
        except KeyError as exc:
            raise FormatError(f"checkpoint is missing arrays for {name!r}") from exc
    return TrainState(params=params, m=m, v=v, step=step, config=cfg)
