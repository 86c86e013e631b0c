"""Scalar loss terms of the soft cross-modal alignment objective.

Everything here works in distribution space: the contrastive cross-entropy
baseline, forward/symmetric KL and JS divergences, the softened-target
losses under intra-modal guidance, their negative-disentangled
("relation-enhanced") variants, the combined objective, and the
guidance-mixing ablation loss. Gradients live in :mod:`softalign.gradcheck`,
which re-derives these values in log space and is cross-checked against
this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .distributions import (
    NegDisentangled,
    Temperature,
    cross_modal_dist,
    disentangle_negatives,
    intra_modal_dist,
    mix_targets,
    one_hot_targets,
)
from .errors import BatchTooSmall, DegenerateTargets, ShapeMismatch
from .numkit import as_matrix

DIVERGENCES = ("forward_kl", "symmetric_kl", "js")
SUPERVISION_FORMS = ("R2R_A2A", "A2A_R2R", "R2A_A2R", "A2R_R2A")

Dist = Union[np.ndarray, NegDisentangled]


@dataclass(frozen=True)
class LossConfig:
    """All scalar hyperparameters of the objective."""

    tau_init: float = 0.07
    alpha: float = 0.2
    beta: float = 0.3
    gamma: float = 1.0
    lambda_re: float = 1.0
    mu_clip: float = 0.5
    divergence: str = "symmetric_kl"
    supervision_form: str = "R2R_A2A"
    stop_gradient_targets: bool = True
    target_floor: float = 1e-12
    split_guidance_temperature: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.lambda_re < 0.0 or self.mu_clip < 0.0:
            raise ValueError("lambda_re and mu_clip must be >= 0")
        if self.tau_init <= 0.0:
            raise ValueError(f"tau_init must be positive, got {self.tau_init}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(
                f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}"
            )
        if self.supervision_form not in SUPERVISION_FORMS:
            raise ValueError(
                f"supervision_form must be one of {SUPERVISION_FORMS}, "
                f"got {self.supervision_form!r}"
            )
        if self.target_floor <= 0.0:
            raise ValueError("target_floor must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Component values of one objective evaluation.

    ``total = soft + lambda_re * soft_re + mu_clip * clip``; the four
    per-direction fields split the soft terms into their v2l/l2v halves.
    """

    clip: float
    soft: float
    soft_re: float
    total: float
    soft_v2l: float
    soft_l2v: float
    soft_re_v2l: float
    soft_re_l2v: float


@dataclass(frozen=True)
class DistBundle:
    """Similarity distributions one objective evaluation consumes.

    ``p_ra``/``p_ar`` (cross ROI-to-tag and tag-to-ROI) are only present
    when the supervision form needs them.
    """

    p_it: np.ndarray
    p_ti: np.ndarray
    p_rr: np.ndarray
    p_aa: np.ndarray
    p_ra: Optional[np.ndarray] = None
    p_ar: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.p_it.shape[0]

    def guidance(self, form: str) -> tuple[np.ndarray, np.ndarray]:
        """(v2l guidance, l2v guidance) for a supervision form."""
        if form == "R2R_A2A":
            return self.p_rr, self.p_aa
        if form == "A2A_R2R":
            return self.p_aa, self.p_rr
        if form in ("R2A_A2R", "A2R_R2A"):
            if self.p_ra is None or self.p_ar is None:
                raise ValueError(
                    f"supervision form {form} needs the cross distributions "
                    "p_ra/p_ar, which this bundle does not carry"
                )
            if form == "R2A_A2R":
                return self.p_ra, self.p_ar
            return self.p_ar, self.p_ra
        raise ValueError(f"unknown supervision form {form!r}")


# ---------------------------------------------------------------------------
# divergences on explicit distributions
# ---------------------------------------------------------------------------

def _floored_log(m: np.ndarray, floor: float) -> np.ndarray:
    return np.log(np.maximum(m, floor))


def _unwrap_pair(a: Dist, b: Dist) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, NegDisentangled) != isinstance(b, NegDisentangled):
        raise ShapeMismatch("mixed plain and neg-disentangled operands")
    if isinstance(a, NegDisentangled):
        a, b = a.inner, b.inner
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatch(f"operand shapes differ: {a.shape} vs {b.shape}")
    return a, b


def cross_entropy_rows(targets: Dist, preds: Dist, floor: float = 1e-12) -> float:
    """Mean over rows of -sum_j t_ij * log(p_ij), with 0*log(.) = 0."""
    t, p = _unwrap_pair(targets, preds)
    return float(-(t * _floored_log(p, floor)).sum(axis=1).mean())


def kl_rows(targets: Dist, preds: Dist, floor: float = 1e-12) -> float:
    """Mean over rows of KL(target_i || pred_i)."""
    t, p = _unwrap_pair(targets, preds)
    rows = (t * (_floored_log(t, floor) - _floored_log(p, floor))).sum(axis=1)
    return float(rows.mean())


def sym_kl_rows(a: Dist, b: Dist, floor: float = 1e-12) -> float:
    """Half the sum of both directed KL divergences."""
    return 0.5 * (kl_rows(a, b, floor) + kl_rows(b, a, floor))


def js_rows(a: Dist, b: Dist, floor: float = 1e-12) -> float:
    """Jensen-Shannon divergence, bounded by ln 2."""
    a_m, b_m = _unwrap_pair(a, b)
    mid = 0.5 * (a_m + b_m)
    return 0.5 * (kl_rows(a_m, mid, floor) + kl_rows(b_m, mid, floor))


def _divergence(targets: Dist, preds: Dist, mode: str, floor: float) -> float:
    if mode == "forward_kl":
        return kl_rows(targets, preds, floor)
    if mode == "symmetric_kl":
        return sym_kl_rows(targets, preds, floor)
    if mode == "js":
        return js_rows(targets, preds, floor)
    raise ValueError(f"unknown divergence {mode!r}")


# ---------------------------------------------------------------------------
# embedding-level objectives
# ---------------------------------------------------------------------------

def clip_loss(v, t, tau: Temperature, floor: float = 1e-12) -> float:
    """One-hot contrastive cross-entropy, averaged over both directions."""
    p_it = cross_modal_dist(v, t, tau)
    p_ti = cross_modal_dist(t, v, tau)
    y = one_hot_targets(p_it.shape[0])
    return 0.5 * (cross_entropy_rows(y, p_it, floor) + cross_entropy_rows(y, p_ti, floor))


def build_distributions(
    v, t, r, a, tau: Temperature, cfg: LossConfig,
    guidance_tau: Optional[Temperature] = None,
) -> DistBundle:
    """All distributions one objective evaluation needs, built once.

    ``guidance_tau`` overrides the temperature of the guidance branch when
    ``cfg.split_guidance_temperature`` is set; otherwise the shared ``tau``
    scales every similarity matrix.
    """
    g_tau = guidance_tau if (cfg.split_guidance_temperature and guidance_tau is not None) else tau
    p_it = cross_modal_dist(v, t, tau)
    p_ti = cross_modal_dist(t, v, tau)
    p_rr = intra_modal_dist(r, g_tau)
    p_aa = intra_modal_dist(a, g_tau)
    p_ra = p_ar = None
    if cfg.supervision_form in ("R2A_A2R", "A2R_R2A"):
        p_ra = cross_modal_dist(r, a, g_tau)
        p_ar = cross_modal_dist(a, r, g_tau)
    return DistBundle(p_it=p_it, p_ti=p_ti, p_rr=p_rr, p_aa=p_aa, p_ra=p_ra, p_ar=p_ar)


def _mixed_targets(dists: DistBundle, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    g_v2l, g_l2v = dists.guidance(cfg.supervision_form)
    y = one_hot_targets(dists.n)
    return mix_targets(y, g_v2l, cfg.beta), mix_targets(y, g_l2v, cfg.beta)


def _check_soft_preconditions(dists: DistBundle, cfg: LossConfig) -> None:
    shapes = {dists.p_it.shape, dists.p_ti.shape, dists.p_rr.shape, dists.p_aa.shape}
    if len(shapes) != 1:
        raise ShapeMismatch(f"distribution shapes differ: {sorted(shapes)}")
    n = dists.n
    if dists.p_it.shape != (n, n):
        raise ShapeMismatch(f"distributions must be square, got {dists.p_it.shape}")
    if cfg.beta == 0.0 and cfg.divergence != "forward_kl":
        raise DegenerateTargets(
            "beta=0 makes the targets one-hot; the reversed KL term is "
            "unbounded there. Use divergence='forward_kl' or beta > 0."
        )


def soft_loss_directions(dists: DistBundle, cfg: LossConfig) -> tuple[float, float]:
    """(v2l, l2v) softened-target divergences, before direction averaging."""
    _check_soft_preconditions(dists, cfg)
    t_v2l, t_l2v = _mixed_targets(dists, cfg)
    floor = cfg.target_floor
    return (
        _divergence(t_v2l, dists.p_it, cfg.divergence, floor),
        _divergence(t_l2v, dists.p_ti, cfg.divergence, floor),
    )


def soft_loss(dists: DistBundle, cfg: LossConfig) -> float:
    """Softened-target alignment loss, averaged over both directions."""
    v2l, l2v = soft_loss_directions(dists, cfg)
    return 0.5 * (v2l + l2v)


def relation_enhanced_soft_loss_directions(
    dists: DistBundle, cfg: LossConfig
) -> tuple[float, float]:
    """(v2l, l2v) divergences on negative-disentangled distributions."""
    _check_soft_preconditions(dists, cfg)
    if dists.n < 2:
        raise BatchTooSmall("relation-enhanced loss needs N >= 2")
    t_v2l, t_l2v = _mixed_targets(dists, cfg)
    floor = cfg.target_floor
    v2l = _divergence(
        disentangle_negatives(t_v2l), disentangle_negatives(dists.p_it),
        cfg.divergence, floor,
    )
    l2v = _divergence(
        disentangle_negatives(t_l2v), disentangle_negatives(dists.p_ti),
        cfg.divergence, floor,
    )
    return v2l, l2v


def relation_enhanced_soft_loss(dists: DistBundle, cfg: LossConfig) -> float:
    """Soft loss on distributions with the positive dropped and renormalized."""
    v2l, l2v = relation_enhanced_soft_loss_directions(dists, cfg)
    return 0.5 * (v2l + l2v)


def softclip_total(
    v, t, r, a, tau: Temperature, cfg: LossConfig,
    guidance_tau: Optional[Temperature] = None,
) -> LossBreakdown:
    """Full objective: soft + lambda_re * soft_re + mu_clip * clip.

    The relation-enhanced term is skipped (reported as 0) when
    ``lambda_re == 0``, which keeps configurations whose disentangled
    targets would be degenerate (e.g. beta=0) evaluable.
    """
    dists = build_distributions(v, t, r, a, tau, cfg, guidance_tau)
    soft_v2l, soft_l2v = soft_loss_directions(dists, cfg)
    soft = 0.5 * (soft_v2l + soft_l2v)
    if cfg.lambda_re > 0.0:
        re_v2l, re_l2v = relation_enhanced_soft_loss_directions(dists, cfg)
    else:
        re_v2l = re_l2v = 0.0
    soft_re = 0.5 * (re_v2l + re_l2v)
    y = one_hot_targets(dists.n)
    floor = cfg.target_floor
    clip = 0.5 * (
        cross_entropy_rows(y, dists.p_it, floor)
        + cross_entropy_rows(y, dists.p_ti, floor)
    )
    total = soft + cfg.lambda_re * soft_re + cfg.mu_clip * clip
    return LossBreakdown(
        clip=clip, soft=soft, soft_re=soft_re, total=total,
        soft_v2l=soft_v2l, soft_l2v=soft_l2v,
        soft_re_v2l=re_v2l, soft_re_l2v=re_l2v,
    )


def _guided_term(
    dists: DistBundle, cfg: LossConfig
) -> float:
    """soft + lambda_re * soft_re for one guidance bundle (no CLIP term)."""
    soft = soft_loss(dists, cfg)
    re = relation_enhanced_soft_loss(dists, cfg) if cfg.lambda_re > 0.0 else 0.0
    return soft + cfg.lambda_re * re


def mixed_guidance_loss(
    v, t, r, a, tau: Temperature, gamma: float, cfg: LossConfig,
    guidance_tau: Optional[Temperature] = None,
) -> float:
    """Mix of ROI/tag-guided and image/text-self-similarity-guided losses.

    gamma weights the ROI/tag guidance term, (1-gamma) the term whose
    guidance comes from the image and text batches' own self-similarities.
    The contrastive (CLIP) term is excluded.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    bundle_ra = build_distributions(v, t, r, a, tau, cfg, guidance_tau)
    bundle_it = build_distributions(v, t, v, t, tau, cfg, guidance_tau)
    return gamma * _guided_term(bundle_ra, cfg) + (1.0 - gamma) * _guided_term(bundle_it, cfg)
