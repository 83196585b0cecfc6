"""Training objectives: cross-entropy, KL and JS divergences, the combined
dual-pass loss, and the weight schedule for the consistency term.

Every function accepts either plain arrays (returning floats, for evaluation)
or autodiff Tensors (returning scalar Tensors, for training). Probability
arguments may be single vectors [C] or batches [N, C]; batches are reduced by
the mean over examples, term by term, so the consistency weight keeps the
same scale at any batch size. All logarithms are natural (nats), which makes
the JS upper bound exactly ln 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-7  # clamp floor inside logarithms; avoids -inf at saturated softmax

DIVERGENCES = ("kl", "js")
OBJECTIVES = ("baseline", "consistency_kl", "consistency_js")


def as_probabilities(p) -> np.ndarray:
    """Validate and return a probability array (vector or batch of vectors)."""
    arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ValueError(f"probabilities must be a vector or batch, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError("probabilities must be nonnegative")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("probabilities must sum to 1 within 1e-9")
    return arr


def _one_hot(target, n_classes: int) -> np.ndarray:
    idx = np.asarray(target)
    if np.any(idx < 0) or np.any(idx >= n_classes):
        raise ValueError(f"class id out of range for {n_classes} classes: {target!r}")
    return np.eye(n_classes, dtype=np.float64)[idx]


def cross_entropy(target, probs, eps: float = PROB_EPS):
    """-log(clamp(probs[target], eps, 1)); the batch form averages examples."""
    if isinstance(probs, Tensor):
        as_probabilities(probs)
        onehot = _one_hot(target, probs.shape[-1])
        picked = ad.sum_axis(ad.mul(ad.log(ad.clamp(probs, eps, 1.0)), onehot), axis=-1)
        return ad.scale(ad.mean_all(picked), -1.0)
    arr = as_probabilities(probs)
    onehot = _one_hot(target, arr.shape[-1])
    picked = (np.log(np.clip(arr, eps, 1.0)) * onehot).sum(axis=-1)
    return float(-picked.mean())


def kl_divergence(p, q, eps: float = PROB_EPS):
    """KL(p || q) in nats; terms where p(x) <= eps contribute exactly zero."""
    if isinstance(p, Tensor) or isinstance(q, Tensor):
        p_t = p if isinstance(p, Tensor) else ad.constant(np.asarray(p, dtype=np.float64))
        q_t = q if isinstance(q, Tensor) else ad.constant(np.asarray(q, dtype=np.float64))
        as_probabilities(p_t), as_probabilities(q_t)
        support = (p_t.data > eps).astype(np.float64)
        log_ratio = ad.sub(ad.log(ad.clamp(p_t, eps, 1.0)), ad.log(ad.clamp(q_t, eps, 1.0)))
        terms = ad.mul(ad.mul(p_t, log_ratio), support)
        return ad.mean_all(ad.sum_axis(terms, axis=-1))
    p_arr, q_arr = as_probabilities(p), as_probabilities(q)
    support = p_arr > eps
    ratio = np.log(np.clip(p_arr, eps, 1.0)) - np.log(np.clip(q_arr, eps, 1.0))
    terms = np.where(support, p_arr * ratio, 0.0)
    return float(terms.sum(axis=-1).mean())


def js_divergence(p, q, eps: float = PROB_EPS):
    """JS(p || q) = KL(p||m)/2 + KL(q||m)/2 with m the even mixture."""
    if isinstance(p, Tensor) or isinstance(q, Tensor):
        p_t = p if isinstance(p, Tensor) else ad.constant(np.asarray(p, dtype=np.float64))
        q_t = q if isinstance(q, Tensor) else ad.constant(np.asarray(q, dtype=np.float64))
        m = ad.scale(ad.add(p_t, q_t), 0.5)
        half_sum = ad.add(kl_divergence(p_t, m, eps), kl_divergence(q_t, m, eps))
        return ad.scale(half_sum, 0.5)
    p_arr, q_arr = as_probabilities(p), as_probabilities(q)
    m = 0.5 * (p_arr + q_arr)
    return 0.5 * kl_divergence(p_arr, m, eps) + 0.5 * kl_divergence(q_arr, m, eps)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step loss terms; total = ce_l2r + ce_r2l + lam * divergence."""

    ce_l2r: float
    ce_r2l: float
    divergence: float
    lam: float
    total: float
    node: Tensor | None = None  # differentiable total, present on the training path

    def as_record(self) -> dict:
        return {
            "ce_l2r": self.ce_l2r,
            "ce_r2l": self.ce_r2l,
            "divergence": self.divergence,
            "lambda": self.lam,
            "total": self.total,
        }


KL_DIRECTIONS = ("forward", "reverse", "symmetric")


def _divergence(p, q, div: str, kl_direction: str):
    if div == "js":
        return js_divergence(p, q)
    if kl_direction == "forward":
        return kl_divergence(p, q)
    if kl_direction == "reverse":
        return kl_divergence(q, p)
    # symmetrized: KL(p||q)/2 + KL(q||p)/2
    if isinstance(p, Tensor) or isinstance(q, Tensor):
        return ad.scale(ad.add(kl_divergence(p, q), kl_divergence(q, p)), 0.5)
    return 0.5 * kl_divergence(p, q) + 0.5 * kl_divergence(q, p)


def combined_loss(
    target, p_l2r, p_r2l, lam: float, div: str = "kl", kl_direction: str = "forward"
) -> LossBreakdown:
    """Dual-pass objective: CE on both orders plus lam * D(p_l2r || p_r2l).

    ``div`` picks KL or JS. For KL, the default direction conditions the
    left-to-right distribution on the right-to-left one; ``kl_direction``
    optionally flips ("reverse") or symmetrizes ("symmetric") it.
    Differentiable through both probability inputs when they are tape Tensors.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if div not in DIVERGENCES:
        raise ValueError(f"div must be one of {DIVERGENCES}, got {div!r}")
    if kl_direction not in KL_DIRECTIONS:
        raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}, got {kl_direction!r}")
    if isinstance(p_l2r, Tensor) or isinstance(p_r2l, Tensor):
        ce_a = cross_entropy(target, p_l2r)
        ce_b = cross_entropy(target, p_r2l)
        d = _divergence(p_l2r, p_r2l, div, kl_direction)
        node = ad.add(ad.add(ce_a, ce_b), ad.scale(d, lam))
        ce_a_v, ce_b_v, d_v = ce_a.item(), ce_b.item(), d.item()
        return LossBreakdown(
            ce_l2r=ce_a_v,
            ce_r2l=ce_b_v,
            divergence=d_v,
            lam=lam,
            total=ce_a_v + ce_b_v + lam * d_v,
            node=node,
        )
    ce_a = cross_entropy(target, p_l2r)
    ce_b = cross_entropy(target, p_r2l)
    d = _divergence(p_l2r, p_r2l, div, kl_direction)
    return LossBreakdown(
        ce_l2r=ce_a, ce_r2l=ce_b, divergence=d, lam=lam, total=ce_a + ce_b + lam * d
    )


@dataclass(frozen=True)
class LambdaSchedule:
    """Consistency-weight schedule; linear ramps 0 -> lambda_max over total_steps.

    total_steps = 0 means "span the whole run": the trainer replaces it with
    its computed step count before the first use.
    """

    lambda_max: float = 100.0
    total_steps: int = 0
    shape: str = "linear"  # or "constant"

    def __post_init__(self) -> None:
        if self.lambda_max < 0:
            raise ValueError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.shape not in ("linear", "constant"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    """Weight at a 0-based step; the linear ramp saturates at total_steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.shape == "constant":
        return schedule.lambda_max
    if schedule.total_steps == 0:
        raise ValueError("linear schedule requires total_steps > 0")
    return schedule.lambda_max * min(step / schedule.total_steps, 1.0)
