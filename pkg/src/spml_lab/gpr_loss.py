"""Robust losses for single-positive multi-label training.

Two loss families are implemented:

* ``gr_loss_batch``: the two-case ancestor. A confirmed positive contributes
  -log(p) at weight 1; every other class is assumed negative and contributes
  a generalized-cross-entropy pair blended by a false-negative estimate,
  weighted by a Gaussian bell in p.
* ``gpr_loss_batch``: the four-case generalization that additionally consumes
  ternary pseudo-labels. Negative pseudo-labels get -log(1-p) under the same
  bell weight; positive pseudo-labels get a label-smoothed log pair under a
  clamped inverted-bell weight; a positive-count regularizer keeps the mean
  predicted positive mass per image near a target m.

All per-element weights and the false-negative estimate are treated as
constants when differentiating (stop-gradient semantics); gradients are
closed-form through the sigmoid, so analytic gradients must match finite
differences of the frozen-weight loss. When every pseudo-label is 0 and the
regularizer is off, the four-case loss reduces exactly to the two-case one.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import (
    ConfigError,
    DomainError,
    GprConfig,
    PredictionBatch,
    check_annotation_batch,
    check_pseudo_batch,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlphaState:
    """Bell-weight parameters (center mu, width sigma) for one epoch."""

    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise DomainError("sigma must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Total loss plus the contribution of each label case.

    ``per_case_sums`` are the four branch contributions already divided by
    N*C, so ``total == sum(per_case_sums) + eta * regularizer_value``.
    """

    total: float
    per_case_sums: tuple
    regularizer_value: float
    m_hat: float


def alpha_schedule(epoch: int, total_epochs: int, cfg: GprConfig) -> AlphaState:
    """Linear interpolation of (mu, sigma) between the configured endpoints."""
    if total_epochs < 1:
        raise DomainError("total_epochs must be >= 1")
    if not 0 <= epoch < total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return AlphaState(cfg.mu_start, cfg.sigma_start)
    frac = epoch / (total_epochs - 1)
    mu = cfg.mu_start + (cfg.mu_end - cfg.mu_start) * frac
    sigma = cfg.sigma_start + (cfg.sigma_end - cfg.sigma_start) * frac
    return AlphaState(mu, sigma)


def gaussian_weight(p, alpha: AlphaState):
    """exp(-(p - mu)^2 / (2 sigma^2)); the weight for assumed/pseudo negatives."""
    p = np.asarray(p, dtype=np.float64)
    return np.exp(-((p - alpha.mu) ** 2) / (2.0 * alpha.sigma**2))


def clamped_inverse_weight(p, alpha: AlphaState, cfg: GprConfig):
    """1 - bell(p), clamped into [lambda1, lambda2]; weight for pseudo-positives."""
    return np.clip(1.0 - gaussian_weight(p, alpha), cfg.lambda1, cfg.lambda2)


def false_negative_estimate(p, beta: float):
    """Default estimate that an assumed-negative is actually positive: p**beta.

    Monotone nondecreasing with fixed points at 0 and 1. Pluggable: batch
    losses accept any array function of (p, beta) in its place.
    """
    if beta <= 0.0:
        raise DomainError("beta must be positive")
    return np.asarray(p, dtype=np.float64) ** beta


def loss_confirmed_positive(p):
    """-log p."""
    return -np.log(np.asarray(p, dtype=np.float64))


def loss_undefined(p, k_hat, cfg: GprConfig):
    """Generalized-cross-entropy pair blended by the false-negative estimate."""
    if cfg.q1 <= 0.0 or cfg.q2 <= 0.0:
        raise ConfigError("q1 and q2 must be positive")
    p = np.asarray(p, dtype=np.float64)
    k_hat = np.asarray(k_hat, dtype=np.float64)
    return (1.0 - k_hat) * (1.0 - (1.0 - p) ** cfg.q1) / cfg.q1 + k_hat * (
        1.0 - p**cfg.q2
    ) / cfg.q2


def loss_negative_pseudo(p):
    """-log(1 - p)."""
    return -np.log(1.0 - np.asarray(p, dtype=np.float64))


def loss_positive_pseudo(p, q3: float):
    """Label-smoothed positive loss: -(1-q3) log(1-p) - q3 log(p)."""
    p = np.asarray(p, dtype=np.float64)
    return -(1.0 - q3) * np.log(1.0 - p) - q3 * np.log(p)


def positive_count_regularizer(probs, m: float):
    """((m_hat - m)/C)^2 with m_hat the mean per-image probability mass.

    Returns (value, gradient w.r.t. each probability); the gradient is the
    same constant 2(m_hat - m)/(N C^2) for every entry.
    """
    probs = probs.probabilities if isinstance(probs, PredictionBatch) else np.asarray(probs)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise DomainError("probs must be a nonempty (N, C) array")
    n, c = probs.shape
    m_hat = float(probs.sum()) / n
    value = ((m_hat - m) / c) ** 2
    grad = np.full_like(probs, 2.0 * (m_hat - m) / (n * c * c), dtype=np.float64)
    return value, grad


def method_confidence(positive_pseudo_probs) -> float:
    """Product of the labeler's probabilities at the confirmed positives.

    Computed as exp(sum(log p)); an empty input is the empty product 1 and is
    logged as a warning. Underflows to 0.0 for long inputs; use
    :func:`log_method_confidence` when comparing against tiny gates.
    """
    return float(math.exp(log_method_confidence(positive_pseudo_probs)))


def log_method_confidence(positive_pseudo_probs) -> float:
    probs = np.asarray(positive_pseudo_probs, dtype=np.float64)
    if probs.size == 0:
        logger.warning("method confidence over an empty set; returning the empty product 1")
        return 0.0
    if np.any(probs <= 0.0) or np.any(probs > 1.0):
        raise DomainError("confidence inputs must lie in (0, 1]")
    return float(np.log(probs).sum())


def _prepare_batch(preds: PredictionBatch, annotations, pseudo=None):
    ann = check_annotation_batch(annotations)
    if ann.shape != preds.logits.shape:
        raise DomainError("annotation batch shape mismatch")
    if pseudo is None:
        return ann, None
    lab = check_pseudo_batch(pseudo)
    if lab.shape != preds.logits.shape:
        raise DomainError("pseudo-label batch shape mismatch")
    return ann, lab


def _k_hat_array(probs, cfg, k_hat_fn):
    fn = false_negative_estimate if k_hat_fn is None else k_hat_fn
    k_hat = np.ascontiguousarray(np.asarray(fn(probs, cfg.beta), dtype=np.float64))
    if k_hat.shape != probs.shape:
        raise DomainError("false-negative estimate must be elementwise over probs")
    return k_hat


def gpr_loss_batch(
    preds: PredictionBatch,
    annotations,
    pseudo,
    cfg: GprConfig,
    alpha: AlphaState,
    k_hat_fn=None,
):
    """Four-case weighted loss plus regularizer; gradient w.r.t. logits.

    Case dispatch per element: a confirmed positive ignores its pseudo-label;
    unannotated classes route by pseudo-label value 0 / -1 / +1.
    """
    ann, lab = _prepare_batch(preds, annotations, pseudo)
    probs = np.ascontiguousarray(preds.probabilities)
    n, c = probs.shape
    k_hat = _k_hat_array(probs, cfg, k_hat_fn)

    sums, grad = kernels.gpr_elements(
        probs,
        np.ascontiguousarray(ann),
        np.ascontiguousarray(lab),
        k_hat,
        alpha.mu,
        alpha.sigma,
        cfg.lambda1,
        cfg.lambda2,
        cfg.q1,
        cfg.q2,
        cfg.q3,
    )

    scale = 1.0 / (n * c)
    grad = grad * scale

    if cfg.m is not None:
        reg_value, reg_grad_p = positive_count_regularizer(probs, cfg.m)
        if cfg.eta != 0.0:
            grad += cfg.eta * reg_grad_p * probs * (1.0 - probs)
    elif cfg.eta != 0.0:
        raise ConfigError("GprConfig.m must be resolved before using the regularizer")
    else:
        reg_value = 0.0

    per_case = tuple(float(s) * scale for s in sums)
    total = math.fsum(per_case) + cfg.eta * reg_value
    breakdown = LossBreakdown(
        total=total,
        per_case_sums=per_case,
        regularizer_value=reg_value,
        m_hat=float(probs.sum()) / n,
    )
    return breakdown, grad


def gr_loss_batch(
    preds: PredictionBatch,
    annotations,
    cfg: GprConfig,
    alpha: AlphaState,
    k_hat_fn=None,
):
    """Two-case ancestor loss; returns (scalar total, gradient w.r.t. logits)."""
    ann, _ = _prepare_batch(preds, annotations)
    probs = np.ascontiguousarray(preds.probabilities)
    n, c = probs.shape
    k_hat = _k_hat_array(probs, cfg, k_hat_fn)

    sums, grad = kernels.gr_elements(
        probs,
        np.ascontiguousarray(ann),
        k_hat,
        alpha.mu,
        alpha.sigma,
        cfg.q1,
        cfg.q2,
    )
    scale = 1.0 / (n * c)
    return math.fsum(float(s) * scale for s in sums), grad * scale


def bce_loss_batch(preds: PredictionBatch, targets):
    """Plain binary cross entropy against 0/1 targets; the naive baseline."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != preds.logits.shape:
        raise DomainError("target shape mismatch")
    p = preds.probabilities
    n, c = p.shape
    total = -float(np.sum(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p))) / (n * c)
    grad = (p - targets) / (n * c)
    return total, grad
