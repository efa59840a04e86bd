"""Dynamic multi-focus pseudo-labeling.

Per image and per epoch: partition the unit square into a grid of patches
randomly enlarged for overlap, score the global view and every patch, derive
a local trust threshold from the confirmed positive's global score, aggregate
patch scores per class by a thresholded max/min rule, then assign hard
labels: up to ``top_k`` positives above a global threshold from the blended
global/aggregated scores, and a fixed count of negatives from the lowest
average scores. Because views and score jitter are reseeded from
(master_seed, epoch, image), the labels legitimately change across epochs
while staying exactly reproducible.

An epoch-level confidence gate multiplies the labeler's blended score at each
image's confirmed positive; when that product (compared in log domain) falls
below the configured threshold, the whole epoch's labels are replaced by
zeros and training degenerates to the pseudo-label-free loss.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    DampConfig,
    DomainError,
    GprConfig,
    GRID_JITTER_STREAM,
    VIEW_GLOBAL,
    ViewSpec,
    mix_seed,
)
from .scorers import ScorerError

FULL_IMAGE_RECT = (0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class ViewScores:
    """Distributions for the global view (C,) and the local patches (R, C)."""

    global_dist: np.ndarray
    local_dists: np.ndarray

    def __post_init__(self):
        for dist in (self.global_dist, *self.local_dists):
            if np.min(dist) < 0.0 or abs(float(np.sum(dist)) - 1.0) > 1e-9:
                raise DomainError("view scores must be probability distributions")


@dataclass(frozen=True)
class EpochPseudoLabels:
    """All per-image label vectors for one epoch plus the gate verdict."""

    labels: np.ndarray
    final_scores_at_positive: np.ndarray
    log_confidence: float
    gate_active: bool


def partition_grid(g: int, overlap_ratio_max: float, seed: int) -> list:
    """g*g base cells on [0,1]^2, each side enlarged by U[0, ratio]*cell size.

    Cells are emitted row-major; each cell consumes four uniform draws in
    (left, right, top, bottom) order from a generator seeded by ``seed``, so
    the jitter is a pure function of the seed. Every returned rectangle
    contains its base cell and is clipped to the unit square.
    """
    if g < 1:
        raise DomainError("grid size must be >= 1")
    if not 0.0 <= overlap_ratio_max < 0.5:
        raise DomainError("overlap_ratio_max must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    cell = 1.0 / g
    views = []
    for row in range(g):
        for col in range(g):
            grow = rng.uniform(0.0, overlap_ratio_max, 4) * cell if overlap_ratio_max > 0 else np.zeros(4)
            x0 = max(0.0, col * cell - grow[0])
            x1 = min(1.0, (col + 1) * cell + grow[1])
            y0 = max(0.0, row * cell - grow[2])
            y1 = min(1.0, (row + 1) * cell + grow[3])
            views.append(ViewSpec(rect=(x0, y0, x1, y1), augmentation_seed=mix_seed(seed, row, col, 0)))
    return views


def local_threshold(global_score_of_single_positive: float, nu: float) -> float:
    """min of the confirmed positive's global score and the general threshold.

    When the general threshold would be too strict to trust any patch, scores
    at least as strong as the known positive's are still meaningful.
    """
    return min(global_score_of_single_positive, nu)


def aggregate_local(local_dists, zeta_local: float) -> np.ndarray:
    """Per class: the patch maximum if it clears the threshold, else the minimum."""
    local_dists = np.asarray(local_dists, dtype=np.float64)
    if local_dists.ndim != 2 or local_dists.shape[0] < 1:
        raise DomainError("at least one local distribution is required")
    peak = local_dists.max(axis=0)
    floor = local_dists.min(axis=0)
    return np.where(peak >= zeta_local, peak, floor)


def blend_final_scores(s_global, s_agg) -> np.ndarray:
    """Blended positive-evidence scores: (global + aggregated local) / 2."""
    return 0.5 * (np.asarray(s_global, dtype=np.float64) + np.asarray(s_agg, dtype=np.float64))


def assign_positive_pseudo(s_global, s_agg, cfg: DampConfig) -> np.ndarray:
    """+1 for classes in the top-k blended scores that clear the global threshold.

    Ties at the k-th rank break toward the lower class index.
    """
    s_final = blend_final_scores(s_global, s_agg)
    labels = np.zeros(s_final.shape[0], dtype=np.int8)
    order = np.argsort(-s_final, kind="stable")
    top = order[: cfg.top_k]
    labels[top[s_final[top] >= cfg.zeta_global]] = 1
    return labels


def assign_negative_pseudo(s_global, local_dists, positives, cfg: DampConfig) -> np.ndarray:
    """-1 for the floor(delta_neg_pct*C/100) lowest average scores.

    The average blends the global view with the patch mean. Negatives take
    precedence over positives on conflict; ties break toward the lower class
    index.
    """
    s_global = np.asarray(s_global, dtype=np.float64)
    local_dists = np.asarray(local_dists, dtype=np.float64)
    s_avg = 0.5 * (s_global + local_dists.mean(axis=0))
    labels = np.asarray(positives, dtype=np.int8).copy()
    n_neg = cfg.negative_count(s_avg.shape[0])
    if n_neg:
        labels[np.argsort(s_avg, kind="stable")[:n_neg]] = -1
    return labels


def generate_pseudo_labels(
    image_id: int,
    single_positive: int,
    scorer,
    damp_cfg: DampConfig,
    gpr_cfg: GprConfig,
    epoch: int,
    master_seed: int = 0,
):
    """Run the full per-image pipeline; returns (labels, ViewScores)."""
    c = scorer.class_count
    if not 0 <= single_positive < c:
        raise DomainError(f"confirmed positive {single_positive} outside [0, {c})")

    grid_seed = mix_seed(master_seed, epoch, image_id, GRID_JITTER_STREAM)
    local_views = partition_grid(damp_cfg.grid_size, damp_cfg.overlap_ratio_max, grid_seed)
    local_views = [
        replace(view, augmentation_seed=mix_seed(master_seed, epoch, image_id, 1 + z))
        for z, view in enumerate(local_views)
    ]
    global_view = ViewSpec(
        rect=FULL_IMAGE_RECT,
        augmentation_seed=mix_seed(master_seed, epoch, image_id, VIEW_GLOBAL),
    )

    try:
        s_global = scorer.score_view(image_id, global_view)
        local_dists = np.stack([scorer.score_view(image_id, v) for v in local_views])
    except ScorerError:
        raise
    except Exception as exc:
        raise ScorerError(f"scoring failed for image {image_id}: {exc}") from exc

    zeta_local = local_threshold(float(s_global[single_positive]), damp_cfg.nu)
    s_agg = aggregate_local(local_dists, zeta_local)
    positives = assign_positive_pseudo(s_global, s_agg, damp_cfg)
    labels = assign_negative_pseudo(s_global, local_dists, positives, damp_cfg)
    return labels, ViewScores(global_dist=s_global, local_dists=local_dists)


def _worker_count() -> int:
    raw = os.environ.get("SPML_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def generate_epoch(
    image_ids,
    single_positives,
    scorer,
    damp_cfg: DampConfig,
    gpr_cfg: GprConfig,
    epoch: int,
    master_seed: int = 0,
) -> EpochPseudoLabels:
    """Label every image for one epoch, then apply the confidence gate.

    The gate compares the log of the product of blended scores at each
    image's confirmed positive against log(epsilon); a triggered gate zeroes
    every label vector of the epoch.
    """
    image_ids = list(image_ids)
    single_positives = list(single_positives)
    c = scorer.class_count
    labels = np.zeros((len(image_ids), c), dtype=np.int8)
    s_at_pos = np.zeros(len(image_ids))

    def one(idx):
        img, c_hat = image_ids[idx], single_positives[idx]
        lab, views = generate_pseudo_labels(
            img, c_hat, scorer, damp_cfg, gpr_cfg, epoch, master_seed
        )
        zeta_local = local_threshold(float(views.global_dist[c_hat]), damp_cfg.nu)
        s_final = blend_final_scores(
            views.global_dist, aggregate_local(views.local_dists, zeta_local)
        )
        return idx, lab, float(s_final[c_hat])

    workers = _worker_count()
    if workers > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(image_ids))))
    else:
        results = [one(i) for i in range(len(image_ids))]
    for idx, lab, s in results:
        labels[idx] = lab
        s_at_pos[idx] = s

    with np.errstate(divide="ignore"):
        log_conf = float(np.sum(np.log(s_at_pos))) if len(image_ids) else 0.0
    gate = log_conf < math.log(gpr_cfg.epsilon_confidence)
    if gate:
        labels[:] = 0
    return EpochPseudoLabels(
        labels=labels,
        final_scores_at_positive=s_at_pos,
        log_confidence=log_conf,
        gate_active=bool(gate),
    )
