"""Shared domain types, label algebra, configuration, and deterministic seeding.

Conventions used across the package:

* An annotation vector marks exactly one confirmed-positive class per image;
  every other class is unannotated (and treated as negative by the baseline).
* A pseudo-label vector takes values in {-1, 0, +1}: negative / undefined /
  positive, as produced by an external labeling method each epoch.
* Probabilities are always clamped into [PROB_EPS, 1 - PROB_EPS] before any
  logarithm; every loss branch contains log(p) or log(1 - p).
* Geometry is normalized: view rectangles live in [0, 1]^2 so the score-level
  pipeline is resolution agnostic.
"""

import math
from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-7

# Reserved view-index streams for seed derivation. Indices 0..R address the
# global view (0) and local patches (1..R); the grid-jitter stream sits far
# above any realistic patch count.
VIEW_GLOBAL = 0
GRID_JITTER_STREAM = 1 << 32
SHUFFLE_STREAM = (1 << 32) + 1
SPLIT_STREAM = (1 << 32) + 2
RANDOM_LABEL_STREAM = (1 << 32) + 3


class SpmlLabError(Exception):
    """Base class for all package errors."""


class DomainError(SpmlLabError, ValueError):
    """An argument is outside the documented domain of an operation."""


class ConfigError(SpmlLabError, ValueError):
    """A configuration value or file is invalid."""


class FormatError(SpmlLabError, ValueError):
    """A serialized artifact does not match its expected byte layout."""


class MetricUndefinedError(SpmlLabError, ValueError):
    """A metric has no defined value for the given inputs."""


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


@dataclass(frozen=True)
class SeedContext:
    """Derivation path for a reproducible stream: (epoch, image, view)."""

    master_seed: int
    epoch: int
    image_id: int
    view_index: int


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def derive_seed(ctx: SeedContext) -> int:
    """Pure, collision-resistant 64-bit seed for a (epoch, image, view) tuple.

    Splitmix-style finalizers are chained over the path components, so the
    result depends on every component and is identical on every platform.
    """
    h = int(ctx.master_seed) & _MASK64
    for part in (ctx.epoch, ctx.image_id, ctx.view_index):
        h = _splitmix64(h ^ (int(part) & _MASK64))
    return h


def mix_seed(master_seed: int, epoch: int, image_id: int, view_index: int) -> int:
    """Convenience wrapper over :func:`derive_seed`."""
    return derive_seed(SeedContext(master_seed, epoch, image_id, view_index))


def derive_seed_array(master_seed, epoch, image_id, view_index) -> np.ndarray:
    """Vectorized twin of :func:`derive_seed` (uint64 arrays, broadcastable)."""
    golden = np.uint64(_GOLDEN)
    m1 = np.uint64(_MIX1)
    m2 = np.uint64(_MIX2)

    def mix(x):
        x = x + golden
        x = (x ^ (x >> np.uint64(30))) * m1
        x = (x ^ (x >> np.uint64(27))) * m2
        return x ^ (x >> np.uint64(31))

    h = np.broadcast_to(np.asarray(master_seed, dtype=np.uint64), np.broadcast_shapes(
        np.shape(master_seed), np.shape(epoch), np.shape(image_id), np.shape(view_index)
    )).copy()
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        for part in (epoch, image_id, view_index):
            h = mix(h ^ np.asarray(part, dtype=np.uint64))
    return h


# ---------------------------------------------------------------------------
# Probability clamping
# ---------------------------------------------------------------------------


def clamp_probability(p: float) -> float:
    """Clamp a probability into [PROB_EPS, 1 - PROB_EPS] for log-domain safety."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability {p!r} outside [0, 1]")
    return min(max(p, PROB_EPS), 1.0 - PROB_EPS)


def clamp_probabilities(p: np.ndarray) -> np.ndarray:
    """Array version of :func:`clamp_probability`."""
    p = np.asarray(p, dtype=np.float64)
    if p.size and (np.min(p) < 0.0 or np.max(p) > 1.0):
        raise DomainError("probabilities outside [0, 1]")
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


# ---------------------------------------------------------------------------
# Label vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationVector:
    """Per-image confirmed-label vector with exactly one positive entry."""

    entries: tuple

    def __post_init__(self):
        if any(e not in (0, 1) for e in self.entries):
            raise DomainError("annotation entries must be 0 or 1")
        if sum(self.entries) != 1:
            raise DomainError("annotation must contain exactly one positive entry")

    @property
    def positive_class(self) -> int:
        return self.entries.index(1)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.uint8)


@dataclass(frozen=True)
class GroundTruthVector:
    """Full label vector; only the simulator and evaluation may see it."""

    entries: tuple

    def __post_init__(self):
        if any(e not in (0, 1) for e in self.entries):
            raise DomainError("ground-truth entries must be 0 or 1")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.uint8)


@dataclass(frozen=True)
class PseudoLabelVector:
    """Ternary {-1, 0, +1} label vector produced by a pseudo-labeling method."""

    entries: tuple

    def __post_init__(self):
        if any(e not in (-1, 0, 1) for e in self.entries):
            raise DomainError("pseudo-label entries must be in {-1, 0, +1}")

    def positive_count(self) -> int:
        return sum(1 for e in self.entries if e == 1)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.int8)


def check_annotation_batch(ann: np.ndarray) -> np.ndarray:
    """Validate an (N, C) batch of single-positive annotation rows."""
    ann = np.asarray(ann)
    if ann.ndim != 2:
        raise DomainError("annotation batch must be 2-D")
    if not np.isin(ann, (0, 1)).all():
        raise DomainError("annotation entries must be 0 or 1")
    if not (ann.sum(axis=1) == 1).all():
        raise DomainError("every annotation row must have exactly one positive")
    return ann.astype(np.uint8)


def check_pseudo_batch(labels: np.ndarray, top_k: int | None = None) -> np.ndarray:
    """Validate an (N, C) batch of ternary pseudo-label rows."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DomainError("pseudo-label batch must be 2-D")
    if not np.isin(labels, (-1, 0, 1)).all():
        raise DomainError("pseudo-label entries must be in {-1, 0, +1}")
    if top_k is not None and int((labels == 1).sum(axis=1).max(initial=0)) > top_k:
        raise DomainError(f"a pseudo-label row exceeds the positive cap k={top_k}")
    return labels.astype(np.int8)


# ---------------------------------------------------------------------------
# Prediction batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionBatch:
    """Classifier outputs under training: logits and clamped sigmoid probabilities."""

    logits: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        if self.logits.shape != self.probabilities.shape or self.logits.ndim != 2:
            raise DomainError("logits/probabilities must share an (N, C) shape")
        pmin = float(np.min(self.probabilities)) if self.probabilities.size else 0.5
        pmax = float(np.max(self.probabilities)) if self.probabilities.size else 0.5
        if pmin < PROB_EPS or pmax > 1.0 - PROB_EPS:
            raise DomainError("probabilities must be clamped inside (0, 1)")

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "PredictionBatch":
        logits = np.ascontiguousarray(logits, dtype=np.float64)
        probs = np.clip(_sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
        return cls(logits=logits, probabilities=probs)

    @property
    def instance_count(self) -> int:
        return self.logits.shape[0]

    @property
    def class_count(self) -> int:
        return self.logits.shape[1]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign to avoid overflow in exp for large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GprConfig:
    """Hyperparameters of the robust pseudo-label loss family.

    q1/q2 interpolate the two generalized-cross-entropy terms between MAE-like
    (q=1) and log-loss (q->0) behaviour; q3 smooths the positive-pseudo-label
    branch; lambda1 <= lambda2 clamp the inverted bell weight; eta scales the
    positive-count regularizer around the expected positives per image m;
    beta parameterizes the false-negative estimate; the mu/sigma endpoints
    define the linear bell-weight schedule; epsilon_confidence gates the
    pseudo-labeler off when its confidence product falls below it.
    """

    q1: float = 0.7
    q2: float = 0.7
    q3: float = 0.7
    lambda1: float = 0.1
    lambda2: float = 0.9
    eta: float = 0.1
    beta: float = 2.0
    mu_start: float = 0.10
    mu_end: float = 0.30
    sigma_start: float = 0.20
    sigma_end: float = 0.10
    m: float | None = None
    epsilon_confidence: float = 1e-300

    def __post_init__(self):
        if not 0.0 < self.q1 <= 1.0 or not 0.0 < self.q2 <= 1.0:
            raise ConfigError("q1 and q2 must lie in (0, 1]")
        if not 0.0 <= self.q3 <= 1.0:
            raise ConfigError("q3 must lie in [0, 1]")
        if not 0.0 <= self.lambda1 <= 1.0 or not 0.0 <= self.lambda2 <= 1.0:
            raise ConfigError("lambda1 and lambda2 must lie in [0, 1]")
        if self.lambda1 > self.lambda2:
            raise ConfigError("lambda1 must not exceed lambda2")
        if self.eta < 0.0:
            raise ConfigError("eta must be nonnegative")
        if self.beta <= 0.0:
            raise ConfigError("beta must be positive")
        if self.sigma_start <= 0.0 or self.sigma_end <= 0.0:
            raise ConfigError("sigma schedule endpoints must be positive")
        if self.m is not None and self.m <= 0.0:
            raise ConfigError("m must be positive when given")
        if not 0.0 < self.epsilon_confidence <= 1.0:
            raise ConfigError("epsilon_confidence must lie in (0, 1]")


@dataclass(frozen=True)
class DampConfig:
    """Hyperparameters of the multi-focus pseudo-labeling pipeline."""

    grid_size: int = 4
    overlap_ratio_max: float = 0.2
    nu: float = 0.4
    zeta_global: float = 0.5
    top_k: int = 3
    delta_neg_pct: float = 20.0
    tau: float = 1.0

    def __post_init__(self):
        if self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if not 0.0 <= self.overlap_ratio_max < 0.5:
            raise ConfigError("overlap_ratio_max must lie in [0, 0.5)")
        if not 0.0 < self.nu < 1.0:
            raise ConfigError("nu must lie in (0, 1)")
        if not 0.0 < self.zeta_global < 1.0:
            raise ConfigError("zeta_global must lie in (0, 1)")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if not 0.0 <= self.delta_neg_pct < 100.0:
            raise ConfigError("delta_neg_pct must lie in [0, 100)")
        if self.tau <= 0.0:
            raise ConfigError("tau must be positive")

    @property
    def patch_count(self) -> int:
        return self.grid_size * self.grid_size

    def negative_count(self, class_count: int) -> int:
        """Number of classes forced negative: floor(delta_neg_pct * C / 100)."""
        return int(math.floor(self.delta_neg_pct * class_count / 100.0))


@dataclass(frozen=True)
class ViewSpec:
    """A normalized view rectangle plus the seed for its scoring perturbation."""

    rect: tuple
    augmentation_seed: int = 0

    def __post_init__(self):
        x0, y0, x1, y1 = self.rect
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise DomainError(f"view rect {self.rect!r} is not a valid sub-rectangle of [0,1]^2")
