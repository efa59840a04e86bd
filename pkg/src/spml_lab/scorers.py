"""Pluggable view scorers.

A scorer turns (image, view rectangle) into a class probability distribution.
Three families are provided:

* ``EmbeddingScorer``: cosine similarities between a view embedding and per-
  class text embeddings (optionally perturbed by a frozen label-graph
  propagation module), sharpened by a temperature softmax.
* ``MapScorer`` over a :class:`SpatialScoreMap`: pools nonnegative per-class
  evidence inside the view rectangle (border pixels weighted by coverage
  fraction), jitters the log-evidence with seeded Gaussian noise as the
  score-level stand-in for input augmentation, then temperature-softmaxes.
* The SSM1 file format connects both worlds: externally exported score maps
  load into the same ``MapScorer``.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import DomainError, ConfigError, FormatError, SpmlLabError, ViewSpec

SSM1_MAGIC = b"SSM1"
SSM1_HEADER = struct.Struct("<4sIII")


class ScorerError(SpmlLabError):
    """A view scorer failed; message carries the image context."""


# ---------------------------------------------------------------------------
# Embedding-based scoring
# ---------------------------------------------------------------------------


def cosine_scores(h, text) -> np.ndarray:
    """Cosine similarity of one embedding against each row of ``text``."""
    h = np.asarray(h, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    hn = np.linalg.norm(h)
    tn = np.linalg.norm(text, axis=1)
    if hn == 0.0 or np.any(tn == 0.0):
        raise DomainError("cosine similarity undefined for zero-norm vectors")
    return (text @ h) / (tn * hn)


def temperature_softmax(scores, tau: float) -> np.ndarray:
    """Numerically stable softmax of scores/tau (max subtraction)."""
    if tau <= 0.0:
        raise ConfigError("tau must be positive")
    z = np.asarray(scores, dtype=np.float64) / tau
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def build_adjacency(text) -> np.ndarray:
    """Row-stochastic class-affinity matrix from text-embedding cosines.

    Negative cosines are clamped to zero, the diagonal is pinned to one
    (self-loop), and rows are normalized to sum to one so propagation stays
    bounded.
    """
    text = np.asarray(text, dtype=np.float64)
    norms = np.linalg.norm(text, axis=1)
    if np.any(norms == 0.0):
        raise DomainError("adjacency undefined for zero-norm embedding rows")
    unit = text / norms[:, None]
    adj = unit @ unit.T
    np.clip(adj, 0.0, None, out=adj)
    np.fill_diagonal(adj, 1.0)
    return adj / adj.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class GcnNoiseModule:
    """Frozen label-to-label propagation: residual stack of LeakyReLU(A H W)."""

    layer_weights: tuple
    adjacency: np.ndarray
    leaky_slope: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        adj = self.adjacency
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise DomainError("adjacency must be square")
        if not np.allclose(adj.sum(axis=1), 1.0, atol=1e-9):
            raise DomainError("adjacency rows must sum to 1")

    @property
    def layer_count(self) -> int:
        return len(self.layer_weights)

    @classmethod
    def create(cls, text, layer_count: int, seed: int, leaky_slope: float = 0.01):
        """Initialize from text embeddings: weights uniform on [-1/sqrt(K), 1/sqrt(K)]."""
        text = np.asarray(text, dtype=np.float64)
        k = text.shape[1]
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(k)
        weights = tuple(rng.uniform(-bound, bound, size=(k, k)) for _ in range(layer_count))
        return cls(layer_weights=weights, adjacency=build_adjacency(text), leaky_slope=leaky_slope)


def _leaky_relu(x, slope):
    return np.where(x >= 0.0, x, slope * x)


def gcn_noise(text, module: GcnNoiseModule) -> np.ndarray:
    """Residual propagation of text embeddings over the frozen label graph."""
    h = np.asarray(text, dtype=np.float64)
    if module.adjacency.shape[0] != h.shape[0]:
        raise DomainError("adjacency/class-count mismatch")
    out = h
    for w in module.layer_weights:
        if w.shape != (h.shape[1], h.shape[1]):
            raise DomainError("layer weight shape mismatch")
        out = _leaky_relu(module.adjacency @ out @ w, module.leaky_slope)
    return out + h


class EmbeddingScorer:
    """Scores views by cosine similarity to (optionally perturbed) text embeddings.

    ``embed_view(image_id, view) -> (K,)`` supplies the view embedding; the
    perturbed text embeddings are computed once at construction and stay
    frozen afterwards.
    """

    def __init__(self, text_embeddings, embed_view, tau: float, noise: GcnNoiseModule | None = None):
        text = np.asarray(text_embeddings, dtype=np.float64)
        self.text_embeddings = gcn_noise(text, noise) if noise is not None else text
        self.embed_view = embed_view
        self.tau = tau
        self.class_count = text.shape[0]

    def score_view(self, image_id: int, view: ViewSpec) -> np.ndarray:
        h = self.embed_view(image_id, view)
        return temperature_softmax(cosine_scores(h, self.text_embeddings), self.tau)


# ---------------------------------------------------------------------------
# Spatial score maps
# ---------------------------------------------------------------------------


@dataclass
class SpatialScoreMap:
    """Dense nonnegative class-evidence grid (H, W, C), float32 storage."""

    evidence: np.ndarray
    _integral: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ev = np.ascontiguousarray(self.evidence, dtype=np.float32)
        if ev.ndim != 3 or min(ev.shape) < 1:
            raise DomainError("evidence must be a nonempty (H, W, C) array")
        if not np.isfinite(ev).all():
            raise DomainError("evidence must be finite")
        if ev.size and float(ev.min()) < 0.0:
            raise DomainError("evidence must be nonnegative")
        self.evidence = ev

    @property
    def height(self) -> int:
        return self.evidence.shape[0]

    @property
    def width(self) -> int:
        return self.evidence.shape[1]

    @property
    def class_count(self) -> int:
        return self.evidence.shape[2]

    def integral(self) -> np.ndarray:
        """(H+1, W+1, C) float64 prefix sums, cached after first use."""
        if self._integral is None:
            h, w, c = self.evidence.shape
            acc = np.zeros((h + 1, w + 1, c), dtype=np.float64)
            acc[1:, 1:] = self.evidence.astype(np.float64).cumsum(axis=0).cumsum(axis=1)
            self._integral = acc
        return self._integral


def oracle_score_view(
    smap: SpatialScoreMap,
    view: ViewSpec,
    tau: float,
    noise_sigma: float,
    seed: int,
) -> np.ndarray:
    """Score one view of a spatial evidence map.

    Evidence inside the view rectangle is pooled per class with fractional
    border coverage; the log of the pooled evidence is jittered by seeded
    Gaussian noise of scale ``noise_sigma`` (the augmentation stand-in) and
    temperature-softmaxed. All-zero pooled evidence yields the uniform
    distribution.
    """
    x0, y0, x1, y1 = view.rect
    w, h = smap.width, smap.height
    rect = np.array([[x0 * w, y0 * h, x1 * w, y1 * h]], dtype=np.float64)
    if rect[0, 2] - rect[0, 0] <= 0.0 or rect[0, 3] - rect[0, 1] <= 0.0:
        raise DomainError("view rectangle has zero area on this map")
    pooled = kernels.pool_rects(smap.integral(), rect)[0]
    if not pooled.any():
        return np.full(smap.class_count, 1.0 / smap.class_count)
    with np.errstate(divide="ignore"):
        scores = np.log(pooled)
    if noise_sigma > 0.0:
        scores = scores + np.random.default_rng(seed).normal(0.0, noise_sigma, scores.shape)
    return temperature_softmax(scores, tau)


class MapScorer:
    """Scores views of spatial score maps; the per-view seed drives the jitter.

    ``call_counts`` tracks how many views were scored per image; the trainer
    uses it to prove the validation split never reaches the pseudo-labeler.
    """

    def __init__(self, maps: dict, tau: float, noise_sigma: float = 0.0):
        if not maps:
            raise DomainError("MapScorer needs at least one map")
        counts = {m.class_count for m in maps.values()}
        if len(counts) != 1:
            raise DomainError("all maps must share one class count")
        self.maps = maps
        self.tau = tau
        self.noise_sigma = noise_sigma
        self.class_count = counts.pop()
        self.call_counts: dict = {}

    def score_view(self, image_id: int, view: ViewSpec) -> np.ndarray:
        smap = self.maps.get(image_id)
        if smap is None:
            raise ScorerError(f"no score map for image {image_id}")
        self.call_counts[image_id] = self.call_counts.get(image_id, 0) + 1
        return oracle_score_view(smap, view, self.tau, self.noise_sigma, view.augmentation_seed)


# ---------------------------------------------------------------------------
# SSM1 serialization
# ---------------------------------------------------------------------------


def save_score_map(smap: SpatialScoreMap, path, sidecar: dict | None = None) -> None:
    """Write an SSM1 file (magic, u32 LE H/W/C, f32 LE evidence, class-fastest)."""
    payload = SSM1_HEADER.pack(SSM1_MAGIC, smap.height, smap.width, smap.class_count)
    payload += np.ascontiguousarray(smap.evidence, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    if sidecar is not None:
        with open(f"{path}.json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_score_map(path) -> SpatialScoreMap:
    """Read and validate an SSM1 file; format errors name the byte offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < SSM1_HEADER.size:
        raise FormatError(f"{path}: truncated header, file ends at byte {len(blob)}")
    magic, h, w, c = SSM1_HEADER.unpack_from(blob, 0)
    if magic != SSM1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    for name, value, offset in (("height", h, 4), ("width", w, 8), ("class count", c, 12)):
        if value == 0:
            raise FormatError(f"{path}: zero {name} in header at byte {offset}")
    expected = SSM1_HEADER.size + h * w * c * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, file ends at byte {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=SSM1_HEADER.size)
    bad = ~np.isfinite(flat) | (flat < 0.0)
    if bad.any():
        idx = int(np.argmax(bad))
        raise FormatError(
            f"{path}: invalid evidence value {flat[idx]!r} at byte {SSM1_HEADER.size + idx * 4}"
        )
    return SpatialScoreMap(evidence=flat.reshape(h, w, c).copy())


def load_sidecar(path) -> dict | None:
    try:
        with open(f"{path}.json") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None
