"""Synthetic world generation and the training loop.

The simulator places per-class evidence blobs on a spatial grid; features are
a noisy linear readout of per-class evidence mass so that a small linear
classifier can learn the task in seconds. Exactly one true positive per
image is kept as the annotation. The epoch loop regenerates pseudo-labels
every epoch (the labels legitimately drift because view jitter and score
noise are reseeded per epoch), applies the epoch-level confidence gate,
then runs seeded minibatch updates with an Adam-style optimizer.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import damp as damp_mod
from . import evaluation
from .core import (
    ConfigError,
    DampConfig,
    DomainError,
    GprConfig,
    PredictionBatch,
    RANDOM_LABEL_STREAM,
    SHUFFLE_STREAM,
    SPLIT_STREAM,
    mix_seed,
)
from .gpr_loss import alpha_schedule, bce_loss_batch, gpr_loss_batch, gr_loss_batch
from .scorers import MapScorer, SpatialScoreMap, load_score_map, save_score_map

METHODS = (
    "assume_negative_bce",
    "gr_loss",
    "bce_damp",
    "gpr_damp",
    "gpr_random",
    "bce_random",
    "gpr_file_scorer",
)
_DAMP_METHODS = {"bce_damp", "gpr_damp", "gpr_file_scorer"}
_RANDOM_METHODS = {"gpr_random", "bce_random"}
_GPR_METHODS = {"gpr_damp", "gpr_random", "gpr_file_scorer"}

CHECKPOINT_HEADER = "spml-lab-checkpoint-v1"


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticInstance:
    image_id: int
    score_map: SpatialScoreMap
    features: np.ndarray
    ground_truth: np.ndarray
    annotation_class: int


@dataclass(frozen=True)
class SyntheticWorld:
    instances: tuple
    class_count: int
    expected_positives: float

    @property
    def instance_count(self) -> int:
        return len(self.instances)

    @property
    def feature_dim(self) -> int:
        return len(self.instances[0].features)

    def feature_matrix(self, indices=None) -> np.ndarray:
        idx = range(self.instance_count) if indices is None else indices
        return np.stack([self.instances[i].features for i in idx])

    def truth_matrix(self, indices=None) -> np.ndarray:
        idx = range(self.instance_count) if indices is None else indices
        return np.stack([self.instances[i].ground_truth for i in idx])

    def annotation_matrix(self, indices=None) -> np.ndarray:
        idx = list(range(self.instance_count) if indices is None else indices)
        out = np.zeros((len(idx), self.class_count), dtype=np.uint8)
        for row, i in enumerate(idx):
            out[row, self.instances[i].annotation_class] = 1
        return out


def simulate_world(
    class_count: int,
    instance_count: int,
    map_size: int,
    objects_per_image,
    feature_noise: float,
    seed: int,
    feature_dim: int = 32,
) -> SyntheticWorld:
    """Generate a seeded spatial multi-label world.

    Each instance draws an object count from the inclusive integer range
    ``objects_per_image = (lo, hi)``, places that many distinct-class
    evidence blobs (truncated Gaussian bumps) on the map, and keeps one
    uniformly chosen positive as its annotation. Features are a fixed random
    linear readout of per-class log evidence mass plus Gaussian noise.
    """
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    if instance_count < 1:
        raise ConfigError("instance_count must be >= 1")
    lo, hi = objects_per_image
    if not 1 <= lo <= hi <= class_count:
        raise ConfigError("objects_per_image must satisfy 1 <= lo <= hi <= class_count")

    rng = np.random.default_rng(seed)
    readout = rng.normal(0.0, 1.0 / math.sqrt(class_count), size=(feature_dim, class_count))
    ys, xs = np.mgrid[0:map_size, 0:map_size]
    ys = ys + 0.5
    xs = xs + 0.5

    instances = []
    for image_id in range(instance_count):
        count = int(rng.integers(lo, hi + 1))
        classes = rng.choice(class_count, size=count, replace=False)
        evidence = np.zeros((map_size, map_size, class_count), dtype=np.float64)
        for cls in classes:
            cy, cx = rng.uniform(0.0, map_size, 2)
            radius = map_size * rng.uniform(0.10, 0.22)
            amp = rng.uniform(0.6, 1.4)
            d2 = (ys - cy) ** 2 + (xs - cx) ** 2
            blob = amp * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
            blob[d2 > radius * radius] = 0.0
            evidence[:, :, cls] += blob

        truth = (evidence.sum(axis=(0, 1)) > 0.0).astype(np.uint8)
        positives = np.flatnonzero(truth)
        annotation = int(rng.choice(positives))
        mass = np.log1p(evidence.sum(axis=(0, 1)))
        features = readout @ mass + feature_noise * rng.normal(0.0, 1.0, feature_dim)
        instances.append(
            SyntheticInstance(
                image_id=image_id,
                score_map=SpatialScoreMap(evidence=evidence.astype(np.float32)),
                features=features,
                ground_truth=truth,
                annotation_class=annotation,
            )
        )

    expected = float(np.mean([inst.ground_truth.sum() for inst in instances]))
    return SyntheticWorld(
        instances=tuple(instances),
        class_count=class_count,
        expected_positives=expected,
    )


# ---------------------------------------------------------------------------
# Classifier and optimizer
# ---------------------------------------------------------------------------


@dataclass
class ClassifierModel:
    """Linear map from features to per-class logits."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, feature_dim: int, class_count: int) -> "ClassifierModel":
        return cls(
            weights=np.zeros((feature_dim, class_count)),
            bias=np.zeros(class_count),
        )

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(weights=self.weights.copy(), bias=self.bias.copy())


def forward(model: ClassifierModel, features: np.ndarray) -> PredictionBatch:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.weights.shape[0]:
        raise DomainError("feature matrix does not match model input width")
    return PredictionBatch.from_logits(features @ model.weights + model.bias)


def parameter_gradients(features: np.ndarray, logit_grad: np.ndarray) -> dict:
    """Chain batch logit gradients through the affine map."""
    return {
        "weights": np.asarray(features, dtype=np.float64).T @ logit_grad,
        "bias": logit_grad.sum(axis=0),
    }


class AdamOptimizer:
    """Adam with standard bias-corrected moments.

    With beta1 = beta2 = 0 the update reduces exactly to
    lr * g / (|g| + eps).
    """

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.step_count += 1
        t = self.step_count
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self._m.get(name, np.zeros_like(p))
            v = self._v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            out[name] = p - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    method: str = "gpr_damp"
    epochs: int = 8
    batch_size: int = 16
    learning_rate: float = 1e-3
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    per_case_sums: tuple | None
    regularizer: float | None
    m_hat: float | None
    val_map: float
    alpha_mu: float
    alpha_sigma: float
    log_confidence: float | None
    gate_active: bool | None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss_total": self.loss_total,
            "per_case_sums": list(self.per_case_sums) if self.per_case_sums is not None else None,
            "regularizer": self.regularizer,
            "m_hat": self.m_hat,
            "val_map": self.val_map,
            "alpha_mu": self.alpha_mu,
            "alpha_sigma": self.alpha_sigma,
            "log_confidence": self.log_confidence,
            "gate_active": self.gate_active,
        }


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    epoch_labels: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_map: float = -1.0
    m_resolved: float = 0.0
    pseudo_report: evaluation.PseudoQualityReport | None = None

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "best_epoch": self.best_epoch,
            "best_val_map": self.best_val_map,
            "m_resolved": self.m_resolved,
        }


class Trainer:
    """Owns the model, optimizer, split, scorer, and per-epoch labeling."""

    def __init__(
        self,
        world: SyntheticWorld,
        gpr_cfg: GprConfig,
        damp_cfg: DampConfig,
        settings: TrainSettings,
        score_noise_sigma: float = 0.0,
    ):
        self.world = world
        self.damp_cfg = damp_cfg
        self.settings = settings

        n = world.instance_count
        perm = np.random.default_rng(mix_seed(settings.seed, 0, 0, SPLIT_STREAM)).permutation(n)
        n_val = max(1, int(round(settings.validation_fraction * n)))
        if n_val >= n:
            raise ConfigError("validation split leaves no training instances")
        self.val_indices = np.sort(perm[:n_val])
        self.train_indices = np.sort(perm[n_val:])

        self.annotations = world.annotation_matrix()
        self.truths = world.truth_matrix()
        self.features = world.feature_matrix()

        if gpr_cfg.m is None:
            m_emp = float(self.truths[self.train_indices].sum(axis=1).mean())
            gpr_cfg = replace(gpr_cfg, m=m_emp)
        self.gpr_cfg = gpr_cfg

        self.scorer = None
        if settings.method in _DAMP_METHODS:
            maps = {i: world.instances[i].score_map for i in self.train_indices}
            self.scorer = MapScorer(maps, tau=damp_cfg.tau, noise_sigma=score_noise_sigma)

        self.model = ClassifierModel.zeros(world.feature_dim, world.class_count)
        self.optimizer = AdamOptimizer(settings.learning_rate)
        self.history = TrainHistory(m_resolved=float(self.gpr_cfg.m))
        self._best_model = self.model.copy()

    # -- labeling ----------------------------------------------------------

    def _labels_for_epoch(self, epoch: int):
        method = self.settings.method
        n, c = self.world.instance_count, self.world.class_count
        labels = np.zeros((n, c), dtype=np.int8)
        if method in _DAMP_METHODS:
            epoch_out = damp_mod.generate_epoch(
                image_ids=list(self.train_indices),
                single_positives=[self.world.instances[i].annotation_class for i in self.train_indices],
                scorer=self.scorer,
                damp_cfg=self.damp_cfg,
                gpr_cfg=self.gpr_cfg,
                epoch=epoch,
                master_seed=self.settings.seed,
            )
            labels[self.train_indices] = epoch_out.labels
            return labels, epoch_out.log_confidence, epoch_out.gate_active
        if method in _RANDOM_METHODS:
            rate = max(0.0, self.world.expected_positives - 1.0) / max(1, c - 1)
            rng = np.random.default_rng(mix_seed(self.settings.seed, epoch, 0, RANDOM_LABEL_STREAM))
            draw = rng.random((len(self.train_indices), c)) < min(1.0, rate)
            ann = self.annotations[self.train_indices] == 1
            labels[self.train_indices] = (draw & ~ann).astype(np.int8)
            return labels, None, None
        return labels, None, None

    # -- one epoch ---------------------------------------------------------

    def train_epoch(self, epoch: int) -> EpochRecord:
        settings = self.settings
        alpha = alpha_schedule(epoch, settings.epochs, self.gpr_cfg)
        labels, log_conf, gate = self._labels_for_epoch(epoch)
        self.history.epoch_labels.append(labels[self.train_indices].copy())

        order = self.train_indices[
            np.random.default_rng(mix_seed(settings.seed, epoch, 0, SHUFFLE_STREAM)).permutation(
                len(self.train_indices)
            )
        ]
        family = "gpr" if settings.method in _GPR_METHODS else ("gr" if settings.method == "gr_loss" else "bce")

        totals, case_sums, regs, m_hats = [], [], [], []
        for start in range(0, len(order), settings.batch_size):
            batch = order[start : start + settings.batch_size]
            preds = forward(self.model, self.features[batch])
            ann_b = self.annotations[batch]
            if family == "gpr":
                breakdown, grad = gpr_loss_batch(preds, ann_b, labels[batch], self.gpr_cfg, alpha)
                totals.append(breakdown.total)
                case_sums.append(breakdown.per_case_sums)
                regs.append(breakdown.regularizer_value)
                m_hats.append(breakdown.m_hat)
            elif family == "gr":
                total, grad = gr_loss_batch(preds, ann_b, self.gpr_cfg, alpha)
                totals.append(total)
            else:
                targets = np.where(labels[batch] == 1, 1, ann_b).astype(np.float64)
                total, grad = bce_loss_batch(preds, targets)
                totals.append(total)
            grads = parameter_gradients(self.features[batch], grad)
            params = self.optimizer.step(
                {"weights": self.model.weights, "bias": self.model.bias}, grads
            )
            self.model.weights = params["weights"]
            self.model.bias = params["bias"]

        val_preds = forward(self.model, self.features[self.val_indices])
        val_map = evaluation.mean_average_precision(val_preds, self.truths[self.val_indices])

        record = EpochRecord(
            epoch=epoch,
            loss_total=float(np.mean(totals)),
            per_case_sums=tuple(float(v) for v in np.mean(case_sums, axis=0)) if case_sums else None,
            regularizer=float(np.mean(regs)) if regs else None,
            m_hat=float(np.mean(m_hats)) if m_hats else None,
            val_map=val_map,
            alpha_mu=alpha.mu,
            alpha_sigma=alpha.sigma,
            log_confidence=log_conf,
            gate_active=gate,
        )
        self.history.records.append(record)
        if val_map > self.history.best_val_map:
            self.history.best_val_map = val_map
            self.history.best_epoch = epoch
            self._best_model = self.model.copy()
        return record

    # -- full run ----------------------------------------------------------

    def fit(self):
        for epoch in range(self.settings.epochs):
            self.train_epoch(epoch)
        self.history.pseudo_report = evaluation.pseudo_quality(
            self.history.epoch_labels,
            self.truths[self.train_indices],
            self.annotations[self.train_indices],
        )
        return self._best_model, self.history


def fit(
    world: SyntheticWorld,
    gpr_cfg: GprConfig,
    damp_cfg: DampConfig,
    settings: TrainSettings,
    score_noise_sigma: float = 0.0,
):
    """Train for ``settings.epochs`` and return the best-validation model."""
    return Trainer(world, gpr_cfg, damp_cfg, settings, score_noise_sigma).fit()


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_checkpoint(model: ClassifierModel, path) -> None:
    """Plain-text checkpoint: shapes plus decimal parameter rows."""
    lines = [CHECKPOINT_HEADER, f"weights {model.weights.shape[0]} {model.weights.shape[1]}"]
    lines += [" ".join(repr(v) for v in row) for row in model.weights.tolist()]
    lines.append(f"bias {model.bias.shape[0]}")
    lines.append(" ".join(repr(v) for v in model.bias.tolist()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> ClassifierModel:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ConfigError(f"{path}: not a spml-lab checkpoint")
    d, c = (int(v) for v in lines[1].split()[1:])
    weights = np.array([[float(v) for v in lines[2 + i].split()] for i in range(d)])
    bias = np.array([float(v) for v in lines[3 + d].split()])
    if weights.shape != (d, c) or bias.shape != (c,):
        raise ConfigError(f"{path}: checkpoint shape mismatch")
    return ClassifierModel(weights=weights, bias=bias)


def save_world(world: SyntheticWorld, out_dir) -> None:
    """Write SSM1 maps plus a JSON manifest (ids, annotations, truths, features)."""
    maps_dir = os.path.join(out_dir, "maps")
    os.makedirs(maps_dir, exist_ok=True)
    entries = []
    for inst in world.instances:
        rel = os.path.join("maps", f"img_{inst.image_id:05d}.ssm1")
        save_score_map(inst.score_map, os.path.join(out_dir, rel))
        entries.append(
            {
                "image_id": inst.image_id,
                "map": rel,
                "annotation": inst.annotation_class,
                "ground_truth": [int(v) for v in inst.ground_truth],
                "features": [float(v) for v in inst.features],
            }
        )
    manifest = {
        "format": "spml-world-1",
        "class_count": world.class_count,
        "expected_positives": world.expected_positives,
        "instances": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_world(world_dir) -> SyntheticWorld:
    """Load a manifest-described world; derives features from maps if absent."""
    manifest_path = os.path.join(world_dir, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{manifest_path}: missing world manifest") from exc
    if manifest.get("format") != "spml-world-1":
        raise ConfigError(f"{manifest_path}: unsupported manifest format")
    class_count = int(manifest["class_count"])
    instances = []
    for entry in manifest["instances"]:
        smap = load_score_map(os.path.join(world_dir, entry["map"]))
        if smap.class_count != class_count:
            raise ConfigError(f"{entry['map']}: class count differs from manifest")
        truth = np.asarray(entry["ground_truth"], dtype=np.uint8)
        if "features" in entry:
            features = np.asarray(entry["features"], dtype=np.float64)
        else:
            features = np.log1p(smap.evidence.astype(np.float64).mean(axis=(0, 1)))
        instances.append(
            SyntheticInstance(
                image_id=int(entry["image_id"]),
                score_map=smap,
                features=features,
                ground_truth=truth,
                annotation_class=int(entry["annotation"]),
            )
        )
    expected = float(np.mean([inst.ground_truth.sum() for inst in instances]))
    return SyntheticWorld(
        instances=tuple(instances),
        class_count=class_count,
        expected_positives=float(manifest.get("expected_positives", expected)),
    )
