import numpy as np
import pytest

from spml_lab.core import (
    AnnotationVector,
    DampConfig,
    DomainError,
    ConfigError,
    GprConfig,
    PredictionBatch,
    PseudoLabelVector,
    SeedContext,
    ViewSpec,
    clamp_probability,
    clamp_probabilities,
    check_annotation_batch,
    check_pseudo_batch,
    derive_seed,
    derive_seed_array,
    mix_seed,
)


class TestDeriveSeed:
    def test_deterministic(self):
        ctx = SeedContext(0, 0, 0, 0)
        first = derive_seed(ctx)
        assert derive_seed(ctx) == first
        assert isinstance(first, int)
        assert 0 <= first < 2**64

    def test_component_sensitivity(self):
        base = derive_seed(SeedContext(0, 0, 0, 0))
        assert derive_seed(SeedContext(0, 0, 0, 1)) != base
        assert derive_seed(SeedContext(0, 0, 1, 0)) != base
        assert derive_seed(SeedContext(0, 1, 0, 0)) != base
        assert derive_seed(SeedContext(1, 0, 0, 0)) != base

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m, e, i, z = (int(v) for v in rng.integers(0, 2**62, 4))
            assert int(derive_seed_array(m, e, i, z)) == mix_seed(m, e, i, z)

    def test_no_collisions_over_million_tuples(self):
        # 100 x 100 x 100 grid of (epoch, image, view) paths under one master.
        e, i, z = np.meshgrid(
            np.arange(100, dtype=np.uint64),
            np.arange(100, dtype=np.uint64),
            np.arange(100, dtype=np.uint64),
            indexing="ij",
        )
        seeds = derive_seed_array(np.uint64(0), e.ravel(), i.ravel(), z.ravel())
        assert len(np.unique(seeds)) == 1_000_000

    def test_accepts_numpy_integers(self):
        assert mix_seed(np.int64(3), np.int64(1), np.int64(2), np.int64(4)) == mix_seed(3, 1, 2, 4)


class TestClampProbability:
    def test_lower_clamp(self):
        assert clamp_probability(0.0) == 1e-7

    def test_identity_inside_range(self):
        assert clamp_probability(0.5) == 0.5

    def test_upper_clamp(self):
        assert clamp_probability(1.0) == 1.0 - 1e-7

    def test_domain_error(self):
        with pytest.raises(DomainError):
            clamp_probability(-0.1)
        with pytest.raises(DomainError):
            clamp_probability(1.1)

    def test_array_version(self):
        out = clamp_probabilities(np.array([0.0, 0.3, 1.0]))
        assert out[0] == 1e-7 and out[1] == 0.3 and out[2] == 1.0 - 1e-7
        with pytest.raises(DomainError):
            clamp_probabilities(np.array([-0.5]))


class TestLabelVectors:
    def test_annotation_requires_single_positive(self):
        vec = AnnotationVector(entries=(0, 1, 0))
        assert vec.positive_class == 1
        with pytest.raises(DomainError):
            AnnotationVector(entries=(0, 0, 0))
        with pytest.raises(DomainError):
            AnnotationVector(entries=(1, 1, 0))

    def test_pseudo_label_values(self):
        vec = PseudoLabelVector(entries=(-1, 0, 1, 1))
        assert vec.positive_count() == 2
        with pytest.raises(DomainError):
            PseudoLabelVector(entries=(2, 0, 0))

    def test_batch_checks(self):
        ann = np.array([[1, 0], [0, 1]])
        assert check_annotation_batch(ann).dtype == np.uint8
        with pytest.raises(DomainError):
            check_annotation_batch(np.array([[1, 1], [0, 1]]))
        lab = np.array([[1, -1], [0, 0]])
        assert check_pseudo_batch(lab, top_k=1).dtype == np.int8
        with pytest.raises(DomainError):
            check_pseudo_batch(np.array([[1, 1]]), top_k=1)


class TestPredictionBatch:
    def test_from_logits_clamps(self):
        batch = PredictionBatch.from_logits(np.array([[0.0, 100.0, -100.0]]))
        assert batch.probabilities[0, 0] == 0.5
        assert batch.probabilities[0, 1] == 1.0 - 1e-7
        assert batch.probabilities[0, 2] == 1e-7

    def test_sigmoid_consistency(self):
        logits = np.linspace(-10, 10, 21).reshape(3, 7)
        batch = PredictionBatch.from_logits(logits)
        expected = 1.0 / (1.0 + np.exp(-logits))
        assert np.allclose(batch.probabilities, np.clip(expected, 1e-7, 1 - 1e-7), rtol=0, atol=1e-15)

    def test_rejects_unclamped(self):
        with pytest.raises(DomainError):
            PredictionBatch(logits=np.zeros((1, 2)), probabilities=np.array([[0.0, 1.0]]))


class TestConfigs:
    def test_gpr_validation(self):
        GprConfig()  # defaults valid
        with pytest.raises(ConfigError):
            GprConfig(q1=0.0)
        with pytest.raises(ConfigError):
            GprConfig(lambda1=0.8, lambda2=0.2)
        with pytest.raises(ConfigError):
            GprConfig(sigma_start=0.0)
        with pytest.raises(ConfigError):
            GprConfig(epsilon_confidence=0.0)
        with pytest.raises(ConfigError):
            GprConfig(m=-1.0)

    def test_damp_validation(self):
        cfg = DampConfig(grid_size=4)
        assert cfg.patch_count == 16
        assert cfg.negative_count(10) == 2
        assert DampConfig(delta_neg_pct=0.0).negative_count(10) == 0
        with pytest.raises(ConfigError):
            DampConfig(grid_size=0)
        with pytest.raises(ConfigError):
            DampConfig(overlap_ratio_max=0.5)
        with pytest.raises(ConfigError):
            DampConfig(tau=0.0)

    def test_view_spec_validation(self):
        ViewSpec(rect=(0.0, 0.0, 1.0, 1.0))
        with pytest.raises(DomainError):
            ViewSpec(rect=(0.5, 0.0, 0.5, 1.0))
        with pytest.raises(DomainError):
            ViewSpec(rect=(0.0, 0.0, 1.1, 1.0))
