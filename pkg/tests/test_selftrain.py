import numpy as np
import pytest

from pntal import datagen, model, selftrain
from pntal.core import (
    ExperimentConfig,
    Pseudo,
    Snippet,
    SoftPseudo,
    Unlabeled,
    VideoRecord,
    make_distribution,
)
from pntal.losses import combined_loss
from pntal.partition import partition_label_space
from pntal.selftrain import (
    EmptyLabeledSetError,
    MissingGroundTruthError,
    assign_pseudo_labels,
    pretrain,
    sealed_label_map,
    self_train_loop,
    sharpen,
    snippet_accuracy,
    subspace_statistics,
    video_feature_matrix,
)


def small_config(**kwargs):
    base = dict(train_video_count=10, test_video_count=3, snippets_per_video=30,
                class_count=4, feature_dim=8, labeled_ratio=0.3, hidden_width=12,
                pretrain_epochs=4, selftrain_epochs=3, batch_size=64, seed=2)
    base.update(kwargs)
    return ExperimentConfig(**base)


def bias_model(probs, input_dim, hidden=4):
    """A model that outputs the given class distribution for any input:
    zero trunk, class bias = log probs."""
    k = len(probs)
    return model.ModelParams(
        trunk_w=np.zeros((input_dim, hidden)),
        trunk_b=np.zeros(hidden),
        class_w=np.zeros((hidden, k)),
        class_b=np.log(np.maximum(np.asarray(probs, dtype=np.float64), 1e-300)),
        mask_w=np.zeros(hidden),
        mask_b=0.0,
    )


def unlabeled_video(video_id, n, d, rng):
    return VideoRecord(
        video_id=video_id,
        snippets=tuple(Snippet(feature=rng.normal(size=d), supervision=Unlabeled()) for _ in range(n)),
        instances=(),
        labeled=False,
    )


class TestSharpen:
    def test_identity_temperature(self):
        dist = make_distribution([0.5, 0.3, 0.2])
        assert sharpen(dist, 1.0) is dist

    def test_hand_value(self):
        out = sharpen(make_distribution([0.5, 0.3, 0.2]), 0.5)
        expected = np.array([0.25, 0.09, 0.04]) / 0.38
        assert np.allclose(out.probs, expected, atol=1e-12)

    def test_one_hot_fixed_point(self):
        dist = make_distribution([1, 0, 0])
        for t in (0.25, 0.5, 2.0, 7.0):
            assert np.array_equal(sharpen(dist, t).probs, dist.probs)

    def test_low_temperature_concentrates(self):
        dist = make_distribution([0.5, 0.3, 0.2])
        sharp = sharpen(dist, 0.25)
        assert sharp.probs[0] > dist.probs[0]
        assert int(np.argmax(sharp.probs)) == int(np.argmax(dist.probs))

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            sharpen(make_distribution([1, 1]), 0.0)


class TestPretrain:
    def test_empty_labeled_set(self):
        with pytest.raises(EmptyLabeledSetError):
            pretrain([], small_config())

    def test_zero_epochs_returns_init(self):
        cfg = small_config(pretrain_epochs=0)
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        init = model.init_params(cfg.model_input_dim, cfg.hidden_width, cfg.label_count, cfg.seed)
        for name in model.PARAM_FIELDS:
            assert np.array_equal(np.asarray(getattr(params, name)),
                                  np.asarray(getattr(init, name)))

    def test_deterministic(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        a = pretrain(bench.labeled, cfg)
        b = pretrain(bench.labeled, cfg)
        for name in model.PARAM_FIELDS:
            assert np.array_equal(np.asarray(getattr(a, name)), np.asarray(getattr(b, name)))

    def test_separable_toy_reaches_high_accuracy(self):
        cfg = small_config(noise_sigma=0.05, ambiguous_ratio=0.0, distractor_ratio=0.0,
                           class_separation=1.0, pretrain_epochs=60, labeled_ratio=1.0,
                           hidden_width=24, learning_rate=5e-3)
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        assert snippet_accuracy(params, bench.labeled, cfg) >= 0.99


class TestAssignPseudoLabels:
    def test_confident_model_marks_all_non_targets_negative(self):
        cfg = small_config(sharpen_temperature=1.0)
        params = bias_model([0.994, 0.002, 0.002, 0.001, 0.001], cfg.model_input_dim)
        rng = np.random.default_rng(0)
        video = unlabeled_video("u", 5, cfg.feature_dim, rng)
        annotated = assign_pseudo_labels(params, [video], cfg)[0]
        for snippet in annotated.snippets:
            sup = snippet.supervision
            assert isinstance(sup, Pseudo)
            assert sup.class_idx == 1
            assert sup.partition.negatives == {2, 3, 4, 5}
            assert sup.partition.positives == set()

    def test_matches_partition_label_space(self):
        probs = [0.30, 0.27, 0.18, 0.15, 0.10]
        cfg = small_config(sharpen_temperature=1.0, positive_confidence_ratio=0.85)
        params = bias_model(probs, cfg.model_input_dim)
        rng = np.random.default_rng(1)
        video = unlabeled_video("u", 4, cfg.feature_dim, rng)
        annotated = assign_pseudo_labels(params, [video], cfg)[0]
        expected = partition_label_space(make_distribution(probs), 0.85)
        for snippet in annotated.snippets:
            assert snippet.supervision.partition == expected

    def test_identical_snippets_identical_annotations(self):
        for objective in ("hybrid", "complementary"):
            cfg = small_config(objective=objective)
            bench = datagen.generate_benchmark(cfg)
            params = pretrain(bench.labeled, cfg)
            feature = np.full(cfg.feature_dim, 0.25)
            video = VideoRecord(
                video_id="twin",
                snippets=(Snippet(feature=feature), Snippet(feature=feature.copy())),
                instances=(),
                labeled=False,
            )
            annotated = assign_pseudo_labels(params, [video], cfg)[0]
            first, second = annotated.snippets
            assert first.supervision == second.supervision

    def test_objective_modes(self):
        probs = [0.30, 0.27, 0.18, 0.15, 0.10]
        rng = np.random.default_rng(3)
        video = unlabeled_video("u", 3, 8, rng)

        cfg = small_config(sharpen_temperature=1.0, objective="target-only")
        params = bias_model(probs, cfg.model_input_dim)
        sup = assign_pseudo_labels(params, [video], cfg)[0].snippets[0].supervision
        assert sup.partition.negatives == set() and sup.partition.positives == set()

        cfg = small_config(sharpen_temperature=1.0, objective="target-negative")
        sup = assign_pseudo_labels(params, [video], cfg)[0].snippets[0].supervision
        assert sup.partition.negatives == {5, 4} and sup.partition.positives == set()

        cfg = small_config(sharpen_temperature=1.0, objective="complementary")
        sup = assign_pseudo_labels(params, [video], cfg)[0].snippets[0].supervision
        assert len(sup.partition.negatives) == 1
        assert sup.partition.positives == set()
        assert 1 not in sup.partition.negatives

        cfg = small_config(sharpen_temperature=1.0, objective="soft-pseudo")
        sup = assign_pseudo_labels(params, [video], cfg)[0].snippets[0].supervision
        assert isinstance(sup, SoftPseudo)
        assert np.allclose(sup.soft_label, probs, atol=1e-12)

    def test_inputs_unchanged(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        before = [s.supervision for s in bench.unlabeled[0].snippets]
        assign_pseudo_labels(params, bench.unlabeled[:1], cfg)
        after = [s.supervision for s in bench.unlabeled[0].snippets]
        assert before == after

    def test_pseudo_target_is_argmax_of_sharpened(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        annotated = assign_pseudo_labels(params, bench.unlabeled[:3], cfg)
        for video, source in zip(annotated, bench.unlabeled[:3]):
            probs, _, _ = model.forward_batch(params, video_feature_matrix(source))
            sharpened = selftrain.sharpen_rows(probs, cfg.sharpen_temperature)
            for i, snippet in enumerate(video.snippets):
                assert snippet.supervision.class_idx == int(np.argmax(sharpened[i])) + 1


class TestSubspaceStatistics:
    def test_perfect_model(self):
        cfg = small_config(sharpen_temperature=1.0)
        bench = datagen.generate_benchmark(cfg.replace(noise_sigma=0.0, ambiguous_ratio=0.0,
                                                       distractor_ratio=0.0))
        sealed = sealed_label_map(bench, cfg)
        # craft per-video annotations equal to ground truth
        annotated = []
        for video in bench.unlabeled:
            truth = sealed[video.video_id]
            snippets = []
            for i, snippet in enumerate(video.snippets):
                t = int(truth[i])
                others = [c for c in range(1, cfg.label_count + 1) if c != t]
                part = partition_label_space(
                    make_distribution(np.eye(cfg.label_count)[t - 1] + 1e-12), 0.85
                )
                snippets.append(Snippet(feature=snippet.feature, supervision=Pseudo(t, part)))
            annotated.append(VideoRecord(video.video_id, tuple(snippets), (), False))
        stats = subspace_statistics(annotated, sealed)
        assert stats.target_rate == pytest.approx(1.0)
        assert stats.positive_rate == 0.0
        assert stats.negative_rate == 0.0

    def test_uniform_model_counting_oracle(self):
        # Uniform predictions: target = class 1 (tie-break), negatives = {2}
        # (first non-target in sorted order), positives = rest.
        cfg = small_config(sharpen_temperature=1.0)
        bench = datagen.generate_benchmark(cfg)
        sealed = sealed_label_map(bench, cfg)
        params = bias_model([0.2] * 5, cfg.model_input_dim)
        annotated = assign_pseudo_labels(params, bench.unlabeled, cfg)
        stats = subspace_statistics(annotated, sealed)
        truths = np.concatenate([sealed[v.video_id] for v in bench.unlabeled])
        assert stats.target_rate == pytest.approx((truths == 1).mean())
        assert stats.negative_rate == pytest.approx((truths == 2).mean())
        assert stats.positive_rate == pytest.approx((truths >= 3).mean())
        assert stats.ambiguous_rate == 0.0

    def test_rates_sum_to_one(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        sealed = sealed_label_map(bench, cfg)
        annotated = assign_pseudo_labels(params, bench.unlabeled, cfg)
        stats = subspace_statistics(annotated, sealed)
        assert sum(stats.rates()) == pytest.approx(1.0, abs=1e-9)

    def test_missing_ground_truth(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        annotated = assign_pseudo_labels(params, bench.unlabeled[:1], cfg)
        with pytest.raises(MissingGroundTruthError):
            subspace_statistics(annotated, {})


class TestSelfTrainLoop:
    def test_zero_epochs(self):
        cfg = small_config(selftrain_epochs=0)
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        out, metrics = self_train_loop(params, bench.labeled, bench.unlabeled, cfg)
        assert metrics == []
        for name in model.PARAM_FIELDS:
            assert np.array_equal(np.asarray(getattr(out, name)), np.asarray(getattr(params, name)))

    def test_alpha_zero_matches_supervised_only(self):
        cfg = small_config(unlabeled_loss_weight=0.0)
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        with_unlabeled, _ = self_train_loop(params, bench.labeled, bench.unlabeled, cfg)
        without, _ = self_train_loop(params, bench.labeled, [], cfg)
        for name in model.PARAM_FIELDS:
            assert np.array_equal(np.asarray(getattr(with_unlabeled, name)),
                                  np.asarray(getattr(without, name)))

    def test_metrics_log_structure(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        sealed = sealed_label_map(bench, cfg)
        _, metrics = self_train_loop(params, bench.labeled, bench.unlabeled, cfg, sealed_labels=sealed)
        assert len(metrics) == cfg.selftrain_epochs
        for epoch, record in enumerate(metrics):
            assert record.epoch == epoch
            assert 0.0 <= record.pseudo_accuracy <= 1.0
            assert record.subspace is not None
            assert sum(record.subspace.rates()) == pytest.approx(1.0, abs=1e-9)
            payload = record.to_dict()
            assert payload["loss_total"] == pytest.approx(
                payload["loss_target"] + payload["loss_positive"]
                + payload["loss_negative"] + payload["loss_mask"], abs=1e-9,
            )

    def test_deterministic(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        sealed = sealed_label_map(bench, cfg)
        a, metrics_a = self_train_loop(params, bench.labeled, bench.unlabeled, cfg, sealed_labels=sealed)
        b, metrics_b = self_train_loop(params, bench.labeled, bench.unlabeled, cfg, sealed_labels=sealed)
        for name in model.PARAM_FIELDS:
            assert np.array_equal(np.asarray(getattr(a, name)), np.asarray(getattr(b, name)))
        assert [m.to_dict() for m in metrics_a] == [m.to_dict() for m in metrics_b]

    def test_refresh_per_step_runs(self):
        cfg = small_config(refresh_per_step=True, selftrain_epochs=2)
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        out, metrics = self_train_loop(params, bench.labeled, bench.unlabeled, cfg)
        assert len(metrics) == 2

    def test_frozen_annotations_give_identical_loss(self):
        cfg = small_config()
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        annotated = assign_pseudo_labels(params, bench.unlabeled[:2], cfg)
        from pntal.core import SnippetBatch

        snippets = tuple(s for v in annotated for s in v.snippets)
        batch = SnippetBatch(snippets=snippets)
        feats = np.stack([s.feature for s in snippets])
        probs, scores, _ = model.forward_batch(params, feats)
        dists = [make_distribution(p) for p in probs]
        first = combined_loss(batch, dists, scores, cfg)
        second = combined_loss(batch, dists, scores, cfg)
        assert first == second


class TestWindowedFeatures:
    def test_window_shapes_and_padding(self):
        rng = np.random.default_rng(4)
        video = unlabeled_video("w", 5, 3, rng)
        base = video_feature_matrix(video, window=0)
        wide = video_feature_matrix(video, window=1)
        assert wide.shape == (5, 9)
        assert np.array_equal(wide[0, :3], np.zeros(3))  # left pad at t=0
        assert np.array_equal(wide[0, 3:6], base[0])
        assert np.array_equal(wide[0, 6:], base[1])
        assert np.array_equal(wide[4, 6:], np.zeros(3))  # right pad at t=n-1

    def test_training_with_window(self):
        cfg = small_config(feature_window=1)
        bench = datagen.generate_benchmark(cfg)
        params = pretrain(bench.labeled, cfg)
        assert params.input_dim == cfg.feature_dim * 3
        out, metrics = self_train_loop(params, bench.labeled, bench.unlabeled, cfg)
        assert len(metrics) == cfg.selftrain_epochs
