"""Evaluation contracts: scores, AUROC vs the pair-counting oracle, affinity,
confidence reports, adversarial evaluation.
"""

import math

import numpy as np
import pytest
import torch

from helpers import auroc_bruteforce, tiny_dataset

from lorot.adversarial import AdversarialConfig
from lorot.datasets import LabeledDataset, make_blobs, make_ood_pair, make_stripes
from lorot.evaluation import (
    accuracy,
    affinity,
    auroc,
    build_affinity_validation,
    classwise_confidence,
    eval_adversarial,
    kl_to_uniform,
    max_softmax,
    ood_evaluate,
    predict_probs,
    score_samples,
)
from lorot.models import build_model
from lorot.training import TrainingConfig, run_training


class OracleModel:
    """Emits a near-one-hot row for the true class of in-distribution images.

    Recognizes "its" images by their raw bytes; anything unknown gets a
    uniform row. Deterministic and training-free; mimics the small slice of
    the model interface the evaluators use.
    """

    def __init__(self, dataset, num_classes, sharpness=1000.0):
        self.keys = {img.tobytes(): int(label) for img, label in zip(dataset.images, dataset.labels)}
        self.num_classes = num_classes
        self.sharpness = sharpness
        self.pretext_classes = 4
        self.training = False

    def logits(self, x):
        arr = x.detach().numpy().transpose(0, 2, 3, 1)
        logits = torch.zeros(len(arr), self.num_classes)
        for i, img in enumerate(arr):
            label = self.keys.get(np.ascontiguousarray(img).tobytes())
            if label is not None:
                logits[i, label] = self.sharpness
        return logits, torch.zeros(len(arr), self.pretext_classes)

    def __call__(self, x):
        lu, lv = self.logits(x)
        return torch.softmax(lu, dim=1), torch.softmax(lv, dim=1)

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)


class TestScores:
    def test_kl_uniform_row_is_zero(self):
        assert kl_to_uniform(np.full(10, 0.1)) == 0.0

    def test_kl_one_hot_is_log_c(self):
        row = np.zeros(10)
        row[3] = 1.0
        assert abs(kl_to_uniform(row) - math.log(10)) < 1e-12

    def test_kl_half_half(self):
        row = np.zeros(10)
        row[0] = row[1] = 0.5
        assert abs(kl_to_uniform(row) - math.log(5)) < 1e-12

    def test_kl_non_negative_random_rows(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            row = rng.dirichlet(np.ones(8))
            assert kl_to_uniform(row) >= 0.0

    def test_invalid_rows_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            kl_to_uniform(np.array([0.5, 0.6]))
        with pytest.raises(ValueError, match="negative"):
            kl_to_uniform(np.array([1.1, -0.1]))

    def test_max_softmax(self):
        assert max_softmax(np.full(10, 0.1)) == pytest.approx(0.1)
        row = np.zeros(4)
        row[2] = 1.0
        assert max_softmax(row) == 1.0

    def test_score_kinds_agree_at_extremes(self):
        one_hot = np.zeros(10)
        one_hot[0] = 1.0
        uniform = np.full(10, 0.1)
        for kind in ("kl", "msp"):
            scores = score_samples(np.stack([one_hot, uniform]), kind)
            assert scores[0] > scores[1]


class TestAUROC:
    def test_perfect_separation(self):
        assert auroc([2, 3], [0, 1]) == 1.0

    def test_all_ties(self):
        assert auroc([1, 1, 1], [1, 1, 1]) == 0.5

    def test_hand_computed_case(self):
        # pairs: (3>2), (3>0), (1<2), (1>0) -> 3/4
        assert auroc([3, 1], [2, 0]) == 0.75

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 51))
            m = int(rng.integers(1, 51))
            if rng.random() < 0.5:
                a = rng.integers(0, 10, n).astype(float)
                b = rng.integers(0, 10, m).astype(float)
            else:
                a = rng.normal(size=n)
                b = rng.normal(size=m)
            assert auroc(a, b) == auroc_bruteforce(a, b)

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(2)
        a = rng.integers(0, 8, 30).astype(float)
        b = rng.integers(0, 8, 40).astype(float)
        base = auroc(a, b)
        for f in (lambda x: 3.0 * x + 1.0, np.arctan, lambda x: x**3 + x):
            assert auroc(f(a), f(b)) == base

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            auroc([], [1.0])


@pytest.fixture(scope="module")
def trained_stripes_model():
    train = make_stripes(1200, seed=0)
    config = TrainingConfig(strategy="baseline", epochs=6, batch_size=128, lr=0.05,
                            model_widths=(8, 16), seed=0)
    model, _ = run_training(config, train)
    return model


class TestAccuracyAndAffinity:
    def test_oracle_model_is_100_percent(self):
        ds = tiny_dataset(n=20, num_classes=4, seed=3, split="test")
        model = OracleModel(ds, num_classes=4)
        assert accuracy(model, ds) == 100.0

    def test_uniform_random_model_near_chance(self):
        ds = make_stripes(1000, seed=4, split="test")
        torch.manual_seed(0)
        model = build_model(num_classes=10, pretext_classes=4, image_size=32, widths=(4,))
        acc = accuracy(model, ds)
        assert 2.0 < acc < 25.0  # chance is 10% on a balanced 10-class set

    def test_constant_predictor_on_balanced_test(self):
        # a majority-class constant model scores exactly one class's share
        class ConstantModel:
            training = False

            def train(self, mode=True):
                return self

            def eval(self):
                return self

            def __call__(self, x):
                probs = torch.zeros(len(x), 10)
                probs[:, 0] = 1.0
                return probs, torch.full((len(x), 4), 0.25)

        ds = make_stripes(1000, seed=29, split="test")
        assert accuracy(ConstantModel(), ds) == 10.0

    def test_empty_dataset_rejected(self):
        ds = tiny_dataset(n=4, num_classes=2, seed=5)
        empty = ds.subset(np.array([], dtype=np.int64))
        model = OracleModel(ds, num_classes=2)
        with pytest.raises(ValueError, match="empty"):
            accuracy(model, empty)

    def test_identity_affinity_exactly_100(self, trained_stripes_model):
        val = make_stripes(300, seed=6, split="val")
        assert affinity(trained_stripes_model, val, "identity") == 100.0

    def test_affinity_order_invariant(self, trained_stripes_model):
        val = make_stripes(200, seed=7, split="val")
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(val))
        shuffled = val.subset(perm)
        a = affinity(trained_stripes_model, val, "lorot-i", seed=3)
        b = affinity(trained_stripes_model, shuffled, "lorot-i", seed=3)
        assert a == b

    def test_affinity_validation_set_geometry(self):
        val = make_stripes(50, seed=8, split="val")
        shifted = build_affinity_validation(val, "lorot-e", seed=0)
        assert shifted.images.shape == val.images.shape
        assert np.array_equal(shifted.labels, val.labels)
        changed = sum(
            not np.array_equal(a, b) for a, b in zip(shifted.images, val.images)
        )
        assert 0 < changed < len(val)  # identity labels leave ~25% untouched

    def test_affinity_exclude_identity_switch(self):
        val = make_stripes(60, seed=9, split="val")
        shifted = build_affinity_validation(val, "rotation", seed=1, include_identity=False)
        changed = sum(
            not np.array_equal(a, b) for a, b in zip(shifted.images, val.images)
        )
        assert changed == len(val)

    def test_zero_accuracy_model_rejected(self):
        ds = tiny_dataset(n=10, num_classes=2, seed=10, split="val")
        wrong = LabeledDataset(
            name="wrong", split="val", images=ds.images,
            labels=1 - ds.labels, num_classes=2,
        )
        model = OracleModel(ds, num_classes=2)  # always right on ds => always wrong here
        with pytest.raises(ValueError, match="affinity undefined"):
            affinity(model, wrong, "identity")


class TestOODReports:
    def test_oracle_separation_gives_auroc_one(self):
        in_ds = tiny_dataset(n=30, num_classes=3, seed=11, split="test")
        out_ds = tiny_dataset(n=25, num_classes=3, seed=12, split="test")
        model = OracleModel(in_ds, num_classes=3)  # one-hot on in-dist, uniform on OOD
        pair = make_ood_pair(in_ds, out_ds)
        report = ood_evaluate(model, pair, "kl")
        assert report.auroc == 1.0
        assert report.recompute_auroc() == report.auroc

    def test_self_pair_auroc_half(self):
        ds = tiny_dataset(n=40, num_classes=2, seed=13, split="test")
        model = OracleModel(ds, num_classes=2)
        report = ood_evaluate(model, make_ood_pair(ds, ds), "kl")
        assert report.auroc == 0.5

    def test_untrained_model_near_half_on_identical_distributions(self):
        # score distributions are statistically identical when both sets are
        # independent draws of the same generator
        in_ds = make_stripes(300, seed=14, split="test")
        out_ds = make_stripes(300, seed=15, split="test")
        aurocs = []
        for seed in range(5):
            torch.manual_seed(seed)
            model = build_model(num_classes=10, pretext_classes=4, image_size=32, widths=(4,))
            aurocs.append(ood_evaluate(model, make_ood_pair(in_ds, out_ds), "kl").auroc)
        assert abs(np.mean(aurocs) - 0.5) < 0.05

    def test_classwise_confidence_oracle(self):
        in_ds = tiny_dataset(n=30, num_classes=3, seed=16, split="test")
        out_ds = tiny_dataset(n=20, num_classes=2, seed=17, split="test")
        model = OracleModel(in_ds, num_classes=3)
        report = classwise_confidence(model, make_ood_pair(in_ds, out_ds))
        assert np.allclose(report.in_class_means, 1.0)
        assert np.allclose(report.out_class_means, 1.0 / 3.0, atol=1e-6)

    def test_classwise_confidence_recompute(self):
        in_ds = tiny_dataset(n=24, num_classes=3, seed=18, split="test")
        out_ds = tiny_dataset(n=18, num_classes=3, seed=19, split="test")
        model = OracleModel(in_ds, num_classes=3)
        report = classwise_confidence(model, make_ood_pair(in_ds, out_ds))
        for c in range(3):
            recomputed = report.in_confidences[report.in_labels == c].mean()
            assert abs(recomputed - report.in_class_means[c]) < 1e-12
        assert abs(report.out_confidences.mean() - report.out_mean) < 1e-12

    def test_unlabeled_out_dist_falls_back_to_single_mean(self):
        in_ds = tiny_dataset(n=12, num_classes=2, seed=20, split="test")
        out_images = tiny_dataset(n=10, num_classes=2, seed=21, split="test").images
        out_ds = LabeledDataset(
            name="unlabeled", split="test", images=out_images,
            labels=np.full(10, -1, dtype=np.int64), num_classes=2,
        )
        model = OracleModel(in_ds, num_classes=2)
        report = classwise_confidence(model, make_ood_pair(in_ds, out_ds))
        assert report.out_class_means is None
        assert 0.0 <= report.out_mean <= 1.0

    def test_single_class_out_dist_single_solid_value(self):
        in_ds = tiny_dataset(n=12, num_classes=2, seed=22, split="test")
        out_ds = tiny_dataset(n=9, num_classes=1, seed=23, split="test")
        model = OracleModel(in_ds, num_classes=2)
        report = classwise_confidence(model, make_ood_pair(in_ds, out_ds))
        assert report.out_class_means.shape == (1,)


class TestEvalAdversarial:
    def test_epsilon_zero_robust_equals_clean(self, trained_stripes_model):
        ds = make_stripes(120, seed=24, split="test")
        cfg = AdversarialConfig(epsilon=0.0, alpha=0.0)
        result = eval_adversarial(trained_stripes_model, ds, cfg, steps=20)
        assert result["robust_accuracy"] == result["clean_accuracy"]

    def test_robust_le_clean(self, trained_stripes_model):
        ds = make_stripes(150, seed=25, split="test")
        result = eval_adversarial(trained_stripes_model, ds, AdversarialConfig(), steps=20)
        assert result["robust_accuracy"] <= result["clean_accuracy"]

    def test_eval_steps_schedule(self):
        cfg = AdversarialConfig()
        assert cfg.eval_alpha(20) == 2.0 / 255.0
        assert cfg.eval_alpha(100) == 0.3 / 255.0
        with pytest.raises(ValueError, match="schedule"):
            cfg.eval_alpha(7)


def test_predict_probs_rows_normalized(trained_stripes_model):
    ds = make_stripes(64, seed=26, split="test")
    probs = predict_probs(trained_stripes_model, ds)
    assert probs.shape == (64, 10)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-5
