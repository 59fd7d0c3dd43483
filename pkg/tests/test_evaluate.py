"""Evaluation harness: AUROC, matched set construction, sweeps, timing."""

import numpy as np
import pytest

from lrdetect import attacks as atk
from lrdetect import baselines as bl
from lrdetect import evaluate as ev
from lrdetect.models import predict


def _auroc_quadratic(clean, adv):
    """Direct two-loop pair count; the definition the fast path must match."""
    wins = 0.0
    for a in adv:
        for c in clean:
            if a > c:
                wins += 1.0
            elif a == c:
                wins += 0.5
    return wins / (len(clean) * len(adv))


# ---------------------------------------------------------------------- auroc

def test_auroc_hand_example():
    # adv 2 beats clean 1 only; adv 4 beats both: 3 of 4 pairs
    assert ev.auroc([1.0, 3.0], [2.0, 4.0]) == 0.75


def test_auroc_tie_counts_half():
    assert ev.auroc([1.0], [1.0]) == 0.5
    assert ev.auroc([0.0, 1.0], [1.0, 2.0]) == pytest.approx(0.875)


def test_auroc_perfect_and_inverted():
    clean = [0.1, 0.2, 0.3]
    adv = [0.4, 0.5]
    assert ev.auroc(clean, adv) == 1.0
    assert ev.auroc(adv, clean) == 0.0


def test_auroc_identical_distributions_half():
    rng = np.random.default_rng(0)
    x = rng.random(500)
    assert ev.auroc(x, x) == 0.5


def test_auroc_matches_quadratic_oracle_100_sets():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n_clean = int(rng.integers(1, 40))
        n_adv = int(rng.integers(1, 40))
        if rng.random() < 0.5:
            # integer grid forces ties across and within the sets
            clean = rng.integers(0, 6, size=n_clean).astype(np.float64)
            adv = rng.integers(0, 6, size=n_adv).astype(np.float64)
        else:
            clean = rng.normal(size=n_clean)
            adv = rng.normal(loc=0.5, size=n_adv)
        assert ev.auroc(clean, adv) == _auroc_quadratic(clean, adv)


def test_auroc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    clean = rng.normal(size=200)
    adv = rng.normal(loc=0.3, size=150)
    assert ev.auroc(clean, adv) == ev.auroc(np.exp(clean), np.exp(adv))


def test_auroc_empty_rejected():
    with pytest.raises(ValueError, match="nonempty"):
        ev.auroc([], [1.0])
    with pytest.raises(ValueError, match="nonempty"):
        ev.auroc([1.0], [])


# ------------------------------------------------------------- random_targets

def test_random_targets_never_equal_label():
    labels = np.repeat(np.arange(10), 30).astype(np.int64)
    for seed in range(5):
        t = ev.random_targets(labels, 10, seed=seed)
        assert t.shape == labels.shape
        assert np.all(t != labels)
        assert t.min() >= 0 and t.max() < 10


def test_random_targets_deterministic():
    labels = np.arange(10) % 10
    np.testing.assert_array_equal(
        ev.random_targets(labels, 10, seed=3), ev.random_targets(labels, 10, seed=3))
    assert not np.array_equal(
        ev.random_targets(np.arange(100) % 10, 10, seed=3),
        ev.random_targets(np.arange(100) % 10, 10, seed=4))


# ------------------------------------------------------------ build_eval_sets

def test_build_eval_sets_structure(mlp_model, test_set):
    x, y = test_set
    x, y = x[:200], y[:200]
    cfg = atk.AttackConfig(kind="fgsm", epsilon=16 / 255)
    sets = ev.build_eval_sets(mlp_model, cfg, x, y)
    assert sets.n_test == 200
    assert sets.n_correct == int((predict(mlp_model, x) == y).sum())
    assert len(sets.clean_x) == sets.n_correct
    np.testing.assert_array_equal(predict(mlp_model, sets.clean_x), sets.clean_y)
    # adversarial samples pair off with the clean samples they came from
    assert len(sets.adv_x) == int(sets.success_mask.sum())
    np.testing.assert_array_equal(sets.adv_y, sets.clean_y[sets.success_mask])
    assert sets.success_rate == pytest.approx(sets.success_mask.mean())
    # every successful attack actually flips the model
    assert np.all(predict(mlp_model, sets.adv_x) != sets.adv_y)
    # and stays inside the budget relative to its source image
    gap = np.abs(sets.adv_x - sets.clean_x[sets.success_mask]).max()
    assert gap <= 16 / 255 + 1e-6


def test_build_eval_sets_no_correct_sample_rejected(mlp_model, test_set):
    x, _ = test_set
    x = x[:50]
    wrong = (predict(mlp_model, x) + 1) % 10
    cfg = atk.AttackConfig(kind="fgsm", epsilon=8 / 255)
    with pytest.raises(ValueError, match="no sample correctly"):
        ev.build_eval_sets(mlp_model, cfg, x, wrong)


def test_build_eval_sets_per_sample_targets_follow_filter(mlp_model, test_set):
    # per-sample target arrays are given for the full input set; the
    # builder must drop the entries for misclassified samples before
    # attacking, or the batch shapes drift apart
    x, y = test_set
    x, y = x[:160], y[:160]
    targets = ev.random_targets(y, 10, seed=5)
    cfg = atk.AttackConfig(kind="pgd", epsilon=32 / 255, steps=5,
                           targeted=True, target=targets, seed=0)
    sets = ev.build_eval_sets(mlp_model, cfg, x, y)
    correct = predict(mlp_model, x) == y
    kept = targets[correct][sets.success_mask]
    # targeted success means the model now outputs the requested class
    np.testing.assert_array_equal(predict(mlp_model, sets.adv_x), kept)


# ---------------------------------------------------------- evaluate_detector

def test_evaluate_detector_report(mlp_model, mlp_detector, test_set):
    from lrdetect import detector as det
    x, y = test_set
    cfg = atk.AttackConfig(kind="fgsm", epsilon=16 / 255)
    sets = ev.build_eval_sets(mlp_model, cfg, x[:300], y[:300])
    report = ev.evaluate_detector(mlp_model, mlp_detector, sets,
                                  config={"attack": "fgsm"})
    assert report.n_clean == len(sets.clean_x)
    assert report.n_adv == len(sets.adv_x)
    assert report.config == {"attack": "fgsm"}
    assert report.conjecture is None
    s_clean = det.score(mlp_detector, mlp_model, sets.clean_x)
    s_adv = det.score(mlp_detector, mlp_model, sets.adv_x)
    assert report.auroc == ev.auroc(s_clean, s_adv)
    assert report.clean_score_mean == pytest.approx(s_clean.mean(), rel=1e-6)
    assert report.adv_score_std == pytest.approx(s_adv.std(ddof=1), rel=1e-5)


def test_evaluate_detector_with_conjecture(mlp_model, mlp_detector, test_set):
    x, y = test_set
    cfg = atk.AttackConfig(kind="pgd", epsilon=32 / 255, steps=5, seed=0)
    sets = ev.build_eval_sets(mlp_model, cfg, x[:120], y[:120])
    report = ev.evaluate_detector(mlp_model, mlp_detector, sets, with_conjecture=True)
    assert report.conjecture is not None
    assert report.conjecture["n_pairs"] + report.conjecture["n_skipped"] == len(sets.adv_x)


def test_baseline_auroc_consistency(mlp_model, test_set):
    x, y = test_set
    cfg = atk.AttackConfig(kind="fgsm", epsilon=32 / 255)
    sets = ev.build_eval_sets(mlp_model, cfg, x[:200], y[:200])
    tf = bl.TransformSpec(kind="bit_reduce", bits=4)
    got = ev.baseline_auroc(mlp_model, tf, sets)
    want = ev.auroc(bl.mismatch_score(mlp_model, sets.clean_x, tf),
                    bl.mismatch_score(mlp_model, sets.adv_x, tf))
    assert got == want


# --------------------------------------------------------------- epsilon_sweep

def test_epsilon_sweep_rows(mlp_model, mlp_detector, test_set):
    x, y = test_set
    rows = ev.epsilon_sweep(mlp_model, mlp_detector, x[:150], y[:150],
                            eps_list=[8 / 255, 64 / 255], attack_kind="fgsm",
                            transforms=(bl.TransformSpec(kind="bit_reduce", bits=4),))
    assert len(rows) == 2
    for row, eps in zip(rows, [8 / 255, 64 / 255]):
        assert row["epsilon"] == pytest.approx(eps)
        assert 0.0 <= row["auroc"] <= 1.0
        assert 0.0 <= row["auroc_bit_reduce"] <= 1.0
        assert row["n_adv"] >= 1
    # a bigger budget flips at least as many samples on this scale
    assert rows[1]["success_rate"] >= rows[0]["success_rate"]


def test_epsilon_sweep_empty_list_rejected(mlp_model, mlp_detector, test_set):
    x, y = test_set
    with pytest.raises(ValueError, match="nonempty"):
        ev.epsilon_sweep(mlp_model, mlp_detector, x[:100], y[:100], eps_list=[])


# ---------------------------------------------------------------- timing_bench

def test_timing_bench_fields(mlp_model, test_set):
    x, _ = test_set
    out = ev.timing_bench(lambda s: predict(mlp_model, s), x[:100], repetitions=2)
    assert out["n_samples"] == 100
    assert out["repetitions"] == 2
    assert out["pts_mean"] > 0.0
    assert out["pts_std"] >= 0.0


def test_timing_bench_validation(mlp_model, test_set):
    x, _ = test_set
    with pytest.raises(ValueError, match="at least 100"):
        ev.timing_bench(lambda s: s, x[:99])
    with pytest.raises(ValueError, match="repetitions"):
        ev.timing_bench(lambda s: s, x[:100], repetitions=0)
