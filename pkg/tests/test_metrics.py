import numpy as np
import pytest

from dood.errors import DataError
from dood.metrics import (
    average_precision,
    bootstrap,
    brute_force_metrics,
    evaluate,
    evaluate_pooled,
    fpr_at_95_tpr,
    pr_curve,
)
from dood.scorer import ScoreMap
from dood.tensor_store import OoDMask


def test_ap_hand_example():
    # thresholds 0.9, 0.8, 0.1 -> (P, R) = (1, 0.5), (0.5, 0.5), (2/3, 1)
    scores = [0.9, 0.8, 0.1]
    labels = [1, 0, 1]
    assert average_precision(scores, labels) == pytest.approx(5.0 / 6.0, abs=1e-12)


def test_ap_perfect_and_ties():
    assert average_precision([3.0, 2.0, 1.0, 0.5], [1, 1, 0, 0]) == 1.0
    # all scores equal: one tie group, AP equals prevalence
    assert average_precision([1.0] * 10, [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]) == pytest.approx(0.3)


def test_fpr95_hand_examples():
    assert fpr_at_95_tpr([0.9, 0.8, 0.7], [1, 1, 0]) == 0.0
    assert fpr_at_95_tpr([0.9, 0.3, 0.5], [1, 1, 0]) == 1.0
    assert fpr_at_95_tpr([5.0, 4.0, 1.0, 0.5], [1, 1, 0, 0]) == 0.0


def test_monotone_transform_invariance(rng):
    scores = np.round(rng.standard_normal(500), 1)  # rounding injects ties
    labels = (rng.random(500) < 0.3).astype(int)
    labels[0], labels[1] = 1, 0
    ap1 = average_precision(scores, labels)
    fp1 = fpr_at_95_tpr(scores, labels)
    transformed = 2.0 * scores + 7.0
    assert average_precision(transformed, labels) == pytest.approx(ap1, abs=1e-12)
    assert fpr_at_95_tpr(transformed, labels) == pytest.approx(fp1, abs=1e-12)


def test_tie_permutation_invariance(rng):
    scores = np.round(rng.standard_normal(300), 1)  # heavy ties
    labels = (rng.random(300) < 0.4).astype(int)
    labels[0], labels[1] = 1, 0
    ap = average_precision(scores, labels)
    fp = fpr_at_95_tpr(scores, labels)
    for _ in range(5):
        perm = rng.permutation(300)
        assert average_precision(scores[perm], labels[perm]) == pytest.approx(ap, abs=1e-12)
        assert fpr_at_95_tpr(scores[perm], labels[perm]) == pytest.approx(fp, abs=1e-12)


def test_ap_bounds_and_fpr_range(rng):
    # hard bounds are [0, 1]; prevalence is the exact value for constant
    # scores and the expected floor for uninformative ones (an adversarially
    # inverted scorer can dip below it)
    for _ in range(30):
        n = int(rng.integers(10, 200))
        scores = rng.standard_normal(n)
        labels = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
        if labels.sum() in (0, n):
            continue
        ap = average_precision(scores, labels)
        assert 0.0 <= ap <= 1.0 + 1e-12
        assert 0.0 <= fpr_at_95_tpr(scores, labels) <= 1.0
    labels = np.array([1, 1, 0, 0, 0])
    assert average_precision(np.ones(5), labels) == pytest.approx(0.4)


def test_label_complement_duality(rng):
    scores = rng.standard_normal(150)
    labels = (rng.random(150) < 0.5).astype(int)
    labels[0], labels[1] = 1, 0
    ap = average_precision(-scores, 1 - labels)
    bf_ap, _ = brute_force_metrics(-scores, 1 - labels)
    assert ap == pytest.approx(bf_ap, abs=1e-12)


def test_brute_force_agreement_sampled(rng):
    # lighter version of the acceptance sweep
    for _ in range(200):
        n = int(rng.integers(5, 400))
        scores = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        labels = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(int)
        if labels.sum() in (0, n):
            continue
        ap, fp = brute_force_metrics(scores, labels)
        assert average_precision(scores, labels) == pytest.approx(ap, abs=1e-12)
        assert fpr_at_95_tpr(scores, labels) == pytest.approx(fp, abs=1e-12)


def test_single_positive_degenerate_instance():
    scores = [0.2, 0.9, 0.5]
    labels = [0, 1, 0]
    ap, fp = brute_force_metrics(scores, labels)
    assert average_precision(scores, labels) == pytest.approx(ap, abs=1e-15)
    assert fpr_at_95_tpr(scores, labels) == pytest.approx(fp, abs=1e-15)


def test_validation_errors():
    with pytest.raises(DataError):
        average_precision([1.0, 2.0], [1, 1])  # no negatives
    with pytest.raises(DataError):
        average_precision([1.0, 2.0], [0, 0])  # no positives
    with pytest.raises(DataError):
        average_precision([1.0], [1, 0])
    with pytest.raises(DataError):
        average_precision([np.nan, 1.0], [1, 0])
    with pytest.raises(DataError):
        average_precision([1.0, 2.0], [1, 2])


def _pair(scores, mask_labels):
    return (
        ScoreMap(np.asarray(scores, dtype=np.float32)),
        OoDMask(np.asarray(mask_labels, dtype=np.uint8)),
    )


def test_evaluate_drops_ignore_and_errors():
    smap, mask = _pair([[0.9, 0.1], [0.5, 0.7]], [[1, 0], [255, 0]])
    res = evaluate(smap, mask)
    assert res.n_pos == 1 and res.n_neg == 2 and res.n_ignored == 1
    assert res.ap == average_precision([0.9, 0.1, 0.7], [1, 0, 0])
    all_ignore = _pair([[1.0]], [[255]])
    with pytest.raises(DataError):
        evaluate(*all_ignore)
    with pytest.raises(DataError):
        evaluate(ScoreMap(np.zeros((2, 2), dtype=np.float32)),
                 OoDMask(np.zeros((3, 3), dtype=np.uint8)))


def test_pooled_equals_concatenation(rng):
    pairs = []
    all_scores, all_labels = [], []
    for _ in range(4):
        s = rng.standard_normal((5, 5)).astype(np.float32)
        l = (rng.random((5, 5)) < 0.3).astype(np.uint8)
        pairs.append(_pair(s, l))
        all_scores.append(s.ravel())
        all_labels.append(l.ravel())
    pooled = evaluate_pooled(pairs)
    cat_ap = average_precision(np.concatenate(all_scores), np.concatenate(all_labels))
    cat_fp = fpr_at_95_tpr(np.concatenate(all_scores), np.concatenate(all_labels))
    assert pooled.ap == pytest.approx(cat_ap, abs=1e-15)
    assert pooled.fpr95 == pytest.approx(cat_fp, abs=1e-15)
    single = evaluate_pooled(pairs[:1])
    direct = evaluate(*pairs[0])
    assert single.ap == direct.ap and single.fpr95 == direct.fpr95


def _image_set(rng, n=12):
    pairs = []
    for _ in range(n):
        s = rng.standard_normal((6, 6)).astype(np.float32) + 0.1
        l = (rng.random((6, 6)) < 0.25).astype(np.uint8)
        l[0, 0] = 1
        l[0, 1] = 0
        s[l == 1] += 1.0
        pairs.append(_pair(s, l))
    return pairs


def test_bootstrap_full_fraction_has_zero_std(rng):
    pairs = _image_set(rng)
    b = bootstrap(pairs, folds=5, fraction=1.0, seed=3)
    assert b.ap_std == 0.0
    assert b.fpr95_std == 0.0


def test_bootstrap_protocol_and_reproducibility(rng):
    pairs = _image_set(rng)
    b1 = bootstrap(pairs, folds=10, fraction=0.9, seed=7)
    b2 = bootstrap(pairs, folds=10, fraction=0.9, seed=7)
    assert b1 == b2
    assert b1.folds == 10
    assert 0.0 <= b1.ap_mean <= 1.0
    b3 = bootstrap(pairs, folds=10, fraction=0.9, seed=8)
    assert b3 != b1


def test_bootstrap_validation(rng):
    pairs = _image_set(rng, n=3)
    with pytest.raises(DataError):
        bootstrap(pairs, folds=1)
    with pytest.raises(DataError):
        bootstrap(pairs, fraction=0.0)
    with pytest.raises(DataError):
        bootstrap(pairs[:1], folds=2)


def test_pr_curve_shape(rng):
    scores = rng.standard_normal(100)
    labels = (rng.random(100) < 0.4).astype(int)
    labels[0], labels[1] = 1, 0
    recall, precision = pr_curve(scores, labels)
    assert recall[-1] == 1.0
    assert (np.diff(recall) >= 0).all()
    assert len(recall) == len(precision)
