import warnings

import numpy as np
import pytest

from rlbioaug.metrics import balanced_accuracy, confusion_matrix, macro_f1, per_class


def test_diagonal_is_perfect():
    cm = np.diag([3, 5, 2])
    assert balanced_accuracy(cm) == 1.0
    assert macro_f1(cm) == 1.0


def test_two_class_recalls():
    cm = np.array([[4, 0], [3, 3]])
    assert balanced_accuracy(cm) == 0.75


def test_hand_evaluated_3x3():
    cm = np.array([[5, 1, 0],
                   [2, 3, 1],
                   [0, 2, 6]])
    # recalls 5/6, 3/6, 6/8; precisions 5/7, 3/6, 6/7
    assert balanced_accuracy(cm) == (5 / 6 + 3 / 6 + 6 / 8) / 3
    f1 = [2 * (5 / 7) * (5 / 6) / (5 / 7 + 5 / 6),
          2 * (3 / 6) * (3 / 6) / (3 / 6 + 3 / 6),
          2 * (6 / 7) * (6 / 8) / (6 / 7 + 6 / 8)]
    assert macro_f1(cm) == pytest.approx(sum(f1) / 3, abs=1e-15)


def test_random_matrices_match_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(50):
        cm = rng.integers(1, 20, size=(4, 4))
        rec = [cm[i, i] / cm[i].sum() for i in range(4)]
        prec = [cm[i, i] / cm[:, i].sum() for i in range(4)]
        f1 = [2 * p * r / (p + r) for p, r in zip(prec, rec)]
        assert balanced_accuracy(cm) == pytest.approx(np.mean(rec), abs=1e-15)
        assert macro_f1(cm) == pytest.approx(np.mean(f1), abs=1e-15)


def test_majority_class_on_balanced_five():
    cm = np.zeros((5, 5), dtype=int)
    cm[:, 0] = 10
    assert balanced_accuracy(cm) == pytest.approx(0.2)


def test_never_predicted_class_scores_zero():
    cm = np.array([[5, 0, 0], [0, 5, 0], [0, 5, 0]])
    assert per_class(cm)["f1"][2] == 0.0
    assert macro_f1(cm) == pytest.approx((1 + 2 * 0.5 * 1 / 1.5 + 0) / 3)


def test_absent_class_warns():
    cm = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    with pytest.warns(RuntimeWarning, match="absent"):
        assert macro_f1(cm) == pytest.approx(2 / 3)


def test_errors():
    with pytest.raises(ValueError):
        balanced_accuracy(np.array([[1, 0], [0, 0]]))
    with pytest.raises(ValueError):
        macro_f1(np.zeros((0, 0)))


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 1, 2, 2, 2], [0, 1, 2, 2, 2, 0], 3)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [1, 0, 2]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        macro_f1(cm)
