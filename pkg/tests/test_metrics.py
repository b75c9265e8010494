import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m3iqa.metrics import (MetricsReport, UndefinedCorrelationError, classification_metrics,
                           evaluate_predictions, plcc, polyfit4, polyval4, reports_to_csv,
                           rough_accuracy, srcc)
from m3iqa.numerics import make_rng


def brute_ranks(v):
    """Average ranks by counting: rank = #smaller + (#equal + 1) / 2."""
    return [sum(w < x for w in v) + (sum(w == x for w in v) + 1) / 2 for x in v]


def pearson_oracle(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_srcc_examples():
    assert srcc([1, 2, 3], [1, 2, 3]) == 1.0
    assert srcc([1, 2, 3], [3, 2, 1]) == -1.0
    x, y = [1, 2, 2, 4], [1, 2, 3, 4]
    assert srcc(x, y) == pytest.approx(pearson_oracle(brute_ranks(x), brute_ranks(y)), abs=1e-12)


def test_srcc_errors():
    with pytest.raises(ValueError, match="length"):
        srcc([1, 2], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        srcc([1, 1, 1], [2, 2, 2])
    with pytest.raises(UndefinedCorrelationError):
        srcc([1, 1, 1], [1, 2, 3])


def test_plcc_examples():
    x = make_rng(0).normal(size=10)
    assert plcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert plcc(x, -x) == pytest.approx(-1.0, abs=1e-15)
    y = make_rng(1).normal(size=10)
    assert plcc(x, y) == pytest.approx(pearson_oracle(list(x), list(y)), abs=1e-12)
    with pytest.raises(UndefinedCorrelationError):
        plcc([1, 2, 3], [5, 5, 5])


def test_srcc_plcc_vs_oracles_many():
    rng = make_rng(2024)
    for _ in range(300):
        n = int(rng.integers(2, 21))
        x = rng.integers(0, 6, size=n).astype(float)  # ties included
        y = rng.normal(size=n)
        if len(set(x)) < 2:
            continue
        assert abs(srcc(x, y) - pearson_oracle(brute_ranks(list(x)), brute_ranks(list(y)))) < 1e-9
        assert abs(plcc(x, y) - pearson_oracle(list(x), list(y))) < 1e-9


def test_srcc_classical_formula():
    rng = make_rng(5)
    for _ in range(500):
        n = int(rng.integers(2, 9))
        x, y = rng.permutation(n) + 1.0, rng.permutation(n) + 1.0
        d2 = int(np.sum((x - y) ** 2))
        assert srcc(x, y) == float(1 - Fraction(6 * d2, n * (n * n - 1)))


@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=15, unique=True),
       st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_correlation_invariances(x, seed):
    x = np.array(x) / 10.0  # separated values, so the transforms stay strictly increasing in floats
    y = make_rng(seed).normal(size=x.size)
    s = srcc(x, y)
    for tx in (np.exp(x / 10), x ** 3, 2.5 * x - 7):
        assert srcc(tx, y) == pytest.approx(s, abs=1e-12)
    p = plcc(x, y)
    assert plcc(3 * x + 2, y) == pytest.approx(p, abs=1e-9)
    assert plcc(-x, y) == pytest.approx(-p, abs=1e-12)
    assert srcc(y, x) == pytest.approx(s, abs=1e-15) and plcc(y, x) == pytest.approx(p, abs=1e-15)


def test_rough_accuracy_examples():
    assert rough_accuracy([0, 1, 4], [0, 1, 4]) == 1.0
    assert rough_accuracy([2], [4]) == 0.0
    assert rough_accuracy([3, 0, 2, 2], [4, 2, 2, 1]) == 0.75
    with pytest.raises(ValueError):
        rough_accuracy([5], [4])
    with pytest.raises(ValueError):
        rough_accuracy([1.5], [1])


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30))
@settings(max_examples=200, deadline=None)
def test_rough_accuracy_symmetric(pairs):
    p, t = zip(*pairs)
    assert rough_accuracy(p, t) == rough_accuracy(t, p)


def test_classification_metrics_hand_confusion():
    assert classification_metrics([1, 2, 3], [1, 2, 3]) == {"accuracy": 1.0, "precision": 1.0, "f1": 1.0}
    # class 0: predicted twice, one correct -> P=0.5, R=1, F1=2/3
    # class 1: never predicted, once true  -> P=0,   R=0, F1=0
    m = classification_metrics([0, 0], [0, 1])
    assert m["accuracy"] == 0.5
    assert m["precision"] == pytest.approx((0.5 + 0.0) / 2)
    assert m["f1"] == pytest.approx((2 / 3 + 0.0) / 2)


def test_polyfit_examples():
    x = np.linspace(-2, 3, 11)
    np.testing.assert_allclose(polyfit4(x, x), [0, 1, 0, 0, 0], atol=1e-8)
    np.testing.assert_allclose(polyfit4(x, np.full_like(x, 3.0)), [3, 0, 0, 0, 0], atol=1e-8)
    nodes = np.arange(9.0) - 4
    np.testing.assert_allclose(polyfit4(nodes, nodes ** 4), [0, 0, 0, 0, 1], atol=1e-6)
    c = [0.5, -1, 2, 0.25, -0.1]
    np.testing.assert_allclose(polyval4(polyfit4(x, polyval4(c, x)), x), polyval4(c, x), atol=1e-8)


def test_polyfit_errors():
    with pytest.raises(np.linalg.LinAlgError):
        polyfit4([1.0] * 6, range(6))
    with pytest.raises(np.linalg.LinAlgError):
        polyfit4([0, 1, 2, 0, 1, 2], range(6))
    with pytest.raises(ValueError):
        polyfit4([0, 1, 2], [0, 1, 2])


def test_evaluate_predictions_oracle_and_constant():
    y = np.array([0.5, 1.5, 2.5, 3.5, 4.5])
    rep = evaluate_predictions(y, y, (0, 5), "d", "test")
    assert (rep.srcc, rep.plcc, rep.mse, rep.rough_accuracy, rep.accuracy) == (1.0, 1.0, 0.0, 1.0, 1.0)
    const = evaluate_predictions(np.full(5, 2.0), y, (0, 5))
    assert not const.ok and "constant" in const.error and const.srcc is None
    with pytest.raises(ValueError):
        evaluate_predictions([], [])


def test_report_serialization():
    rep = evaluate_predictions([1, 2, 3, 4.4], [1, 2.5, 3, 4], (0, 5), "synthetic", "test")
    d = rep.to_dict()
    assert d["schema_version"] == 1
    assert MetricsReport.from_dict(d) == rep
    assert -1 <= rep.srcc <= 1 and 0 <= rep.rough_accuracy <= 1
    csv_text = reports_to_csv([({"run": "a"}, rep)], extra_fields=("run",))
    header, row = csv_text.splitlines()
    assert header.startswith("run,dataset,split,n,srcc") and row.startswith("a,synthetic,test,4,")
