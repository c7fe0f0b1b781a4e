import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clap.errors import EmptyMatrix, InvalidLabel
from clap.metrics import (confusion_matrix, evaluate_predictions, metrics_from_confusion,
                          parse_report_csv, render_confusion_csv, render_report)


def tally(truths, preds, k):
    """Per-sample TP/FP/FN counting, independent of any matrix."""
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    for t, p in zip(truths, preds):
        if t == p:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    rows = []
    for c in range(k):
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append((prec, rec, f1, tp[c] + fn[c]))
    return rows


def test_confusion_examples():
    np.testing.assert_array_equal(confusion_matrix([0, 1], [0, 1], 2), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(confusion_matrix([0, 0, 1], [1, 0, 1], 2), [[1, 1], [0, 1]])


def test_confusion_matches_counting():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 10, 10_000), rng.integers(0, 10, 10_000)
    expected = np.zeros((10, 10), dtype=int)
    for a, b in zip(t, p):
        expected[a][b] += 1
    np.testing.assert_array_equal(confusion_matrix(t, p, 10), expected)


def test_confusion_invalid_label():
    with pytest.raises(InvalidLabel):
        confusion_matrix([0, 2], [0, 1], 2)
    with pytest.raises(InvalidLabel):
        confusion_matrix([0], [-1], 2)


def test_perfect_diagonal():
    rep = metrics_from_confusion(np.diag([3, 5, 2]))
    assert rep.accuracy == 1.0 and rep.weighted_avg == (1.0, 1.0, 1.0)
    assert all((c.precision, c.recall, c.f1) == (1.0, 1.0, 1.0) for c in rep.per_class)


def test_f1_harmonic():
    # class 0: predicted once (correct) but two true samples -> P=1, R=0.5
    rep = evaluate_predictions([0, 0, 1], [0, 1, 1], 2)
    c0 = rep.per_class[0]
    assert (c0.precision, c0.recall) == (1.0, 0.5)
    assert c0.f1 == pytest.approx(2 / 3)


def test_degenerate_class_flagged():
    rep = metrics_from_confusion(np.array([[2, 0], [0, 0]]))
    c1 = rep.per_class[1]
    assert (c1.precision, c1.recall, c1.f1, c1.support) == (0.0, 0.0, 0.0, 0)
    assert c1.degenerate and not rep.per_class[0].degenerate


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        metrics_from_confusion(np.zeros((0, 0), dtype=int))
    with pytest.raises(EmptyMatrix):
        metrics_from_confusion(np.zeros((3, 3), dtype=int))


def test_fully_separated_class_row():
    # one class never confused with any other, inside a noisy 22-class matrix
    rng = np.random.default_rng(3)
    m = rng.integers(0, 4, size=(22, 22))
    m[7, :] = 0
    m[:, 7] = 0
    m[7, 7] = 40
    text = render_report(metrics_from_confusion(m), [f"c{i}" for i in range(22)]).decode()
    row = next(line for line in text.splitlines() if line.startswith("c7 "))
    assert row.split()[1:4] == ["1.00", "1.00", "1.00"]


def test_brute_force_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        k = int(rng.integers(2, 23))
        n = int(rng.integers(1, 200))
        t = rng.integers(0, k, n)
        # bias predictions towards the truth so every regime shows up
        p = np.where(rng.random(n) < rng.random(), t, rng.integers(0, k, n))
        rep = evaluate_predictions(t, p, k)
        expected = tally(t.tolist(), p.tolist(), k)
        got = [(c.precision, c.recall, c.f1, c.support) for c in rep.per_class]
        assert got == expected
        assert rep.accuracy == sum(a == b for a, b in zip(t, p)) / n


@settings(max_examples=80)
@given(arrays(np.int64, st.tuples(st.integers(1, 6)).map(lambda s: (s[0], s[0])),
              elements=st.integers(0, 30)))
def test_metric_invariants(m):
    if m.sum() == 0:
        return
    rep = metrics_from_confusion(m)
    assert int(rep.confusion.sum()) == int(m.sum())
    for c in rep.per_class:
        for v in (c.precision, c.recall, c.f1):
            assert 0.0 <= v <= 1.0
        if c.precision and c.recall:
            assert min(c.precision, c.recall) - 1e-12 <= c.f1 <= max(c.precision, c.recall) + 1e-12
    # accuracy equals support-weighted recall
    assert rep.accuracy == pytest.approx(rep.weighted_avg[1], abs=1e-12)
    support = np.array([c.support for c in rep.per_class])
    wp = float(np.sum(support * [c.precision for c in rep.per_class]) / support.sum())
    assert rep.weighted_avg[0] == pytest.approx(wp, abs=1e-12)


def test_text_report_perfect_two_class():
    text = render_report(metrics_from_confusion(np.diag([4, 6])), ["a", "b"]).decode()
    lines = text.splitlines()
    assert lines[1].split()[1:4] == ["1.00"] * 3 and lines[2].split()[1:4] == ["1.00"] * 3
    assert lines[3].startswith("Weighted avg") and lines[3].split()[2:5] == ["1.00"] * 3
    assert "accuracy: 1.0000 (10/10)" in text


def test_csv_roundtrip_and_row_count():
    rng = np.random.default_rng(5)
    names = [f"class{i}" for i in range(22)]
    rep = evaluate_predictions(rng.integers(0, 22, 500), rng.integers(0, 22, 500), 22)
    rows = parse_report_csv(render_report(rep, names, "csv"))
    assert len(rows) == 23 and rows[-1][0] == "weighted_avg"
    for (name, p, r, f, s), c in zip(rows, rep.per_class):
        assert (round(p, 4), round(r, 4), round(f, 4), s) == \
            (round(c.precision, 4), round(c.recall, 4), round(c.f1, 4), c.support)
    text = render_report(rep, names).decode()
    data_rows = [ln for ln in text.splitlines()[1:] if ln.startswith(("class", "Weighted"))]
    assert len(data_rows) == 23 and data_rows[-1].startswith("Weighted avg")


def test_report_is_deterministic():
    rep = evaluate_predictions([0, 1, 1, 2], [0, 2, 1, 2], 3)
    names = ["x", "y", "z"]
    assert render_report(rep, names) == render_report(rep, names)
    assert render_report(rep, names, "csv") == render_report(rep, names, "csv")


def test_confusion_csv():
    out = render_confusion_csv(np.array([[1, 2], [0, 3]]), ["a", "b"]).decode()
    assert out == "true\\pred,a,b\na,1,2\nb,0,3\n"


def test_report_name_count_checked():
    with pytest.raises(ValueError):
        render_report(metrics_from_confusion(np.eye(2, dtype=int)), ["only"])
