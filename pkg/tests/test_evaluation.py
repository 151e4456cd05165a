import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskcodec.data import generate_dataset
from taskcodec.evaluation import (
    EvalReport,
    cce_quartiles,
    classification_metrics,
    encode_samples_u16,
    lossless_baseline_cg,
    quartiles,
    violation_rate,
)


def test_violation_rate_examples():
    assert violation_rate([0.5, 0.8, 0.9], 0.75) == pytest.approx(2 / 3)
    assert violation_rate([0.1, 0.75], 0.75) == 0.0
    assert violation_rate([0.5, 9.0], 1e300) == 0.0
    with pytest.raises(ValueError):
        violation_rate([], 0.5)
    with pytest.raises(ValueError):
        violation_rate([0.1], -1)


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(0, 10)), st.floats(0, 10), st.floats(0, 10))
def test_violation_rate_non_increasing(losses, a, b):
    lo, hi = sorted((a, b))
    assert violation_rate(losses, hi) <= violation_rate(losses, lo)


def test_classification_perfect_and_single_class():
    y = np.repeat(np.arange(4), 5)
    m = classification_metrics(y, y)
    assert m["macro_f1"] == m["macro_precision"] == m["macro_recall"] == 1.0
    m = classification_metrics(np.zeros_like(y), y)
    assert m["per_class"]["normal"]["recall"] == 1.0
    assert m["per_class"]["normal"]["precision"] == 0.25
    # F1 of class 0 is 2 * 0.25 * 1 / 1.25 = 0.4, the other three score 0
    assert m["macro_f1"] == pytest.approx(0.1)
    assert m["per_class"]["noisy"]["f1"] == 0.0


def test_classification_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        classification_metrics([0, 1], [0])


@settings(max_examples=40)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=40), st.lists(st.integers(0, 3), min_size=2, max_size=40),
       st.permutations(range(4)))
def test_macro_f1_relabel_invariant(a, b, perm):
    n = min(len(a), len(b))
    pred, true = np.array(a[:n]), np.array(b[:n])
    p = np.array(perm)
    assert classification_metrics(p[pred], p[true])["macro_f1"] == pytest.approx(
        classification_metrics(pred, true)["macro_f1"])


def _brute_quantile(values, q):
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def test_quartiles_against_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(200):
        v = rng.exponential(size=rng.integers(4, 60)).tolist()
        got = quartiles(v)
        want = tuple(_brute_quantile(v, q) for q in (0.25, 0.5, 0.75))
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_quartile_examples():
    assert quartiles([1, 2, 3, 4])[1] == 2.5
    assert quartiles([3.0] * 7) == (3.0, 3.0, 3.0)
    with pytest.raises(ValueError):
        quartiles([1, 2, 3])
    table = cce_quartiles({64: [1, 2, 3, 4], 32: [0, 0, 0, 0]})
    assert table[32] == (0.0, 0.0, 0.0)


def test_report_invariants():
    with pytest.raises(ValueError):
        EvalReport(1.0, 0.0, 1.5, 10)
    with pytest.raises(ValueError):
        EvalReport(1.0, 0.0, 0.0, 10, cce_quartiles={32: (2.0, 1.0, 3.0)})
    r = EvalReport(24.25, 0.1, 0.0, 4, cce_quartiles={32: (0.0, 0.1, 0.2)})
    assert '"avg_cg": 24.25' in r.to_json()


def test_sample_encoding():
    raw = encode_samples_u16([0.0, 1.0, 0.5])
    assert raw == bytes([0, 0, 255, 255, 0, 128])


def test_lossless_baseline():
    mean, _ = lossless_baseline_cg([np.full(1024, 0.5)])
    assert mean > 10
    rng = np.random.default_rng(0)
    noise = [rng.uniform(size=1024) for _ in range(10)]
    mean, _ = lossless_baseline_cg(noise)
    assert abs(mean - 1.0) <= 0.2
    ecg, std = lossless_baseline_cg(generate_dataset(50, seed=1))
    assert ecg > mean and std >= 0
    # any coder is accepted
    assert lossless_baseline_cg([np.zeros(8)], coder=lambda b: b)[0] == 1.0
    assert lossless_baseline_cg([np.zeros(8)], coder=lambda b: zlib.compress(b, 1))[0] > 0


@pytest.mark.xfail(strict=True, reason="full-scale 16-bit samples of a drifting signal leave DEFLATE near 1.05")
def test_synthetic_ecg_lossless_range():
    mean, _ = lossless_baseline_cg(generate_dataset(50, seed=1))
    assert 1.5 <= mean <= 6
