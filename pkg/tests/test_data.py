import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskcodec.data import (
    GeneratorParams,
    generate_dataset,
    generate_segment,
    load_csv,
    load_split,
    make_synthetic_split,
    normalize_minmax,
    pulse_train,
    save_split,
    split_dataset,
)

QUIET = GeneratorParams(noise_amplitude=0.0, baseline_wander_amplitude=0.0)


def test_noiseless_segment_is_pulse_train():
    seg = generate_segment(QUIET, "normal", 11, normalize=False)
    # re-derive the beats the generator drew, then rebuild the train independently
    rng = np.random.default_rng(11)
    base = QUIET.mean_rr * QUIET.sample_rate * rng.uniform(0.9, 1.1)
    t = -int(round(rng.uniform(0.0, base)))
    beats = [t]
    while t < QUIET.M + base:
        t += max(int(np.ceil(QUIET.min_gap)), int(round(base * (1 + QUIET.rr_jitter * rng.standard_normal()))))
        beats.append(t)
    amp = rng.uniform(0.9, 1.1)
    expected = pulse_train(np.array(beats), amp * np.ones(len(beats)), QUIET)
    np.testing.assert_array_equal(seg.samples, expected)


def test_noiseless_maxima_are_peaks():
    seg = generate_segment(QUIET, "normal", 4)
    x = seg.samples
    interior = np.arange(1, x.size - 1)
    maxima = interior[(x[interior] > x[interior - 1]) & (x[interior] >= x[interior + 1]) & (x[interior] > 0.5)]
    inside = seg.peak_positions[(seg.peak_positions > 0) & (seg.peak_positions < x.size - 1)]
    np.testing.assert_array_equal(maxima, inside)


def test_generator_deterministic():
    a = generate_segment(GeneratorParams(), "other", 99)
    b = generate_segment(GeneratorParams(), "other", 99)
    assert a == b


def test_af_like_has_larger_rr_spread():
    for seed in range(10):
        normal = generate_segment(QUIET, "normal", seed)
        af = generate_segment(QUIET, "af_like", seed)
        assert np.diff(af.peak_positions).std() > np.diff(normal.peak_positions).std()


def test_rr_std_separates_af_from_normal():
    normal = [np.diff(generate_segment(QUIET, "normal", s).peak_positions).std() for s in range(50)]
    af = [np.diff(generate_segment(QUIET, "af_like", s).peak_positions).std() for s in range(50)]
    assert max(normal) < np.median(af)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(range(4)))
def test_generated_invariants(seed, cls):
    p = GeneratorParams()
    seg = generate_segment(p, cls, seed)
    assert seg.samples.min() >= 0 and seg.samples.max() <= 1
    gaps = np.diff(seg.peak_positions)
    assert np.all(gaps >= p.min_gap)
    assert seg.label == cls


def test_generator_params_validation():
    with pytest.raises(ValueError):
        GeneratorParams(class_mix=(0.5, 0.5, 0.5, 0.0))
    with pytest.raises(ValueError):
        GeneratorParams(noise_amplitude=-1)


def test_normalize_degenerate():
    np.testing.assert_array_equal(normalize_minmax(np.full(10, 3.3)), np.full(10, 0.5))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=100))
def test_normalize_range(xs):
    out = normalize_minmax(np.array(xs))
    assert np.all((out >= 0) & (out <= 1))


def _write_csv(path, values, label=None):
    with open(path, "w") as fh:
        for v in values:
            fh.write(f"{v}\n" if label is None else f"{v},{label}\n")


def test_load_csv_windows(tmp_path):
    p = tmp_path / "a.csv"
    _write_csv(p, np.sin(np.arange(3072) / 10.0))
    assert len(load_csv(p, 1024)) == 3
    _write_csv(p, np.sin(np.arange(1500) / 10.0), label=2)
    segs = load_csv(p, 1024)
    assert len(segs) == 1 and segs[0].label == 2
    assert segs[0].samples.min() == 0.0 and segs[0].samples.max() == 1.0


def test_load_csv_constant_and_errors(tmp_path):
    p = tmp_path / "c.csv"
    _write_csv(p, [7.0] * 1024)
    np.testing.assert_array_equal(load_csv(p, 1024)[0].samples, np.full(1024, 0.5))
    p.write_text("1.0\n2.0\nnot-a-number\n")
    with pytest.raises(ValueError, match="row 3"):
        load_csv(p, 2)
    with pytest.raises(ValueError, match="M not divisible by 64"):
        load_csv(p, 1000, max_cg=64)


def test_split_sizes_and_determinism():
    segs = generate_dataset(10, seed=1)
    s1 = split_dataset(segs, (0.8, 0.1, 0.1), seed=5)
    assert (len(s1.train), len(s1.validation), len(s1.test)) == (8, 1, 1)
    s2 = split_dataset(segs, (0.8, 0.1, 0.1), seed=5)
    assert [s.id for s in s1.train + s1.validation + s1.test] == [s.id for s in s2.train + s2.validation + s2.test]
    s3 = split_dataset(segs, (0.8, 0.1, 0.1), seed=6)
    assert [s.id for s in s1.train] != [s.id for s in s3.train]
    with pytest.raises(ValueError):
        split_dataset(segs, (0.5, 0.5, 0.5))


def test_split_roundtrip(tmp_path):
    split = make_synthetic_split(6, 2, 3, seed=3)
    save_split(split, tmp_path / "d.npz")
    back = load_split(tmp_path / "d.npz")
    for name in ("train", "validation", "test"):
        assert getattr(back, name) == getattr(split, name)
    ids = [s.id for s in back.train + back.validation + back.test]
    assert len(ids) == len(set(ids))
