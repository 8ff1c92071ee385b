import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import enumerate_windows, magnitude_db, sos_impulse_response
from mentalstate.dataio import LabeledEpoch, State
from mentalstate.dsp import (
    DEFAULT_BANDS, Clip, FilterSpec, SegmentationConfig, band_power, clip_count, design_bandpass,
    filtfilt, normalize_array, normalize_clip, segment, total_power,
)
from mentalstate.errors import ClipTooShort, DegenerateClip, InvalidBand, SignalTooShort

FS = 128.0


@pytest.fixture(scope="module")
def impulse():
    return sos_impulse_response(design_bandpass(FilterSpec(), FS).sections, 8192)


def test_passband_within_1db(impulse):
    assert abs(magnitude_db(impulse, FS, 20.0)) <= 1.0


def test_stopband_attenuation(impulse):
    assert magnitude_db(impulse, FS, 0.1) <= -20.0
    assert magnitude_db(impulse, FS, 63.9) <= -20.0


def test_sections_normalized_and_stable():
    for spec in (FilterSpec(), FilterSpec(0.5, 50.0, 8), FilterSpec(4.0, 8.0, 2)):
        cas = design_bandpass(spec, FS)
        assert cas.sections.shape == (spec.order // 2, 6)
        assert np.allclose(cas.sections[:, 3], 1.0)
        assert cas.is_stable()


@pytest.mark.parametrize("spec", [FilterSpec(40.0, 1.0), FilterSpec(0.0, 40.0),
                                  FilterSpec(1.0, 64.0), FilterSpec(1.0, 40.0, 3)])
def test_invalid_bands(spec):
    with pytest.raises(InvalidBand):
        design_bandpass(spec, FS)


def test_constant_signal_is_removed():
    sos = design_bandpass(FilterSpec(), FS)
    y = filtfilt(np.full(60 * 128, 5.0), sos)
    edge = int(2 * FS)
    assert np.max(np.abs(y[edge:-edge])) < 0.05


def test_20hz_sinusoid_keeps_amplitude():
    t = np.arange(60 * 128) / FS
    y = filtfilt(np.sin(2 * np.pi * 20 * t), design_bandpass(FilterSpec(), FS))
    mid = y[len(y) // 4: 3 * len(y) // 4]
    assert 0.79 <= np.max(np.abs(mid)) <= 1.0


def test_zero_in_zero_out_and_length():
    sos = design_bandpass(FilterSpec(), FS)
    y = filtfilt(np.zeros(500), sos)
    assert y.shape == (500,) and not y.any()


def test_zero_phase():
    t = np.arange(30 * 128) / FS
    x = np.sin(2 * np.pi * 10 * t)
    y = filtfilt(x, design_bandpass(FilterSpec(), FS))
    core = slice(512, -512)
    lags = range(-6, 7)  # well inside half a period of 10 Hz
    xc = [np.dot(np.roll(y, lag)[core], x[core]) for lag in lags]
    assert list(lags)[int(np.argmax(xc))] == 0


def test_short_signal_rejected():
    sos = design_bandpass(FilterSpec(), FS)
    assert sos.pad == 3 * 10 * 4
    with pytest.raises(SignalTooShort):
        filtfilt(np.ones(sos.pad), sos)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_filtfilt_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 600))
    sos = design_bandpass(FilterSpec(), FS)
    lhs = filtfilt(a * x + b * y, sos)
    rhs = a * filtfilt(x, sos) + b * filtfilt(y, sos)
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(1.0, np.max(np.abs(rhs)))


# ---------------------------------------------------------------- segmentation


def _epoch(n, channels=2):
    data = np.arange(channels * n, dtype=np.float64).reshape(channels, n)
    return LabeledEpoch(State.DROWSY, data, "S01-R02", 1000) if n else None


def test_default_window_and_stride():
    assert SegmentationConfig().samples(FS) == (1920, 128)


def test_ten_minute_epoch_gives_586_clips():
    assert clip_count(76800, 1920, 128) == 586
    clips = segment(LabeledEpoch(0, np.zeros((1, 76800)), "s"), SegmentationConfig(), FS)
    assert len(clips) == 586


def test_single_and_empty_segmentation():
    cfg = SegmentationConfig()
    one = segment(LabeledEpoch(0, np.zeros((1, 1920)), "s"), cfg, FS)
    assert len(one) == 1 and one[0].origin_sample == 0
    assert segment(LabeledEpoch(0, np.zeros((1, 1919)), "s"), cfg, FS) == []


def test_count_matches_enumeration_for_all_lengths():
    w, s = 1920, 128
    for n in range(0, 4 * w + 1):
        assert clip_count(n, w, s) == len(enumerate_windows(n, w, s))


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 40), st.integers(1, 4), st.integers(0, 200))
def test_clips_are_exact_submatrices(window, step, n):
    fs = 4.0
    cfg = SegmentationConfig(window / fs, (window - min(step, window - 1)) / fs)
    w, s = cfg.samples(fs)
    if n == 0:
        return
    ep = _epoch(n)
    clips = segment(ep, cfg, fs)
    assert [c.origin_sample - ep.start_sample for c in clips] == enumerate_windows(n, w, s)
    for c in clips:
        i = c.origin_sample - ep.start_sample
        assert np.array_equal(c.data, ep.samples[:, i:i + w])
        assert c.label == ep.label and c.session_id == ep.session_id
    for a, b in zip(clips, clips[1:]):
        assert (a.origin_sample + w) - b.origin_sample == w - s


def test_invalid_segmentation():
    with pytest.raises(ValueError):
        SegmentationConfig(15, 15).samples(FS)
    with pytest.raises(ValueError):
        SegmentationConfig(15.001, 14).samples(FS)


# ---------------------------------------------------------------- normalization


def _clip(data):
    return Clip(np.asarray(data, dtype=np.float64), State.FOCUSED, "s", 0)


def test_two_value_clip():
    out = normalize_clip(_clip([[1, 3, 1, 3]]))
    assert np.allclose(out.data, [[-1, 1, -1, 1]])


def test_constant_clip_is_degenerate():
    with pytest.raises(DegenerateClip):
        normalize_clip(_clip(np.full((2, 10), 4.0)))


finite_clips = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 40)),
                      elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_clips)
def test_normalization_moments_and_order(data):
    assume(data.std() > 1e-3 * max(1.0, np.abs(data).max()))
    out = normalize_clip(_clip(data)).data
    assert abs(out.mean()) < 1e-6
    assert abs(out.std() - 1) < 1e-6
    mean, std = data.mean(), data.std()
    assert np.allclose(out, (data - mean) / std, atol=1e-9)
    # pairwise order is kept (ties may appear when inputs differ below rounding)
    order = np.argsort(data.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= 0)
    again = normalize_clip(_clip(out)).data
    assert np.max(np.abs(again - out)) <= 1e-6


def test_channel_mean_ratio_preserved_under_affine_map(rng):
    data = rng.standard_normal((3, 200)) + np.array([[1.0], [2.0], [5.0]])
    out = normalize_clip(_clip(data)).data
    m_in, m_out = data.mean(axis=1), out.mean(axis=1)
    mean, std = data.mean(), data.std()
    assert np.allclose(m_out, (m_in - mean) / std)
    # differences of channel means scale by exactly 1/s
    assert np.isclose((m_out[2] - m_out[0]) / (m_out[1] - m_out[0]),
                      (m_in[2] - m_in[0]) / (m_in[1] - m_in[0]))


def test_stacked_normalization_matches_per_clip(rng):
    stack = rng.standard_normal((5, 3, 64)) * rng.uniform(0.5, 4, (5, 1, 1))
    out = normalize_array(stack, dtype=np.float64)
    for i in range(5):
        assert np.allclose(out[i], normalize_clip(_clip(stack[i])).data)


# ---------------------------------------------------------------- band power


def test_band_table_tiles_1_to_40():
    edges = [(b.low_hz, b.high_hz) for b in DEFAULT_BANDS]
    assert edges[0][0] == 1.0 and edges[-1][1] == 40.0
    assert all(a[1] == b[0] for a, b in zip(edges, edges[1:]))


def test_zero_clip_band_power():
    bp = band_power(_clip(np.zeros((2, 256))), DEFAULT_BANDS, FS)
    assert bp.shape == (2, 5) and not bp.any()


def test_10hz_sinusoid_lands_in_alpha():
    t = np.arange(1920) / FS
    bp = band_power(_clip(np.sin(2 * np.pi * 10 * t)[None]), DEFAULT_BANDS, FS)[0]
    assert bp[2] >= 0.9 * bp.sum()


def test_sinusoid_power_matches_variance():
    t = np.arange(1920) / FS
    bp = band_power(_clip(3 * np.sin(2 * np.pi * 20 * t)[None]), DEFAULT_BANDS, FS)[0]
    assert np.isclose(bp.sum(), 4.5, rtol=1e-6)  # mean square of a 3-amplitude sine


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(128, 700))
def test_bands_partition_total_power(seed, n):
    x = np.random.default_rng(seed).standard_normal((3, n))
    bp = band_power(_clip(x), DEFAULT_BANDS, FS)
    total = total_power(_clip(x), FS)
    assert np.all(bp >= 0)
    assert np.allclose(bp.sum(axis=1), total, rtol=0.05)


def test_circular_shift_invariance():
    t = np.arange(1920) / FS
    x = np.stack([np.sin(2 * np.pi * f * t + 0.3) for f in (3.0, 10.0, 21.5)])
    a = band_power(_clip(x), DEFAULT_BANDS, FS)
    b = band_power(_clip(np.roll(x, 1, axis=1)), DEFAULT_BANDS, FS)
    assert np.allclose(a, b, rtol=0.02, atol=1e-12)


def test_short_clip_rejected():
    with pytest.raises(ClipTooShort):
        band_power(_clip(np.ones((1, 127))), DEFAULT_BANDS, FS)
