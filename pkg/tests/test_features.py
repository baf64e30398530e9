import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mandarin_e2e.features import (
    CMVNStats,
    FbankConfig,
    FeatureError,
    FeatureMatrix,
    accumulate_cmvn,
    apply_cmvn,
    extract_fbank,
    fbank_from_wav,
    mel_band_centers,
    read_features,
    write_features,
    write_wav,
)

CFG = FbankConfig()


def fbank_oracle(x, cfg=CFG):
    """Explicit loop over frames with a naive DFT and hand-built HTK triangles."""
    L, S, N = cfg.frame_len, cfg.frame_shift, cfg.n_fft
    mel = lambda f: 2595.0 * math.log10(1 + f / 700.0)
    inv = lambda m: 700.0 * (10 ** (m / 2595.0) - 1)
    top = mel(cfg.sample_rate / 2)
    edges = [inv(top * i / (cfg.n_mels + 1)) for i in range(cfg.n_mels + 2)]
    n_bins = N // 2 + 1
    k = np.arange(n_bins)
    n = np.arange(N)
    dft = np.exp(-2j * np.pi * np.outer(k, n) / N)
    rows = []
    for t in range(1 + (len(x) - L) // S):
        seg = np.array(x[t * S:t * S + L], dtype=float)
        emph = np.empty(L)
        emph[0] = seg[0] * (1 - cfg.preemphasis)
        for i in range(1, L):
            emph[i] = seg[i] - cfg.preemphasis * seg[i - 1]
        win = np.array([0.54 - 0.46 * math.cos(2 * math.pi * i / (L - 1)) for i in range(L)])
        padded = np.zeros(N)
        padded[:L] = emph * win
        power = np.abs(dft @ padded) ** 2
        row = []
        for m in range(cfg.n_mels):
            lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
            e = 0.0
            for b in range(n_bins):
                f = b * cfg.sample_rate / N
                if lo < f <= mid:
                    e += power[b] * (f - lo) / (mid - lo)
                elif mid < f < hi:
                    e += power[b] * (hi - f) / (hi - mid)
            row.append(math.log(max(e, cfg.energy_floor)))
        rows.append(row)
    return np.array(rows)


def test_silence_hits_log_floor():
    fm = extract_fbank(np.zeros(16000))
    assert fm.frames.shape == (98, 40)
    assert np.all(fm.frames == CFG.log_floor)


def test_single_frame_framing():
    assert extract_fbank(np.random.default_rng(0).normal(size=400)).num_frames == 1
    assert extract_fbank(np.ones(559)).num_frames == 1
    assert extract_fbank(np.ones(560)).num_frames == 2


@pytest.mark.parametrize("n", [0, 1, 399])
def test_too_short_audio_rejected(n):
    with pytest.raises(FeatureError):
        extract_fbank(np.zeros(n))


@pytest.mark.parametrize("band", [10, 20, 30])
def test_sine_at_band_center_peaks_in_that_band(band):
    f0 = mel_band_centers(CFG)[band]
    t = np.arange(4000) / CFG.sample_rate
    x = 1000 * np.sin(2 * np.pi * f0 * t)
    fm = extract_fbank(x)
    assert np.all(fm.frames.argmax(axis=1) == band)
    ref = fbank_oracle(x)
    assert np.all(ref.argmax(axis=1) == band)
    np.testing.assert_allclose(fm.frames, ref, atol=1e-8)


def test_matches_oracle_on_noise():
    x = np.random.default_rng(3).normal(scale=300, size=1200)
    np.testing.assert_allclose(extract_fbank(x).frames, fbank_oracle(x), atol=1e-8)


def test_deterministic():
    x = np.random.default_rng(5).normal(size=3000)
    a, b = extract_fbank(x).frames, extract_fbank(x.copy()).frames
    assert a.tobytes() == b.tobytes()


def test_wav_round_trip(tmp_path):
    x = np.round(np.random.default_rng(1).normal(scale=1000, size=2000))
    write_wav(tmp_path / "a.wav", x, 16000)
    np.testing.assert_array_equal(fbank_from_wav(tmp_path / "a.wav").frames, extract_fbank(x).frames)
    write_wav(tmp_path / "b.wav", x, 8000)
    with pytest.raises(FeatureError):
        fbank_from_wav(tmp_path / "b.wav")


def test_feature_file_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    write_features(tmp_path / "x.fbk", m)
    got = read_features(tmp_path / "x.fbk").frames
    assert got.dtype == np.float64
    np.testing.assert_array_equal(got, m.astype(np.float64))
    raw = (tmp_path / "x.fbk").read_bytes()
    (tmp_path / "bad.fbk").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FeatureError):
        read_features(tmp_path / "bad.fbk")
    (tmp_path / "short.fbk").write_bytes(raw[:-4])
    with pytest.raises(FeatureError):
        read_features(tmp_path / "short.fbk")


def test_feature_matrix_rejects_nonfinite_and_empty():
    with pytest.raises(FeatureError):
        FeatureMatrix(np.array([[0.0, np.nan]]))
    with pytest.raises(FeatureError):
        FeatureMatrix(np.zeros((0, 3)))


def _corpus_stats(mats):
    s = CMVNStats.empty(mats[0].shape[1])
    for m in mats:
        s = accumulate_cmvn(s, FeatureMatrix(m))
    return s


def test_two_utterance_stats_match_concatenation():
    rng = np.random.default_rng(2)
    a, b = rng.normal(3, 2, size=(11, 4)), rng.normal(-1, 5, size=(6, 4))
    s = _corpus_stats([a, b])
    cat = np.concatenate([a, b])
    np.testing.assert_allclose(s.mean, cat.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(s.var, cat.var(axis=0), rtol=1e-10)
    assert s.count == 17


def test_normalized_corpus_has_zero_mean_unit_variance():
    rng = np.random.default_rng(4)
    mats = [rng.normal(rng.normal(size=8) * 10, rng.uniform(0.1, 9, size=8), size=(n, 8)) for n in (5, 30, 17)]
    s = _corpus_stats(mats)
    out = np.concatenate([apply_cmvn(FeatureMatrix(m), s).frames for m in mats])
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)


def test_constant_corpus_normalizes_to_zero():
    m = np.full((20, 3), 7.25)
    out = apply_cmvn(FeatureMatrix(m), _corpus_stats([m])).frames
    np.testing.assert_allclose(out, 0, atol=1e-6)


def test_identity_stats_are_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    s = CMVNStats(np.zeros(3), np.full(3, 10.0), 10)
    np.testing.assert_allclose(apply_cmvn(FeatureMatrix(x), s).frames, x, rtol=0, atol=1e-15)


def test_cmvn_errors(tmp_path):
    with pytest.raises(FeatureError):
        CMVNStats.empty(3).mean
    with pytest.raises(FeatureError):
        accumulate_cmvn(CMVNStats.empty(3), FeatureMatrix(np.zeros((2, 4))))
    s = _corpus_stats([np.ones((2, 3))])
    with pytest.raises(FeatureError):
        apply_cmvn(FeatureMatrix(np.zeros((2, 4))), s)
    s.save(tmp_path / "c.npz")
    t = CMVNStats.load(tmp_path / "c.npz")
    np.testing.assert_array_equal(t.sum, s.sum)
    assert t.count == s.count


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_cmvn_accumulation_is_order_independent(lengths, rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**32 - 1))
    mats = [rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20), size=(n, 3)) for n in lengths]
    a = _corpus_stats(mats)
    perm = list(range(len(mats)))
    rnd.shuffle(perm)
    b = _corpus_stats([mats[i] for i in perm])
    assert a.count == b.count
    np.testing.assert_allclose(a.sum, b.sum, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a.sum_sq, b.sum_sq, rtol=1e-9)
