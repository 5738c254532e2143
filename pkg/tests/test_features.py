import numpy as np
import pytest
from scipy import stats

from bwesid.audio_io import AudioBuffer
from bwesid.dsp import potsband_filter
from bwesid.features import (
    LPCC,
    MELCEPST,
    FeatureMatrix,
    FrameConfig,
    LpcModel,
    autocorr_lpc,
    band_energy_ratio,
    extract_features,
    hz_to_mel,
    lpc_to_lpcc,
    lpcc_from_coefficients,
    melcepst,
    voicing_degree,
    write_feature_csv,
)


# ---------------------------------------------------------------------------
# LPC.

def test_lpc_zero_frame_is_flagged():
    model = autocorr_lpc(np.zeros(240), 10)
    assert model.degenerate
    assert model.gain == 0.0
    assert np.all(model.coefficients == 0)


def test_lpc_ar1_yule_walker():
    # a decaying exponential has sample autocorrelation r_k ~ 0.9^k exactly
    frame = 0.9 ** np.arange(240)
    model = autocorr_lpc(frame, 5)
    assert abs(model.coefficients[0] - 0.9) < 1e-8
    assert np.abs(model.coefficients[1:]).max() < 1e-8


def test_lpc_order_zero_gain():
    frame = np.array([1.0, -2.0, 3.0])
    model = autocorr_lpc(frame, 0)
    assert model.coefficients.size == 0
    assert model.gain == pytest.approx(14.0, rel=1e-8)


def test_lpc_order_validation():
    with pytest.raises(ValueError):
        autocorr_lpc(np.ones(5), 5)
    with pytest.raises(ValueError):
        autocorr_lpc(np.ones(5), -1)


def test_lpc_reflection_stability_on_speechlike_frames():
    rng = np.random.default_rng(2)
    x = rng.normal(size=4000)
    # colored noise through a resonant filter
    from scipy.signal import lfilter

    x = lfilter([1.0], [1.0, -1.2, 0.8], x)
    frame = x[1000:1240] * np.hamming(240)
    model = autocorr_lpc(frame, 12)
    roots = np.roots(np.concatenate([[1.0], -model.coefficients]))
    assert np.abs(roots).max() < 1.0


# ---------------------------------------------------------------------------
# LPCC.

def test_lpcc_zero_model():
    assert np.all(lpc_to_lpcc(LpcModel(4, np.zeros(4), 1.0), 10) == 0)


def test_lpcc_one_pole_analytic():
    for alpha in np.arange(0.1, 0.95, 0.1):
        c = lpc_to_lpcc(LpcModel(1, np.array([alpha]), 1.0), 20)
        n = np.arange(1, 21)
        assert np.abs(c - alpha**n / n).max() < 1e-10


def _random_stable_coefficients(rng, order):
    """Predictor coefficients from poles placed inside radius 0.95."""
    poles = []
    remaining = order
    while remaining >= 2:
        radius = rng.uniform(0.3, 0.95)
        angle = rng.uniform(0.05, np.pi - 0.05)
        poles.extend([radius * np.exp(1j * angle), radius * np.exp(-1j * angle)])
        remaining -= 2
    if remaining:
        poles.append(rng.uniform(-0.95, 0.95))
    a_poly = np.real(np.poly(poles))      # A(z) = 1 + a1 z^-1 + ...
    return -a_poly[1:]                    # predictor convention


def _spectral_cepstrum_oracle(a, n_ceps, nfft=4096):
    """Cepstrum of 1/A(z) by brute force over a dense frequency grid."""
    spectrum = np.fft.rfft(np.concatenate([[1.0], -a]), nfft)
    log_mag = np.log(1.0 / np.abs(spectrum))
    c = np.fft.irfft(log_mag, nfft)
    return 2.0 * c[1 : n_ceps + 1]


def test_lpcc_matches_spectral_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        order = int(rng.integers(1, 21))
        a = _random_stable_coefficients(rng, order)
        n_ceps = int(rng.integers(order, 25))
        got = lpc_to_lpcc(LpcModel(order, a, 1.0), n_ceps)
        want = _spectral_cepstrum_oracle(a, n_ceps)
        assert np.abs(got - want).max() < 1e-6


def test_lpcc_two_pole_direct_case():
    rng = np.random.default_rng(1)
    a = _random_stable_coefficients(rng, 2)
    got = lpc_to_lpcc(LpcModel(2, a, 1.0), 16)
    want = _spectral_cepstrum_oracle(a, 16)
    assert np.abs(got - want).max() < 1e-6


def test_lpcc_batch_equals_single():
    rng = np.random.default_rng(3)
    rows = np.vstack([_random_stable_coefficients(rng, 8) for _ in range(5)])
    batch = lpcc_from_coefficients(rows, 12)
    for i in range(5):
        single = lpc_to_lpcc(LpcModel(8, rows[i], 1.0), 12)
        assert np.allclose(batch[i], single)


# ---------------------------------------------------------------------------
# Mel cepstrum.

def test_melcepst_scale_invariance():
    rng = np.random.default_rng(0)
    frame = rng.normal(size=240)
    base = melcepst(frame, 8000, 12)
    for k in (0.001, 7.3, 1e4):
        assert np.abs(melcepst(k * frame, 8000, 12) - base).max() < 1e-9


def test_mel_scale_anchor():
    assert abs(hz_to_mel(1000.0) - 1000.0) < 0.5
    assert hz_to_mel(0.0) == 0.0


def test_melcepst_flat_spectrum_gives_near_zero_cepstra():
    frame = np.zeros(240)
    frame[0] = 1.0
    c = melcepst(frame, 8000, 12)
    assert np.abs(c).max() < 0.1


def test_melcepst_errors():
    with pytest.raises(ValueError, match="fft_len"):
        melcepst(np.ones(240), 8000, 12, fft_len=128)
    with pytest.raises(ValueError, match="n_ceps"):
        melcepst(np.ones(240), 8000, 26, n_filters=26)


def test_melcepst_default_filter_counts():
    from bwesid.features import default_mel_filter_count

    assert default_mel_filter_count(8000) == 26
    assert default_mel_filter_count(16000) == 29


# ---------------------------------------------------------------------------
# Voicing.

def test_voicing_zero_frame():
    assert voicing_degree(np.zeros(240), 8000) == 0.0


def test_voicing_pure_tone():
    t = np.arange(240) / 8000.0
    assert voicing_degree(np.sin(2 * np.pi * 200.0 * t), 8000) >= 0.95


def test_voicing_white_noise_monte_carlo():
    rng = np.random.default_rng(123)
    values = [voicing_degree(rng.normal(size=240), 8000) for _ in range(200)]
    assert np.mean(np.array(values) < 0.5) >= 0.99


def test_voicing_bounds_and_short_frame():
    rng = np.random.default_rng(5)
    for _ in range(50):
        v = voicing_degree(rng.normal(size=240), 8000)
        assert 0.0 <= v <= 1.0
    with pytest.raises(ValueError):
        voicing_degree(np.ones(100), 8000)


def test_voicing_monotone_in_snr():
    rng = np.random.default_rng(77)
    t = np.arange(240) / 8000.0
    tone = np.sin(2 * np.pi * 200.0 * t)
    snrs_db = np.arange(-20, 21, 5)
    means = []
    for snr in snrs_db:
        amp = 10 ** (snr / 20.0) * np.sqrt(2) * 1.0  # tone rms = amp/sqrt(2)
        vals = [voicing_degree(amp / np.sqrt(2) * tone + rng.normal(size=240), 8000)
                for _ in range(30)]
        means.append(np.mean(vals))
    rho = stats.spearmanr(snrs_db, means).statistic
    assert rho > 0.9


# ---------------------------------------------------------------------------
# Band energy ratio.

def test_band_ratio_equal_sines():
    t = np.arange(480) / 16000.0
    frame = np.sin(2 * np.pi * 1000 * t) + np.sin(2 * np.pi * 5000 * t)
    assert abs(band_energy_ratio(frame, 16000)) <= 0.5


def test_band_ratio_narrowband_only():
    rng = np.random.default_rng(8)
    from bwesid.dsp import hamming_window
    from bwesid.synthetic import speaker_profile, sustained_utterance

    utt = sustained_utterance(rng, speaker_profile(rng), 1.0)
    narrow = potsband_filter(utt)
    window = hamming_window(480)
    for start in range(0, len(narrow.samples) - 480, 480):
        frame = narrow.samples[start : start + 480] * window
        assert band_energy_ratio(frame, 16000) <= -30.0


def test_band_ratio_clamps():
    t = np.arange(480) / 16000.0
    assert band_energy_ratio(np.sin(2 * np.pi * 5000 * t), 16000) == 40.0
    assert band_energy_ratio(np.zeros(480), 16000) == -80.0


def test_band_ratio_requires_16k():
    with pytest.raises(ValueError):
        band_energy_ratio(np.ones(240), 8000)


# ---------------------------------------------------------------------------
# Front end.

def test_extract_features_frame_count_60s():
    buf = AudioBuffer(np.random.default_rng(0).normal(size=480000), 8000)
    feats = extract_features(buf, MELCEPST, 12)
    assert feats.frame_count == 5998
    assert feats.dimension == 12
    assert feats.label == MELCEPST


def test_extract_features_lpcc_width():
    buf = AudioBuffer(np.random.default_rng(1).normal(size=16000), 8000)
    feats = extract_features(buf, LPCC, 12)
    assert feats.dimension == 12
    assert feats.label == LPCC


def test_extract_features_short_frames_double_count():
    buf = AudioBuffer(np.random.default_rng(2).normal(size=64000), 16000)
    n30 = extract_features(buf, MELCEPST, 10, FrameConfig(frame_ms=30.0)).frame_count
    n15 = extract_features(buf, MELCEPST, 10, FrameConfig(frame_ms=15.0)).frame_count
    assert abs(n15 - 2 * n30) <= 2


def test_extract_features_rejects_unknown():
    buf = AudioBuffer(np.ones(8000), 8000)
    with pytest.raises(ValueError):
        extract_features(buf, "PLP", 10)
    with pytest.raises(ValueError):
        extract_features(buf, MELCEPST, 0)


def test_feature_matrix_validation():
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((0, 3)), LPCC)
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.inf, 0.0]]), LPCC)


def test_feature_csv_dump(tmp_path):
    mat = FeatureMatrix(np.arange(6, dtype=float).reshape(2, 3), MELCEPST)
    path = tmp_path / "f.csv"
    write_feature_csv(mat, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "parameterization=MELCEPST,P=3"
    assert lines[1] == "c1,c2,c3"
    assert len(lines) == 4
