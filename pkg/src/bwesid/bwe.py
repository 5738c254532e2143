"""Bandwidth extension: joint narrow/high-band model training and synthesis.

Training pairs each narrowband frame (15 mel-cepstra + voicing) with the
high-band frame it came from (8 envelope cepstra + energy ratio) and fits a
full-covariance mixture to the joint vectors. Extension estimates the energy
ratio with an asymmetric cost (over-estimates penalized), the envelope by
MMSE given the narrowband features and that estimate, and rebuilds the high
band from a spectrally folded excitation shaped in the frequency domain.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import scipy.fft

from .audio_io import AudioBuffer, alaw_roundtrip, require_rate
from scipy import signal as _signal

from .dsp import (
    downsample_2x,
    frame_signal,
    potsband_filter,
    upsample_2x,
    zero_insert_2x,
)
from .features import (
    ENERGY_RATIO_FLOOR_DB,
    band_energy_ratio_frames,
    melcepst_frames,
    voicing_frames,
    _levinson,
)
from .gmm import (
    BlockSplit,
    Gmm,
    GmmConditioner,
    em_fit,
    gmm_from_bytes,
    gmm_to_bytes,
    marginal,
)

BWE_MAGIC = b"BWEM"
BWE_FORMAT_VERSION = 1

VARIANTS = ("orig", "nb", "bwe", "isdn", "isdn_bwe")

HIGH_BAND_HZ = (3400.0, 8000.0)
NARROW_BAND_HZ = (300.0, 3400.0)

# High-band synthesis runs on short cells (10 ms, 50% overlap, sqrt-Hann so
# the squared windows sum to one) while energy-ratio targets are enforced on
# 20 ms frames at the 10 ms analysis hop. Half-length cells give the gain
# envelope enough resolution to honor per-frame targets that jump sharply.
_SYN_LEN = 160
_SYN_HOP = 80
_MEAS_LEN = 320
_MEAS_HOP = 160
_SYN_NFFT = 512
_EXC_LPC_ORDER = 4

_EPS = 1e-30


@dataclass
class BweFeatureConfig:
    """Frame and feature layout shared by training and extension."""

    frame_ms: float = 30.0
    overlap: float = 2.0 / 3.0
    nb_cepstra: int = 15
    hb_cepstra: int = 8
    over_penalty: float = 3.0
    under_penalty: float = 1.0

    @property
    def nb_dim(self) -> int:
        return self.nb_cepstra + 1          # cepstra + voicing

    @property
    def hb_dim(self) -> int:
        return self.hb_cepstra + 1          # envelope cepstra + energy ratio

    @property
    def joint_dim(self) -> int:
        return self.nb_dim + self.hb_dim


@dataclass
class BweModel:
    """Trained joint density plus the feature layout it was trained with."""

    joint: Gmm
    config: BweFeatureConfig
    format_version: int = BWE_FORMAT_VERSION

    def __post_init__(self):
        if self.joint.dimension != self.config.joint_dim:
            raise ValueError(
                f"model dimension {self.joint.dimension} does not match the"
                f" feature layout ({self.config.joint_dim})"
            )

    @property
    def split(self) -> BlockSplit:
        """Narrowband block vs high-band block of the joint vector."""
        nb = self.config.nb_dim
        return BlockSplit(np.arange(nb), np.arange(nb, self.config.joint_dim))


def _sqrt_hann(length: int) -> np.ndarray:
    n = np.arange(length)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / length))


_crossover_cache = {}


def _crossover_lowpass() -> np.ndarray:
    """Sharp low-pass confining the upsampled branch below the 3.4 kHz split.

    Elliptic, near-flat through 3350 Hz and >= 60 dB down (double pass) from
    3500 Hz, so the base branch cannot put energy into the synthesis band.
    """
    if "sos" not in _crossover_cache:
        _crossover_cache["sos"] = _signal.ellip(
            10, 0.02, 30.0, HIGH_BAND_HZ[0] - 10.0, "lowpass", fs=16000, output="sos"
        )
    return _crossover_cache["sos"]


def _band_bins(nfft: int, fs: int = 16000) -> np.ndarray:
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    return (freqs >= HIGH_BAND_HZ[0]) & (freqs <= HIGH_BAND_HZ[1])


def _narrow_bins(nfft: int, fs: int = 16000) -> np.ndarray:
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    return (freqs >= NARROW_BAND_HZ[0]) & (freqs < NARROW_BAND_HZ[1])


def narrowband_features(buffer: AudioBuffer, config: BweFeatureConfig) -> np.ndarray:
    """(T, nb_dim) matrix: mel-cepstra plus voicing per analysis frame."""
    require_rate(buffer, 8000)
    windowed = frame_signal(buffer, config.frame_ms, config.overlap, "hamming")
    raw = frame_signal(buffer, config.frame_ms, config.overlap, "rect")
    cepstra = melcepst_frames(windowed.frames, 8000, config.nb_cepstra)
    voicing = voicing_frames(raw.frames, 8000)
    return np.column_stack([cepstra, voicing])


def highband_features(buffer: AudioBuffer, config: BweFeatureConfig) -> np.ndarray:
    """(T, hb_dim) matrix: high-band envelope cepstra plus energy ratio."""
    require_rate(buffer, 16000)
    windowed = frame_signal(buffer, config.frame_ms, config.overlap, "hamming")
    nfft = 1 << (windowed.frame_len - 1).bit_length()
    spectra = np.abs(np.fft.rfft(windowed.frames, nfft, axis=1))
    band = spectra[:, _band_bins(nfft)]
    log_band = np.log(np.maximum(band, np.finfo(np.float64).tiny))
    ceps = scipy.fft.dct(log_band, type=2, axis=1, norm="ortho")[:, 1 : config.hb_cepstra + 1]
    ratio = band_energy_ratio_frames(windowed.frames, 16000, fft_len=nfft)
    return np.column_stack([ceps, ratio])


def joint_feature_matrix(wideband: AudioBuffer, config: BweFeatureConfig) -> np.ndarray:
    """Paired narrowband/high-band vectors for one wideband utterance."""
    require_rate(wideband, 16000)
    narrow = downsample_2x(potsband_filter(wideband))
    nb = narrowband_features(narrow, config)
    hb = highband_features(wideband, config)
    t = min(len(nb), len(hb))
    return np.column_stack([nb[:t], hb[:t]])


def bwe_train(corpus, config: BweFeatureConfig = None, n_components: int = 32,
              seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> BweModel:
    """Fit the joint narrow/high-band model on wideband (16 kHz) buffers."""
    if config is None:
        config = BweFeatureConfig()
    buffers = list(corpus)
    if not buffers:
        raise ValueError("empty training corpus")
    total_s = sum(b.duration_s for b in buffers)
    if total_s < 60.0:
        raise ValueError(f"training corpus too short: {total_s:.1f} s < 60 s")
    joint = np.vstack([joint_feature_matrix(b, config) for b in buffers])
    voicing = joint[:, config.nb_dim - 1]
    ratio = joint[:, -1]
    if np.all(voicing < 0.01) and np.all(ratio <= ENERGY_RATIO_FLOOR_DB + 0.1):
        raise ValueError("training corpus is silent")
    mixture = em_fit(joint, n_components, max_iter=max_iter, tol=tol, seed=seed)
    return BweModel(mixture, config)


class _Extender:
    """Per-model cached conditioners for batch extension."""

    def __init__(self, model: BweModel):
        cfg = model.config
        nb = np.arange(cfg.nb_dim)
        env = np.arange(cfg.nb_dim, cfg.nb_dim + cfg.hb_cepstra)
        energy = np.array([cfg.joint_dim - 1])
        self.config = cfg
        # the energy-ratio posterior marginalizes the envelope block out
        self.energy_given_nb = GmmConditioner(
            marginal(model.joint, np.concatenate([nb, energy])),
            BlockSplit(nb, [len(nb)]))
        self.envelope_given_rest = GmmConditioner(
            model.joint, BlockSplit(np.concatenate([nb, energy]), env))

    def estimates(self, nb_features: np.ndarray):
        """(energy ratio, envelope cepstra) per frame, per the Fig-1 flow."""
        q = self.config.under_penalty / (self.config.over_penalty + self.config.under_penalty)
        ratio = self.energy_given_nb.quantile(nb_features, q)
        conditioned = np.column_stack([nb_features, ratio])
        envelope = self.envelope_given_rest.mmse(conditioned)
        return ratio, envelope


def _own_log_envelope(band_power: np.ndarray) -> np.ndarray:
    """Smooth per-frame log envelope of the band spectrum via order-4 LPC."""
    t, n_bins = band_power.shape
    autocorr = scipy.fft.dct(band_power, type=1, axis=1)[:, : _EXC_LPC_ORDER + 1]
    coeffs = np.zeros((t, _EXC_LPC_ORDER))
    gain = np.zeros(t)
    live = autocorr[:, 0] > 0.0
    if np.any(live):
        coeffs[live], gain[live] = _levinson(autocorr[live], _EXC_LPC_ORDER)
    theta = np.pi * np.arange(n_bins) / (n_bins - 1)
    basis = np.exp(-1j * np.outer(np.arange(1, _EXC_LPC_ORDER + 1), theta))
    denom = np.abs(1.0 - coeffs @ basis)
    env = np.sqrt(np.maximum(gain, _EPS))[:, None] / np.maximum(denom, 1e-12)
    return np.log(np.maximum(env, _EPS))


def bwe_extend(narrowband: AudioBuffer, model: BweModel) -> AudioBuffer:
    """Reconstruct a 16 kHz wideband signal from an 8 kHz narrowband one."""
    require_rate(narrowband, 8000)
    cfg = model.config
    extender = _Extender(model)

    nb_features = narrowband_features(narrowband, cfg)
    ratio_db, env_ceps = extender.estimates(nb_features)

    # Low-pass the upsampled branch at the 3.4 kHz crossover so its
    # transition-band remnants do not compete with the synthesized high band.
    up = upsample_2x(narrowband)
    base = _signal.sosfiltfilt(_crossover_lowpass(), up.samples)
    folded = zero_insert_2x(narrowband)
    n_out = len(up.samples)

    w_syn = _sqrt_hann(_SYN_LEN)
    w_meas = _sqrt_hann(_MEAS_LEN)
    n_cells = (n_out - _SYN_LEN) // _SYN_HOP + 1
    n_meas = (n_out - _MEAS_LEN) // _MEAS_HOP + 1
    high = np.zeros(n_out)
    if n_cells > 0 and n_meas > 0:
        cell_idx = np.arange(_SYN_LEN)[None, :] + _SYN_HOP * np.arange(n_cells)[:, None]
        meas_idx = np.arange(_MEAS_LEN)[None, :] + _MEAS_HOP * np.arange(n_meas)[:, None]
        band = _band_bins(_SYN_NFFT)
        narrow = _narrow_bins(_SYN_NFFT)

        # cells inherit the estimates of the analysis frame they start in;
        # trailing cells reuse the last analysis frame
        cell_param = np.minimum(np.arange(n_cells) * _SYN_HOP // _MEAS_HOP,
                                len(nb_features) - 1)
        meas_param = np.minimum(np.arange(n_meas), len(nb_features) - 1)

        exc = np.fft.rfft(folded.samples[cell_idx] * w_syn, _SYN_NFFT, axis=1)
        exc_band = exc[:, band]
        flat = exc_band * np.exp(-_own_log_envelope(np.abs(exc_band) ** 2))
        flat_energy = np.sum(np.abs(flat) ** 2, axis=1)
        flat = flat / np.sqrt(np.maximum(flat_energy, _EPS))[:, None]

        n_band = int(band.sum())
        padded = np.zeros((n_cells, n_band))
        padded[:, 1 : cfg.hb_cepstra + 1] = env_ceps[cell_param]
        shaped = flat * np.exp(scipy.fft.idct(padded, type=2, axis=1, norm="ortho"))

        spectrum = np.zeros((n_cells, _SYN_NFFT // 2 + 1), dtype=complex)
        spectrum[:, band] = shaped
        pieces = np.fft.irfft(spectrum, _SYN_NFFT, axis=1)[:, :_SYN_LEN] * w_syn

        # initial per-cell gains from the cell's own narrow-band energy and
        # ratio target (one-sided band energy E maps to sum(x^2) = 2 E / nfft)
        ref = np.fft.rfft(base[cell_idx] * w_syn, _SYN_NFFT, axis=1)
        cell_narrow = np.sum(np.abs(ref[:, narrow]) ** 2, axis=1)
        cell_target = (2.0 / _SYN_NFFT) * cell_narrow * 10.0 ** (ratio_db[cell_param] / 10.0)
        piece_energy = np.sum(pieces**2, axis=1)
        gain = np.sqrt(cell_target / np.maximum(piece_energy, _EPS))
        gain[piece_energy <= _EPS] = 0.0
        scaled = gain[:, None] * pieces
        for c in range(n_cells):
            high[c * _SYN_HOP : c * _SYN_HOP + _SYN_LEN] += scaled[c]

        # The energy-ratio contract is enforced on 20 ms frames of the final
        # output: iterate a per-sample gain envelope (built from half-frame
        # cells, which gives it enough resolution for sharp target changes)
        # until each measured frame ratio matches its estimate.
        w_sq = w_syn**2
        cover = np.zeros(n_out)
        for c in range(n_cells):
            cover[c * _SYN_HOP : c * _SYN_HOP + _SYN_LEN] += w_sq
        cover = np.maximum(cover, 1e-12)

        mref = np.fft.rfft(base[meas_idx] * w_meas, _SYN_NFFT, axis=1)
        meas_narrow = np.sum(np.abs(mref[:, narrow]) ** 2, axis=1)
        ratio_target = 10.0 ** (ratio_db[meas_param] / 10.0)
        active = meas_narrow > _EPS
        watched = active & (ratio_db[meas_param] >= -50.0)

        # each cell center falls inside up to two measurement frames; weight
        # their corrections by the measurement window energy at that point
        centers = np.arange(n_cells) * _SYN_HOP + _SYN_LEN // 2
        m_hi = np.clip(centers // _MEAS_HOP, 0, n_meas - 1)
        m_lo = np.clip(m_hi - 1, 0, n_meas - 1)
        w_meas_sq = w_meas**2
        off_hi = np.clip(centers - m_hi * _MEAS_HOP, 0, _MEAS_LEN - 1)
        off_lo = np.clip(centers - m_lo * _MEAS_HOP, 0, _MEAS_LEN - 1)
        wt_hi = w_meas_sq[off_hi]
        wt_lo = np.where(m_lo == m_hi, 0.0, w_meas_sq[off_lo])
        norm = np.maximum(wt_hi + wt_lo, 1e-12)
        wt_hi, wt_lo = wt_hi / norm, wt_lo / norm

        cumulative = np.ones(n_meas)
        best_off, patience = np.inf, 0
        for _ in range(400):
            out_spec = np.fft.rfft((base + high)[meas_idx] * w_meas, _SYN_NFFT, axis=1)
            e_h = np.sum(np.abs(out_spec[:, band]) ** 2, axis=1)
            e_n = np.sum(np.abs(out_spec[:, narrow]) ** 2, axis=1)
            achieved = e_h / np.maximum(e_n, _EPS)
            if watched.any():
                off = float(np.abs(10.0 * np.log10(np.maximum(
                    achieved[watched], _EPS) / ratio_target[watched])).max())
                if off < 0.1:
                    break
                patience = patience + 1 if off > best_off - 2e-3 else 0
                best_off = min(best_off, off)
                if patience >= 30:
                    break
            adjust = np.ones(n_meas)
            fixable = active & (achieved > _EPS)
            adjust[fixable] = np.sqrt(ratio_target[fixable] / achieved[fixable])
            adjust = np.clip(adjust, 0.5, 2.0)
            capped = np.clip(cumulative * adjust, 1e-6, 1e4)
            adjust = capped / cumulative
            cumulative = capped
            adjust[~active] = 0.0
            cell_adjust = adjust[m_lo] ** wt_lo * adjust[m_hi] ** wt_hi
            envelope = np.zeros(n_out)
            for c in range(n_cells):
                envelope[c * _SYN_HOP : c * _SYN_HOP + _SYN_LEN] += cell_adjust[c] * w_sq
            high *= envelope / cover

    return AudioBuffer(base + high, 16000)


def make_variants(buffer: AudioBuffer, variant: str, model: BweModel = None) -> AudioBuffer:
    """Produce one of the database conditions from a source buffer.

    orig/nb/bwe expect 16 kHz sources; isdn/isdn_bwe expect the 8 kHz path.
    bwe and isdn_bwe need a trained model.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "orig":
        return buffer
    if variant == "nb":
        require_rate(buffer, 16000)
        return potsband_filter(buffer)
    if variant == "bwe":
        require_rate(buffer, 16000)
        if model is None:
            raise ValueError("variant 'bwe' requires a trained model")
        return bwe_extend(downsample_2x(potsband_filter(buffer)), model)
    if variant == "isdn":
        require_rate(buffer, 8000)
        return alaw_roundtrip(buffer)
    require_rate(buffer, 8000)
    if model is None:
        raise ValueError("variant 'isdn_bwe' requires a trained model")
    return bwe_extend(potsband_filter(alaw_roundtrip(buffer)), model)


# ---------------------------------------------------------------------------
# Model files: magic "BWEM", version, JSON feature-config block, then the
# embedded GMM1 payload.

def bwe_model_to_bytes(model: BweModel) -> bytes:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    mixture = gmm_to_bytes(model.joint)
    return (BWE_MAGIC
            + struct.pack("<I", model.format_version)
            + struct.pack("<I", len(cfg)) + cfg
            + struct.pack("<I", len(mixture)) + mixture)


def bwe_model_from_bytes(blob: bytes) -> BweModel:
    if blob[:4] != BWE_MAGIC:
        raise ValueError("not a BWEM model blob")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != BWE_FORMAT_VERSION:
        raise ValueError(f"unsupported BWEM format version {version}")
    cfg_len = struct.unpack("<I", blob[8:12])[0]
    config = BweFeatureConfig(**json.loads(blob[12 : 12 + cfg_len].decode("utf-8")))
    off = 12 + cfg_len
    gmm_len = struct.unpack("<I", blob[off : off + 4])[0]
    mixture = gmm_from_bytes(blob[off + 4 : off + 4 + gmm_len])
    return BweModel(mixture, config, format_version=version)


def save_bwe_model(model: BweModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bwe_model_to_bytes(model))


def load_bwe_model(path) -> BweModel:
    with open(path, "rb") as fh:
        return bwe_model_from_bytes(fh.read())
