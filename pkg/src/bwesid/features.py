"""Per-frame parameterizations: LPC/LPCC, mel-cepstrum, voicing, band energies.

Both recognizer parameterizations work on pre-emphasized Hamming frames; the
batch entry point is extract_features(). The *_frames() helpers are the
vectorized forms used throughout so a 60 s utterance stays cheap.
"""

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .audio_io import AudioBuffer
from .dsp import frame_signal, preemphasize

LPCC = "LPCC"
MELCEPST = "MELCEPST"

NB_CEPSTRA = 15          # narrowband spectral-envelope coefficients
HB_CEPSTRA = 8           # high-band envelope coefficients
ENERGY_RATIO_FLOOR_DB = -80.0
ENERGY_RATIO_CEIL_DB = 40.0

VOICING_LAG_MIN_S = 0.0025   # 400 Hz
VOICING_LAG_MAX_S = 0.016    # 62.5 Hz

_LOG_FLOOR = np.finfo(np.float64).tiny


@dataclass
class LpcModel:
    """All-pole model in predictor convention A(z) = 1 - sum a_k z^-k."""

    order: int
    coefficients: np.ndarray
    gain: float
    degenerate: bool = False   # all-zero input frame


@dataclass
class FeatureMatrix:
    """T x P matrix of per-frame feature vectors."""

    vectors: np.ndarray
    label: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise ValueError("feature matrix must be T x P with T, P >= 1")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("feature matrix contains non-finite entries")

    @property
    def frame_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


@dataclass
class NbFeature:
    """Narrowband frame descriptor: 15 cepstra plus the degree of voicing."""

    cepstra: np.ndarray
    voicing: float


@dataclass
class HbFeature:
    """High-band frame descriptor: envelope cepstra plus the energy ratio in dB."""

    envelope_cepstra: np.ndarray
    energy_ratio_db: float


@dataclass
class FrameConfig:
    """Analysis settings shared by both parameterizations."""

    frame_ms: float = 30.0
    overlap: float = 2.0 / 3.0
    window: str = "hamming"
    preemphasis: float = 0.95
    fft_len: int = 0         # 0 = next power of two >= frame length

    def resolve_fft_len(self, frame_len: int) -> int:
        if self.fft_len:
            if self.fft_len < frame_len:
                raise ValueError(
                    f"fft_len {self.fft_len} smaller than frame ({frame_len} samples)"
                )
            return self.fft_len
        return 1 << (frame_len - 1).bit_length()


# ---------------------------------------------------------------------------
# Linear prediction.

def _autocorrelation(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased sample autocorrelation r_0..r_max_lag of each row."""
    n = frames.shape[1]
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.abs(np.fft.rfft(frames, nfft, axis=1)) ** 2
    r = np.fft.irfft(spec, nfft, axis=1)[:, : max_lag + 1]
    return r


def _levinson(r: np.ndarray, order: int):
    """Levinson-Durbin over rows of r; returns (a, gain) in predictor convention."""
    n_rows = r.shape[0]
    a = np.zeros((n_rows, order))
    err = r[:, 0].copy()
    # tiny diagonal ridge keeps the recursion PD for near-degenerate frames
    err *= 1.0 + 1e-9
    live = err > 0.0
    for i in range(1, order + 1):
        acc = r[:, i].copy()
        if i > 1:
            acc -= np.einsum("tj,tj->t", a[:, : i - 1], r[:, i - 1:0:-1])
        k = np.where(live, acc / np.where(live, err, 1.0), 0.0)
        prev = a[:, : i - 1][:, ::-1].copy()
        a[:, i - 1] = k
        if i > 1:
            a[:, : i - 1] -= k[:, None] * prev
        err = err * (1.0 - k * k)
        live = live & (err > 0.0)
    return a, np.maximum(err, 0.0)


def autocorr_lpc(frame: np.ndarray, order: int) -> LpcModel:
    """LPC by the autocorrelation method (Levinson-Durbin).

    An all-zero frame yields the zero model with gain 0, flagged degenerate.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if order < 0:
        raise ValueError("order must be nonnegative")
    if len(frame) <= order:
        raise ValueError(f"frame of {len(frame)} samples cannot support order {order}")
    r = _autocorrelation(frame[None, :], order)[0]
    if r[0] <= 0.0:
        return LpcModel(order, np.zeros(order), 0.0, degenerate=True)
    if order == 0:
        return LpcModel(0, np.zeros(0), float(r[0]))
    a, err = _levinson(r[None, :], order)
    return LpcModel(order, a[0], float(err[0]))


def lpc_to_lpcc(model: LpcModel, n_ceps: int) -> np.ndarray:
    """Cepstrum of the gain-normalized all-pole model, by recursion."""
    return lpcc_from_coefficients(model.coefficients[None, :], n_ceps)[0]


def lpcc_from_coefficients(a: np.ndarray, n_ceps: int) -> np.ndarray:
    """Vectorized LPCC recursion over rows of predictor coefficients a.

    c_1 = a_1; for n <= p: c_n = a_n + sum_{k=1}^{n-1} (k/n) c_k a_{n-k};
    for n > p the a_n term drops and k starts at n-p.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n_rows, p = a.shape
    c = np.zeros((n_rows, n_ceps))
    for n in range(1, n_ceps + 1):
        acc = np.zeros(n_rows)
        if n <= p:
            acc += a[:, n - 1]
        k_lo = max(1, n - p)
        if k_lo <= n - 1:
            ks = np.arange(k_lo, n)
            acc += np.einsum("tk,tk,k->t", c[:, ks - 1], a[:, n - ks - 1], ks / n)
        c[:, n - 1] = acc
    return c


def lpcc_frames(frames: np.ndarray, order: int, n_ceps: int) -> np.ndarray:
    """LPCC feature rows for a frame matrix."""
    r = _autocorrelation(frames, order)
    nonzero = r[:, 0] > 0.0
    a = np.zeros((frames.shape[0], order))
    if np.any(nonzero):
        a[nonzero], _ = _levinson(r[nonzero], order)
    return lpcc_from_coefficients(a, n_ceps)


# ---------------------------------------------------------------------------
# Mel cepstrum.

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def default_mel_filter_count(fs: int) -> int:
    return int(np.floor(3.0 * np.log(fs)))


@lru_cache(maxsize=None)
def _mel_filterbank(fs: int, fft_len: int, n_filters: int) -> np.ndarray:
    """Triangular unity-peak filters over the rfft bins, mel-spaced on [0, fs/2].

    Rows are normalized to unit area so a flat spectrum gives equal energies
    in every channel.
    """
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(fs / 2.0), n_filters + 2))
    bin_hz = np.fft.rfftfreq(fft_len, 1.0 / fs)
    bank = np.zeros((n_filters, len(bin_hz)))
    for j in range(n_filters):
        lo, mid, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        rising = (bin_hz - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - mid, 1e-12)
        bank[j] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    area = bank.sum(axis=1)
    area[area == 0.0] = 1.0
    return bank / area[:, None]


def melcepst_frames(frames: np.ndarray, fs: int, n_ceps: int,
                    n_filters: int = 0, fft_len: int = 0) -> np.ndarray:
    """Mel-cepstra (c_1..c_P, c_0 excluded) for a frame matrix."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    frame_len = frames.shape[1]
    if not n_filters:
        n_filters = default_mel_filter_count(fs)
    if not fft_len:
        fft_len = 1 << (frame_len - 1).bit_length()
    if fft_len < frame_len:
        raise ValueError(f"fft_len {fft_len} smaller than frame length {frame_len}")
    if not 1 <= n_ceps < n_filters:
        raise ValueError(f"need 1 <= n_ceps < n_filters, got {n_ceps} vs {n_filters}")
    mag = np.abs(np.fft.rfft(frames, fft_len, axis=1))
    energies = mag @ _mel_filterbank(fs, fft_len, n_filters).T
    log_e = np.log(np.maximum(energies, _LOG_FLOOR))
    ceps = scipy.fft.dct(log_e, type=2, axis=1, norm="ortho")
    return ceps[:, 1 : n_ceps + 1]


def melcepst(frame: np.ndarray, fs: int, n_ceps: int,
             n_filters: int = 0, fft_len: int = 0) -> np.ndarray:
    """Mel-cepstrum of a single frame; see melcepst_frames."""
    return melcepst_frames(np.asarray(frame)[None, :], fs, n_ceps, n_filters, fft_len)[0]


# ---------------------------------------------------------------------------
# Voicing and band energies.

def voicing_frames(frames: np.ndarray, fs: int) -> np.ndarray:
    """Degree of voicing per frame row; see voicing_degree."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    n = frames.shape[1]
    lag_min = int(round(VOICING_LAG_MIN_S * fs))
    lag_max = min(int(round(VOICING_LAG_MAX_S * fs)), n - 1)
    if n < int(round(VOICING_LAG_MAX_S * fs)):
        raise ValueError(f"frame of {n} samples is shorter than {VOICING_LAG_MAX_S * 1e3:.0f} ms")
    r = _autocorrelation(frames, lag_max)
    sq = frames**2
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(sq, axis=1)], axis=1)
    total = csum[:, -1]
    lags = np.arange(lag_min, lag_max + 1)
    # energies of the leading and trailing portions that overlap at each lag
    head = csum[:, n - lags] if len(lags) else np.zeros((frames.shape[0], 0))
    tail = total[:, None] - csum[:, lags]
    denom = np.sqrt(head * tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0.0, r[:, lag_min : lag_max + 1] / denom, 0.0)
    if rho.shape[1] == 0:
        return np.zeros(frames.shape[0])
    return np.clip(rho.max(axis=1), 0.0, 1.0)


def voicing_degree(frame: np.ndarray, fs: int) -> float:
    """Peak normalized autocorrelation over pitch lags 2.5..16 ms, in [0, 1]."""
    return float(voicing_frames(np.asarray(frame)[None, :], fs)[0])


def band_energy_ratio_frames(frames: np.ndarray, fs: int, fft_len: int = 0) -> np.ndarray:
    """High/narrow band log-energy difference per frame row, in dB."""
    if fs != 16000:
        raise ValueError("band energy ratio requires 16 kHz frames")
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if not fft_len:
        fft_len = frames.shape[1]
    power = np.abs(np.fft.rfft(frames, fft_len, axis=1)) ** 2
    freqs = np.fft.rfftfreq(fft_len, 1.0 / fs)
    narrow = power[:, (freqs >= 300.0) & (freqs < 3400.0)].sum(axis=1)
    high = power[:, (freqs >= 3400.0) & (freqs <= 8000.0)].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = 10.0 * np.log10(high / narrow)
    ratio = np.where(high == 0.0, ENERGY_RATIO_FLOOR_DB, ratio)
    ratio = np.where((high > 0.0) & (narrow == 0.0), ENERGY_RATIO_CEIL_DB, ratio)
    return np.clip(ratio, ENERGY_RATIO_FLOOR_DB, ENERGY_RATIO_CEIL_DB)


def band_energy_ratio(frame: np.ndarray, fs: int = 16000) -> float:
    """10*log10(E[3400,8000] / E[300,3400]) of one frame, clamped to [-80, 40]."""
    return float(band_energy_ratio_frames(np.asarray(frame)[None, :], fs)[0])


# ---------------------------------------------------------------------------
# Recognizer front end.

def extract_features(buffer: AudioBuffer, parameterization: str, n_params: int,
                     config: FrameConfig = None) -> FeatureMatrix:
    """Pre-emphasis, framing and per-frame cepstra for a whole utterance."""
    if config is None:
        config = FrameConfig()
    if n_params < 1:
        raise ValueError("n_params must be >= 1")
    emphasized = preemphasize(buffer, config.preemphasis)
    frames = frame_signal(emphasized, config.frame_ms, config.overlap, config.window)
    if parameterization == LPCC:
        vectors = lpcc_frames(frames.frames, n_params, n_params)
    elif parameterization == MELCEPST:
        fft_len = config.resolve_fft_len(frames.frame_len)
        vectors = melcepst_frames(frames.frames, buffer.sample_rate_hz, n_params,
                                  fft_len=fft_len)
    else:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    return FeatureMatrix(vectors, parameterization)


def write_feature_csv(matrix: FeatureMatrix, path) -> None:
    """Dump one row per frame; the header names the parameterization and P."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"parameterization={matrix.label}", f"P={matrix.dimension}"])
        writer.writerow([f"c{i}" for i in range(1, matrix.dimension + 1)])
        for row in matrix.vectors:
            writer.writerow([repr(v) for v in row])
