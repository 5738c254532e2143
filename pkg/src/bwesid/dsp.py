"""Filters, framing/windowing and 2x rate conversion for the 8/16 kHz chain."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .audio_io import AudioBuffer, require_rate

POTS_LOW_HZ = 300.0
POTS_HIGH_HZ = 3400.0
HIGHBAND_TOP_HZ = 8000.0

# Half-band FIR for the 8<->16 kHz converters: Kaiser design, 65 dB stopband,
# passband flat through 3.4 kHz, stopband from 4 kHz.
_RESAMPLE_TAPS = 191
_RESAMPLE_CUTOFF_HZ = 3700.0
_RESAMPLE_ATTEN_DB = 65.0


def preemphasize(buffer: AudioBuffer, alpha: float = 0.95) -> AudioBuffer:
    """First-order pre-emphasis y[n] = x[n] - alpha*x[n-1] (x[-1] = 0)."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    x = buffer.samples
    y = np.empty_like(x)
    if len(x):
        y[0] = x[0]
        y[1:] = x[1:] - alpha * x[:-1]
    return AudioBuffer(y, buffer.sample_rate_hz)


def hamming_window(length: int) -> np.ndarray:
    """Symmetric Hamming window w[n] = 0.54 - 0.46*cos(2*pi*n/(L-1))."""
    if length == 1:
        return np.ones(1)
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (length - 1))


_WINDOWS = {
    "hamming": hamming_window,
    "hann": lambda length: np.hanning(length),
    "rect": lambda length: np.ones(length),
}


@dataclass
class FrameSequence:
    """Windowed analysis frames: (frame_count x frame_len) matrix plus layout."""

    frames: np.ndarray
    hop: int
    window: str
    sample_rate_hz: int

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_len(self) -> int:
        return self.frames.shape[1]


def frame_length_samples(frame_ms: float, fs: int) -> int:
    length = frame_ms * fs / 1000.0
    rounded = int(round(length))
    if abs(length - rounded) > 1e-6:
        raise ValueError(f"{frame_ms} ms is not an integer sample count at {fs} Hz")
    return rounded


def frame_signal(
    buffer: AudioBuffer,
    frame_ms: float,
    overlap: float = 2.0 / 3.0,
    window: str = "hamming",
) -> FrameSequence:
    """Slice a buffer into overlapping windowed frames.

    hop = frame_len * (1 - overlap) and must come out integer; with the usual
    2/3 overlap that means the frame length must be divisible by 3.
    """
    if window not in _WINDOWS:
        raise ValueError(f"unknown window {window!r}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    fs = buffer.sample_rate_hz
    frame_len = frame_length_samples(frame_ms, fs)
    hop_f = frame_len * (1.0 - overlap)
    hop = int(round(hop_f))
    if hop < 1 or abs(hop_f - hop) > 1e-6:
        raise ValueError(
            f"frame of {frame_len} samples with overlap {overlap} gives a"
            f" non-integer hop ({hop_f})"
        )
    x = buffer.samples
    if len(x) < frame_len:
        raise ValueError(f"buffer ({len(x)} samples) shorter than one frame ({frame_len})")
    n_frames = (len(x) - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _WINDOWS[window](frame_len)[None, :]
    return FrameSequence(frames, hop, window, fs)


# ---------------------------------------------------------------------------
# POTS band-limiter. The contract is the measured mask, not a fixed design:
# -3 dB +/- 0.5 at 300 and 3400 Hz, |gain| <= 0.5 dB in [500, 3000] Hz, and
# >= 30 dB attenuation at <= 100 Hz and (at 16 kHz) >= 4000 Hz. Realized as a
# Butterworth-4 high-pass plus Chebyshev-II-8 low-pass, each applied
# forward-backward (zero phase), with edges placed by bisection so the
# double-pass gain is exactly -3 dB at the band edges.

_LP_STOP_DB_PER_PASS = 21.0


def _double_pass_gain_db(sos: np.ndarray, freq_hz: float, fs: int) -> float:
    _, h = signal.sosfreqz(sos, worN=np.atleast_1d(freq_hz), fs=fs)
    return float(40.0 * np.log10(max(abs(h[0]), 1e-300)))


def _calibrate_edge(design, target_hz: float, lo: float, hi: float, fs: int,
                    gain_rises_with_param: bool) -> np.ndarray:
    """Bisect a design parameter until the double-pass gain at target is -3 dB."""
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        gain = _double_pass_gain_db(design(mid), target_hz, fs)
        if (gain > -3.0) == gain_rises_with_param:
            hi = mid
        else:
            lo = mid
    return design(0.5 * (lo + hi))


@lru_cache(maxsize=None)
def _pots_sections(fs: int):
    # Raising the high-pass cutoff lowers the gain at 300 Hz; raising the
    # low-pass stopband edge raises the gain at 3400 Hz.
    hp = _calibrate_edge(
        lambda fc: signal.butter(4, fc, "highpass", fs=fs, output="sos"),
        POTS_LOW_HZ, 150.0, POTS_LOW_HZ - 1.0, fs, gain_rises_with_param=False,
    )
    lp = _calibrate_edge(
        lambda ws: signal.cheby2(8, _LP_STOP_DB_PER_PASS, ws, "lowpass", fs=fs, output="sos"),
        POTS_HIGH_HZ, POTS_HIGH_HZ + 50.0, min(0.999 * fs / 2.0, 4400.0), fs,
        gain_rises_with_param=True,
    )
    return hp, lp


def potsband_filter(buffer: AudioBuffer) -> AudioBuffer:
    """Band-limit to the [300, 3400] Hz telephone band, zero phase."""
    require_rate(buffer, 8000, 16000)
    hp, lp = _pots_sections(buffer.sample_rate_hz)
    y = signal.sosfiltfilt(hp, buffer.samples)
    y = signal.sosfiltfilt(lp, y)
    return AudioBuffer(y, buffer.sample_rate_hz)


# ---------------------------------------------------------------------------
# 2x rate converters.

@lru_cache(maxsize=None)
def _halfband_fir() -> np.ndarray:
    beta = signal.kaiser_beta(_RESAMPLE_ATTEN_DB)
    return signal.firwin(
        _RESAMPLE_TAPS, _RESAMPLE_CUTOFF_HZ, window=("kaiser", beta), fs=16000.0
    )


def upsample_2x(buffer: AudioBuffer) -> AudioBuffer:
    """8 kHz -> 16 kHz; output length exactly 2N, images above 4 kHz removed."""
    require_rate(buffer, 8000)
    y = signal.resample_poly(buffer.samples, 2, 1, window=_halfband_fir())
    return AudioBuffer(y, 16000)


def downsample_2x(buffer: AudioBuffer) -> AudioBuffer:
    """16 kHz -> 8 kHz; output length exactly floor(N/2), anti-aliased."""
    require_rate(buffer, 16000)
    y = signal.resample_poly(buffer.samples, 1, 2, window=_halfband_fir())
    return AudioBuffer(y[: len(buffer.samples) // 2], 8000)


def zero_insert_2x(buffer: AudioBuffer) -> AudioBuffer:
    """Interleave zeros (no anti-imaging filter): the image is the folded excitation."""
    require_rate(buffer, 8000)
    y = np.zeros(2 * len(buffer.samples))
    y[::2] = buffer.samples
    return AudioBuffer(y, 16000)
