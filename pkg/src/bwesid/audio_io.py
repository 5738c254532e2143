"""WAV file handling and the G.711 A-law codec used to simulate the ISDN channel."""

import wave
from dataclasses import dataclass

import numpy as np

SUPPORTED_RATES = (8000, 16000)

# Float samples map to 16-bit PCM as round(x * 32768), clipped to the int16 range.
PCM_SCALE = 32768.0


class AudioIOError(Exception):
    """Unreadable, malformed or unsupported audio data."""


@dataclass
class AudioBuffer:
    """Mono audio: float64 samples in [-1, 1] plus an explicit sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be a 1-D sequence")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must all be finite")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def require_rate(buffer: AudioBuffer, *rates: int) -> None:
    """Reject buffers whose sample rate is not one of the given rates."""
    if buffer.sample_rate_hz not in rates:
        raise ValueError(
            f"unsupported sample rate {buffer.sample_rate_hz} Hz"
            f" (expected {' or '.join(str(r) for r in rates)})"
        )


def read_wav(path, channel_select: str = "left") -> AudioBuffer:
    """Read a PCM-16 WAV file into a mono AudioBuffer.

    Stereo files are reduced per channel_select: "left", "right" or "mix"
    (arithmetic mean of the two channels).
    """
    if channel_select not in ("left", "right", "mix"):
        raise ValueError(f"unknown channel_select {channel_select!r}")
    try:
        reader = wave.open(str(path), "rb")
    except wave.Error as exc:
        raise AudioIOError(f"{path}: malformed or non-PCM WAV ({exc})") from exc
    except EOFError as exc:
        raise AudioIOError(f"{path}: truncated WAV header") from exc
    with reader:
        if reader.getsampwidth() != 2:
            raise AudioIOError(
                f"{path}: unsupported encoding"
                f" ({8 * reader.getsampwidth()}-bit; only 16-bit PCM is supported)"
            )
        n_channels = reader.getnchannels()
        if n_channels not in (1, 2):
            raise AudioIOError(f"{path}: {n_channels} channels (expected 1 or 2)")
        n_frames = reader.getnframes()
        if n_frames == 0:
            raise AudioIOError(f"{path}: empty payload")
        rate = reader.getframerate()
        raw = reader.readframes(n_frames)
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, n_channels)
    if n_channels == 1:
        pcm = data[:, 0].astype(np.float64)
    elif channel_select == "left":
        pcm = data[:, 0].astype(np.float64)
    elif channel_select == "right":
        pcm = data[:, 1].astype(np.float64)
    else:
        pcm = data.astype(np.float64).mean(axis=1)
    return AudioBuffer(pcm / PCM_SCALE, rate)


def write_wav(buffer: AudioBuffer, path) -> int:
    """Write a mono PCM-16 WAV file.

    Samples outside [-1, 1] are clipped; the number of clipped samples is
    returned so callers can report it.
    """
    x = buffer.samples
    n_clipped = int(np.count_nonzero((x < -1.0) | (x > 1.0)))
    pcm = np.rint(np.clip(x, -1.0, 1.0) * PCM_SCALE)
    pcm = np.clip(pcm, -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as writer:
            writer.setnchannels(1)
            writer.setsampwidth(2)
            writer.setframerate(buffer.sample_rate_hz)
            writer.writeframes(pcm.tobytes())
    except OSError as exc:
        raise AudioIOError(f"{path}: {exc}") from exc
    return n_clipped


def wav_duration_s(path) -> float:
    """Duration of a WAV file in seconds, from the header only."""
    try:
        with wave.open(str(path), "rb") as reader:
            return reader.getnframes() / reader.getframerate()
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioIOError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# G.711 A-law. 16-bit linear samples are reduced to 13 bits (3-bit right
# shift), companded over 8 segments of 16 steps each, and the even bits of
# the codeword are inverted (XOR 0x55). The sign bit is 0x80 for x >= 0, so
# encode(-x) == encode(x) ^ 0x80 for every nonzero x.

_SEG_LO13 = np.array([32, 64, 128, 256, 512, 1024, 2048], dtype=np.int64)


def alaw_encode(pcm):
    """Encode 16-bit linear samples (scalar or array) to A-law octets."""
    x = np.asarray(pcm, dtype=np.int64)
    sign = np.where(x >= 0, 0x80, 0x00)
    mag13 = np.minimum(np.abs(x), 32767) >> 3
    seg = np.searchsorted(_SEG_LO13, mag13, side="right")
    quant = (mag13 >> np.maximum(seg, 1)) & 0x0F
    code = ((seg << 4) | quant | sign) ^ 0x55
    code = code.astype(np.uint8)
    return code if code.ndim else int(code)


def alaw_decode(code):
    """Decode A-law octets (scalar or array) to 16-bit linear samples."""
    c = np.asarray(code, dtype=np.int64) ^ 0x55
    seg = (c >> 4) & 0x07
    quant = c & 0x0F
    t = (quant << 4) + 8
    t = np.where(seg >= 1, t + 0x100, t)
    t = np.where(seg >= 2, t << np.maximum(seg - 1, 0), t)
    out = np.where(c & 0x80, t, -t).astype(np.int16)
    return out if out.ndim else int(out)


def alaw_roundtrip(buffer: AudioBuffer) -> AudioBuffer:
    """Pass a buffer through the A-law codec (the simulated ISDN link)."""
    pcm = np.clip(np.rint(buffer.samples * PCM_SCALE), -32768, 32767).astype(np.int64)
    decoded = alaw_decode(alaw_encode(pcm)).astype(np.float64)
    return AudioBuffer(decoded / PCM_SCALE, buffer.sample_rate_hz)


def read_alaw(path) -> AudioBuffer:
    """Read a headerless A-law octet stream (.al); 8000 Hz is implied."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise AudioIOError(f"{path}: empty payload")
    pcm = alaw_decode(np.frombuffer(raw, dtype=np.uint8)).astype(np.float64)
    return AudioBuffer(pcm / PCM_SCALE, 8000)


def write_alaw(buffer: AudioBuffer, path) -> None:
    """Write a headerless A-law octet stream (.al) at the implied 8000 Hz."""
    require_rate(buffer, 8000)
    pcm = np.clip(np.rint(buffer.samples * PCM_SCALE), -32768, 32767).astype(np.int64)
    with open(path, "wb") as fh:
        fh.write(alaw_encode(pcm).tobytes())
