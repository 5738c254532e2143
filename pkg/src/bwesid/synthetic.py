"""Seeded synthetic multi-speaker corpus for demos and self-contained tests.

Speakers are formant-synthesized: per-speaker pitch, formant targets (one of
them above the telephone band so the high band carries identity too) and
spectral tilt, with per-utterance drift so test material differs from
training material. Nothing here pretends to be natural speech; it only has
to separate speakers the way read speech does.
"""

import sys
from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import AudioBuffer, write_wav

FS = 16000

_SEGMENT_S = 0.18
_CROSSFADE_S = 0.04


def speaker_profile(rng: np.random.Generator) -> dict:
    """Random but plausible vocal parameters for one synthetic speaker."""
    return {
        "f0": float(rng.uniform(85.0, 255.0)),
        "vowels": [
            np.array([
                rng.uniform(280.0, 850.0),
                rng.uniform(950.0, 2250.0),
                rng.uniform(2400.0, 3350.0),
                rng.uniform(3600.0, 4800.0),
                rng.uniform(5100.0, 7300.0),
            ])
            for _ in range(3)
        ],
        "bandwidths": rng.uniform(70.0, 220.0, size=5),
        "tilt": float(rng.uniform(0.88, 0.97)),
        "breathiness": float(rng.uniform(0.02, 0.12)),
        "unvoiced_center": float(rng.uniform(3200.0, 6200.0)),
    }


def _resonator_sos(freq: float, bandwidth: float) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / FS)
    theta = 2.0 * np.pi * freq / FS
    gain = (1.0 - r) * np.sqrt(1.0 - 2.0 * r * np.cos(2.0 * theta) + r * r)
    return np.array([[gain, 0.0, 0.0, 1.0, -2.0 * r * np.cos(theta), r * r]])


def _segment(rng: np.random.Generator, profile: dict, n: int) -> np.ndarray:
    voiced = rng.random() > 0.25
    if voiced:
        f0 = profile["f0"] * rng.uniform(0.94, 1.06)
        period = max(int(round(FS / f0)), 16)
        exc = np.zeros(n)
        pos = int(rng.integers(0, period))
        while pos < n:
            exc[pos] = 1.0
            pos += period + int(rng.integers(-2, 3))
        exc = signal.lfilter([1.0], [1.0, -profile["tilt"]], exc)
        exc += profile["breathiness"] * rng.normal(size=n)
        formants = profile["vowels"][int(rng.integers(len(profile["vowels"])))]
        formants = formants * rng.uniform(0.96, 1.04, size=formants.shape)
        out = exc
        for freq, bw in zip(formants, profile["bandwidths"]):
            out = signal.sosfilt(_resonator_sos(freq, bw), out)
        out = np.diff(out, prepend=0.0)       # lip-radiation brightening
    else:
        center = profile["unvoiced_center"] * rng.uniform(0.9, 1.1)
        out = rng.normal(size=n)
        out = signal.sosfilt(_resonator_sos(center, 900.0), out)
        out *= 0.5
    rms = np.sqrt(np.mean(out**2))
    level = rng.uniform(0.6, 1.0) if voiced else rng.uniform(0.25, 0.5)
    return out * (level / max(rms, 1e-12))


def synth_utterance(rng: np.random.Generator, profile: dict, duration_s: float) -> AudioBuffer:
    """One pseudo-sentence: crossfaded voiced/unvoiced formant segments."""
    n_total = int(round(duration_s * FS))
    seg_len = int(_SEGMENT_S * FS)
    fade = int(_CROSSFADE_S * FS)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    out = np.zeros(n_total + seg_len)
    pos = 0
    while pos < n_total:
        seg = _segment(rng, profile, seg_len)
        seg[:fade] *= ramp
        seg[-fade:] *= ramp[::-1]
        out[pos : pos + seg_len] += seg
        pos += seg_len - fade
    out = out[:n_total]
    out *= 0.35 / max(np.abs(out).max(), 1e-12)
    return AudioBuffer(out, FS)


def sustained_utterance(rng: np.random.Generator, profile: dict,
                        duration_s: float) -> AudioBuffer:
    """Continuously voiced material with slow formant glides and mild level
    modulation; its band-energy trajectory moves smoothly frame to frame."""
    n_total = int(round(duration_s * FS))
    f0 = profile["f0"]
    period = max(int(round(FS / f0)), 16)
    exc = np.zeros(n_total)
    pos = 0
    while pos < n_total:
        exc[pos] = 1.0
        pos += period + int(rng.integers(-1, 2))
    exc = signal.lfilter([1.0], [1.0, -profile["tilt"]], exc)
    exc += profile["breathiness"] * rng.normal(size=n_total)
    targets = list(profile["vowels"]) + [profile["vowels"][0]]
    seg = n_total // (len(targets) - 1) + 1
    out = np.zeros(n_total)
    # crossfade between statically filtered versions for a slow glide
    for i in range(len(targets) - 1):
        a = exc.copy()
        b = exc.copy()
        for freq, bw in zip(targets[i], profile["bandwidths"]):
            a = signal.sosfilt(_resonator_sos(freq, bw), a)
        for freq, bw in zip(targets[i + 1], profile["bandwidths"]):
            b = signal.sosfilt(_resonator_sos(freq, bw), b)
        lo, hi = i * seg, min((i + 1) * seg, n_total)
        mix = np.linspace(0.0, 1.0, hi - lo)
        out[lo:hi] = (1.0 - mix) * a[lo:hi] + mix * b[lo:hi]
    out = np.diff(out, prepend=0.0)
    am = 1.0 + 0.2 * np.sin(2.0 * np.pi * 2.3 * np.arange(n_total) / FS)
    out *= am
    out *= 0.35 / max(np.abs(out).max(), 1e-12)
    return AudioBuffer(out, FS)


def generate_corpus(root, n_speakers: int = 10, train_s: float = 60.0,
                    n_test: int = 5, test_s: float = 2.0, seed: int = 2024) -> Path:
    """Write a wav tree plus manifest under root; returns the manifest path."""
    root = Path(root)
    lines = ["[corpus]", f"source_rate_hz = {FS}", ""]
    for k in range(n_speakers):
        speaker = f"spk{k:02d}"
        rng = np.random.default_rng(seed * 1000 + k)
        profile = speaker_profile(rng)
        spk_dir = root / speaker
        spk_dir.mkdir(parents=True, exist_ok=True)
        train_paths = []
        # split training speech into a few files like separate read passages
        n_chunks = 3
        for i in range(n_chunks):
            rel = f"{speaker}/train_{i:02d}.wav"
            write_wav(synth_utterance(rng, profile, train_s / n_chunks), root / rel)
            train_paths.append(rel)
        test_paths = []
        for i in range(n_test):
            rel = f"{speaker}/test_{i:02d}.wav"
            write_wav(synth_utterance(rng, profile, test_s), root / rel)
            test_paths.append(rel)
        lines.append(f"[speaker:{speaker}]")
        lines.append("train =")
        lines.extend(f"    {p}" for p in train_paths)
        lines.append("test =")
        lines.extend(f"    {p}" for p in test_paths)
        lines.append("")
    manifest = root / "corpus.manifest"
    manifest.write_text("\n".join(lines))
    return manifest


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "synthetic-corpus"
    n = int(sys.argv[2]) if len(sys.argv) > 2 else 10
    path = generate_corpus(target, n_speakers=n)
    print(f"wrote {path}")
