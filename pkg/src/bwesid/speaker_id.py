"""Covariance-matrix speaker models compared by the arithmetic-harmonic
sphericity measure.

Each speaker is a single P x P covariance matrix of their training feature
vectors; a test utterance is scored against every enrolled matrix and the
lowest measure wins. The measure is normalized so mu(C, C) = 0 and is
invariant to any common invertible linear transform of the feature space.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .features import FeatureMatrix

SPEAKER_MAGIC = b"SPKM"
SPEAKER_FORMAT_VERSION = 1

_COND_LIMIT = 1e10
_RIDGE = 1e-6


@dataclass
class SpeakerModel:
    speaker_id: str
    covariance: np.ndarray
    frame_count: int = 0

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        p = self.covariance.shape[0]
        if self.covariance.shape != (p, p):
            raise ValueError("covariance must be square")
        if np.max(np.abs(self.covariance - self.covariance.T)) > 1e-12:
            raise ValueError("covariance must be symmetric")

    @property
    def dimension(self) -> int:
        return self.covariance.shape[0]


def _estimate_covariance(vectors: np.ndarray) -> np.ndarray:
    """Sample covariance about the sample mean, regularized if ill-conditioned."""
    t, p = vectors.shape
    if t <= p:
        raise ValueError(f"need more frames than dimensions (T={t}, P={p})")
    c = np.cov(vectors, rowvar=False).reshape(p, p)
    c = 0.5 * (c + c.T)
    trace = float(np.trace(c))
    if trace <= 0.0:
        # all frames identical: fall back to a small diagonal model
        return _RIDGE * np.eye(p)
    if np.linalg.cond(c) > _COND_LIMIT:
        c = c + _RIDGE * (trace / p) * np.eye(p)
    return c


def enroll(features: FeatureMatrix, speaker_id: str) -> SpeakerModel:
    """Build a speaker model from training features (requires T > P)."""
    c = _estimate_covariance(features.vectors)
    return SpeakerModel(speaker_id, c, frame_count=features.frame_count)


def sphericity(c_test: np.ndarray, c_model: np.ndarray) -> float:
    """log(tr(A B^-1) * tr(B A^-1)) - 2 log P for P x P SPD matrices A, B.

    Zero iff the matrices are proportional; symmetric in its arguments.
    """
    a = np.asarray(c_test, dtype=np.float64)
    b = np.asarray(c_model, dtype=np.float64)
    p = a.shape[0]
    if a.shape != b.shape or a.shape != (p, p):
        raise ValueError("matrices must be square and of equal size")
    try:
        chol_a = linalg.cho_factor(a, lower=True)
        chol_b = linalg.cho_factor(b, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("sphericity requires positive-definite matrices") from exc
    tr_ab = float(np.trace(linalg.cho_solve(chol_b, a)))
    tr_ba = float(np.trace(linalg.cho_solve(chol_a, b)))
    return float(np.log(tr_ab * tr_ba) - 2.0 * np.log(p))


def identify(test: FeatureMatrix, models: list) -> list:
    """Rank enrolled speakers for a test utterance, best (lowest mu) first.

    Returns (speaker_id, mu) pairs sorted ascending by measure, ties broken
    by speaker_id.
    """
    if not models:
        raise ValueError("no enrolled speaker models")
    p = test.dimension
    for model in models:
        if model.dimension != p:
            raise ValueError(
                f"model {model.speaker_id!r} has dimension {model.dimension}, test has {p}"
            )
    c_test = _estimate_covariance(test.vectors)
    scored = [(m.speaker_id, sphericity(c_test, m.covariance)) for m in models]
    return sorted(scored, key=lambda pair: (pair[1], pair[0]))


# ---------------------------------------------------------------------------
# Model files: magic "SPKM", version, speaker_id, P, then the upper triangle
# of C row-major as little-endian float64.

def save_speaker_model(model: SpeakerModel, path) -> None:
    ident = model.speaker_id.encode("utf-8")
    p = model.dimension
    iu = np.triu_indices(p)
    blob = (SPEAKER_MAGIC
            + struct.pack("<I", SPEAKER_FORMAT_VERSION)
            + struct.pack("<I", len(ident)) + ident
            + struct.pack("<I", p)
            + model.covariance[iu].astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(blob)


def load_speaker_model(path) -> SpeakerModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SPEAKER_MAGIC:
        raise ValueError(f"{path}: not a speaker model file")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != SPEAKER_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    id_len = struct.unpack("<I", blob[8:12])[0]
    ident = blob[12 : 12 + id_len].decode("utf-8")
    off = 12 + id_len
    p = struct.unpack("<I", blob[off : off + 4])[0]
    values = np.frombuffer(blob[off + 4 :], dtype="<f8")
    if len(values) != p * (p + 1) // 2:
        raise ValueError(f"{path}: truncated covariance payload")
    c = np.zeros((p, p))
    iu = np.triu_indices(p)
    c[iu] = values
    c = c + np.triu(c, 1).T
    return SpeakerModel(ident, c)
