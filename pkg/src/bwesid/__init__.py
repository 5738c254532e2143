"""Bandwidth extension of telephone-band speech plus covariance-matrix
speaker identification, with an experiment harness for measuring how the
extension affects closed-set identification rates."""

__version__ = "0.1.0"

from .audio_io import AudioBuffer, alaw_decode, alaw_encode, read_wav, write_wav
from .bwe import BweFeatureConfig, BweModel, bwe_extend, bwe_train, make_variants
from .dsp import (
    downsample_2x,
    frame_signal,
    potsband_filter,
    preemphasize,
    upsample_2x,
    zero_insert_2x,
)
from .features import (
    FeatureMatrix,
    FrameConfig,
    LPCC,
    MELCEPST,
    autocorr_lpc,
    band_energy_ratio,
    extract_features,
    lpc_to_lpcc,
    melcepst,
    voicing_degree,
)
from .gmm import (
    BlockSplit,
    Gmm,
    conditional_mmse,
    conditional_quantile_estimate,
    em_fit,
    gmm_logpdf,
)
from .speaker_id import SpeakerModel, enroll, identify, sphericity
