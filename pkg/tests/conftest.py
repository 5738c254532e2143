import numpy as np
import pytest

from bwesid import bwe, synthetic
from bwesid.audio_io import read_wav


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 synthetic speakers, 16 s training each (64 s total), 3 x 2 s tests."""
    root = tmp_path_factory.mktemp("small-corpus")
    manifest = synthetic.generate_corpus(root, n_speakers=4, train_s=16.0,
                                         n_test=3, test_s=2.0, seed=7)
    return manifest


@pytest.fixture(scope="session")
def small_model(small_corpus):
    """Quick joint model trained on the small corpus training files."""
    root = small_corpus.parent
    paths = sorted(root.rglob("train_*.wav"))
    buffers = [read_wav(p) for p in paths]
    return bwe.bwe_train(buffers, n_components=4, seed=0, max_iter=10)


@pytest.fixture(scope="session")
def speech_model():
    """Joint model trained on speech from several synthetic speakers; good
    enough that its conditional estimates are stable on unseen voices."""
    rng = np.random.default_rng(0)
    corpus = [
        synthetic.synth_utterance(rng, synthetic.speaker_profile(np.random.default_rng(k)), 14.0)
        for k in range(5)
    ]
    return bwe.bwe_train(corpus, n_components=8, seed=1, max_iter=12)


@pytest.fixture(scope="session")
def speech_16k():
    """One 6 s wideband synthetic utterance."""
    rng = np.random.default_rng(42)
    profile = synthetic.speaker_profile(rng)
    return synthetic.synth_utterance(rng, profile, 6.0)
