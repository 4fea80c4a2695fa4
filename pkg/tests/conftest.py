import numpy as np
import pytest

from mbnspeaker.dataio import SyntheticCorpusSpec, generate_synthetic_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """Four well separated speakers, 12 short utterances each."""
    spec = SyntheticCorpusSpec(
        num_speakers=4, utterances_per_speaker=12, frames_per_utterance_range=(60, 90),
        feature_dim=6, mixtures_per_speaker=2, speaker_separation=5.0, seed=7,
    )
    utterances, labels, _ = generate_synthetic_corpus(spec)
    return spec, utterances, labels
