"""Unsupervised speaker recognition with a multilayer bootstrap network.

The pipeline has three stages: a universal background model turns each
utterance into a supervector, the multilayer bootstrap network reduces the
supervectors to a handful of dimensions, and a clustering step assigns
speaker labels that are scored by normalized mutual information.
"""

from mbnspeaker.cluster import agglomerative, kmeans, nmi
from mbnspeaker.dataio import (
    FrameMatrix,
    SyntheticCorpusSpec,
    generate_synthetic_corpus,
    load_dataset,
    load_matrix,
    save_matrix,
)
from mbnspeaker.mbn import MbnConfig, compute_k_schedule, train_mbn, transform
from mbnspeaker.ubm import UbmConfig, extract_supervector, train_ubm

__version__ = "0.1.0"

__all__ = [
    "FrameMatrix",
    "MbnConfig",
    "SyntheticCorpusSpec",
    "UbmConfig",
    "agglomerative",
    "compute_k_schedule",
    "extract_supervector",
    "generate_synthetic_corpus",
    "kmeans",
    "load_dataset",
    "load_matrix",
    "nmi",
    "save_matrix",
    "train_mbn",
    "train_ubm",
    "transform",
]
