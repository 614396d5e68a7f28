"""
Shared fixtures: a tiny synthetic corpus and a tiny encoder shape.
"""
import logging

import numpy as np
import pytest

from models.encoder import EncoderConfig
from pipeline.build_corpus import build_corpus
from pipeline.config import CorpusSection
from project_tools.numgrad import Graph, Rng, forward_eval

logging.getLogger("matplotlib").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def tiny_corpus_cfg() -> CorpusSection:
    return CorpusSection(
        train=6,
        val=3,
        test=8,
        words_min=1,
        words_max=2,
        speakers_per_split={"train": 2, "val": 1, "test": 1},
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, tiny_corpus_cfg):
    """Corpus directory with wav_clean/, wav_noisy/ and manifests/."""
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(tiny_corpus_cfg, root, seed=7)
    return root


@pytest.fixture
def tiny_encoder_cfg() -> EncoderConfig:
    return EncoderConfig(d_model=16, n_blocks=2, n_heads=2, conv_kernel=3, max_rel_distance=8)


@pytest.fixture
def rng() -> Rng:
    return Rng(1234)


def attach_scalar_loss(graph: Graph, out: int, feeds: dict, seed: int = 0, shift: float = 3.0) -> int:
    """Append loss = mean(out * R + shift) with a fixed random R; smooth while out * R > -shift."""
    forward_eval(graph, feeds)
    shape = graph.value(out).shape
    weights = Rng(seed).uniform(int(np.prod(shape)), -1.0, 1.0).reshape(shape)
    weighted = graph.mul(out, graph.constant(weights))
    shifted = graph.add(weighted, graph.constant(shift))
    loss = graph.op("mean_abs", shifted, name="loss")
    forward_eval(graph, feeds)
    return loss
