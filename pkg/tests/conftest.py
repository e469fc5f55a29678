import numpy as np
import pytest
import torch

from autoretouch.dataforge import SynthParams, build_dataset, synth_corpus
from autoretouch.verifier import VerifierConfig, VerifierNet

# Small geometry used by unit tests; the acceptance suite uses the full
# desk-scale settings instead.
TINY_CANVAS = 32
TINY_VERIFIER = dict(
    image_size=TINY_CANVAS,
    d_flat=128,
    d_att=8,
    encoder_channels=(4, 8, 8),
)


def tiny_train_kwargs(**overrides):
    kw = dict(TINY_VERIFIER)
    kw.update(overrides)
    return kw


@pytest.fixture(scope="session")
def tiny_corpus():
    params = SynthParams(canvas=TINY_CANVAS)
    triples = synth_corpus(12, params, seed=31)
    return {t.id: t for t in triples}


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus):
    return build_dataset(list(tiny_corpus.values()), seed=31)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    return VerifierNet(VerifierConfig(**TINY_VERIFIER))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
