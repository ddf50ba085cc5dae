"""Shared fixtures: a small encoder, toy model, and schedule."""

from __future__ import annotations

import numpy as np
import pytest

from cdglab.diffusion import GmmConditionalModel, SigmaSchedule
from cdglab.encoder import EncoderParams, ToyTextEncoder, tokenize


@pytest.fixture(scope="session")
def params() -> EncoderParams:
    return EncoderParams()


@pytest.fixture(scope="session")
def encoder(params) -> ToyTextEncoder:
    return ToyTextEncoder(params)


@pytest.fixture(scope="session")
def model() -> GmmConditionalModel:
    return GmmConditionalModel.random(4, 8, 8, seed=0)


@pytest.fixture(scope="session")
def schedule() -> SigmaSchedule:
    return SigmaSchedule.log_spaced(28, 10.0, 0.01)


@pytest.fixture(scope="session")
def tokens(params):
    return tokenize("a man is cooking", params)


def random_prompt(rng: np.random.Generator, max_words: int) -> str:
    n_words = int(rng.integers(0, max_words + 1))
    words = [
        "".join(chr(97 + c) for c in rng.integers(0, 26, size=rng.integers(1, 7)))
        for _ in range(n_words)
    ]
    return " ".join(words)
