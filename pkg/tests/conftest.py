import numpy as np
import pytest
import torch

from sopmt.config import load_config
from sopmt.mixsim import (
    Dataset,
    EmissionModel,
    generate_dataset,
)
from sopmt.vocab import Vocabulary


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary(28)


def make_dataset(num_talkers=2, size=24, split="train", condition="noisy",
                 seed=0, feature_dim=16):
    vocab = Vocabulary(28)
    em = EmissionModel(feature_dim=feature_dim, num_content=28,
                       duration_range=(4, 8), noise_sigma=0.05, seed=seed)
    return generate_dataset(vocab, em, num_talkers, size, (4, 12), 4, 0.5,
                            condition, split, seed, "testhash")


@pytest.fixture(scope="session")
def tiny_train_ds():
    return make_dataset(size=24)


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(None, {
        "seed": 0,
        "model.encoder_dim": 16,
        "model.conv_dim": 16,
        "model.decoder_dim": 16,
        "model.decoder_layers": 2,
        "model.decoder_heads": 2,
        "model.decoder_ff_dim": 32,
        "model.lora_rank": 4,
        "train.batch_size": 8,
        "train.steps": {"stage1": 6, "stage2": 6, "stage3": 6, "single": 6},
    })
