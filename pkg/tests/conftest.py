import numpy as np
import pytest

from uvlp.backbone import PatchConfig
from uvlp.corpus import generate_corpus
from uvlp.fusion import FusionConfig
from uvlp.model import ModelConfig, VLModel
from uvlp.text import build_vocabulary
from uvlp.tig import TIGConfig


def make_tiny_config(vocab_size: int, image_size=(1, 16, 16)) -> ModelConfig:
    """Small but fully wired model configuration shared across the suite."""
    c, h, w = image_size
    patch = PatchConfig(patch_h=4, patch_w=4, d_v=16, num_layers=1,
                        num_heads=2, freeze=True)
    fusion = FusionConfig(l_q=2, d_q=16, num_blocks=2, num_heads=2,
                          cross_attn_every=1, l_t=8, vocab_size=vocab_size,
                          d_v=16)
    tig = TIGConfig(d_code=8, k_top=8, k_bot=8, h_top=2, w_top=2,
                    h_bot=h // 4, w_bot=w // 4, adapter_hidden=8,
                    decoder_hidden=8)
    return ModelConfig(image_size=image_size, d_proj=8, patch=patch,
                       fusion=fusion, tig=tig)


@pytest.fixture(scope="session")
def tiny_pairs():
    return generate_corpus(24, 3, (1, 16, 16), seed=5)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_pairs):
    return build_vocabulary([p.words for p in tiny_pairs], max_size=64)


@pytest.fixture(scope="session")
def tiny_config(tiny_vocab):
    return make_tiny_config(len(tiny_vocab))


@pytest.fixture()
def tiny_model(tiny_config):
    return VLModel(tiny_config, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
