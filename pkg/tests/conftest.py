import numpy as np
import pytest

from laviter.app_config import RunConfig
from laviter.data import CorpusSpec, gen_synthetic_corpus, load_dataset

TINY = dict(
    d_model=8,
    heads=2,
    ffn_dim=16,
    image_size=16,
    conv_base_channels=2,
    caption_encoder_layers=1,
    caption_decoder_layers=1,
    gan_stages=2,
    gan_first_resolution=8,
    gan_noise_dim=4,
    gan_channels=4,
    gan_disc_channels=2,
    gan_cond_dim=4,
    phase1_epochs=1,
    phase1_batch=4,
    caption_epochs=1,
    caption_batch=4,
    gan_epochs=1,
    gan_batch=4,
    joint_epochs=1,
    joint_batch=4,
    max_steps=2,
    log_every=1,
    eval_pool=10,
    corpus_train=16,
    corpus_test=12,
    captions_per_image=2,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config(tmp_path):
    return RunConfig(**TINY, data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "runs"))


@pytest.fixture
def tiny_dataset(tiny_config):
    spec = CorpusSpec(train=16, test=12, captions_per_image=2, image_size=16, seed=3)
    gen_synthetic_corpus(spec, tiny_config.data_dir)
    return load_dataset(tiny_config.data_dir, tiny_config.image_encoder_config().spec, tiny_config.max_len)
