import os

import pytest

from stylecraft import tensor as T
from stylecraft.config import ModelConfig
from stylecraft.datagen import StyleDataset, build_dataset
from stylecraft.model import StyleCrafter

TINY = dict(image_size=32, patch=8, latent_channels=4, frames=4, max_frames=8, layers=2, width=16, heads=2,
            style_queries=4, encoder_layers=1, qformer_blocks=1, autoencoder_width=8)


def pytest_collection_modifyitems(config, items):
    if os.environ.get('STYLECRAFT_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason="set STYLECRAFT_SLOW=1 to run full-curriculum checks")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return StyleCrafter(tiny_config, seed=0)


@pytest.fixture
def tiny_model_f64(tiny_config):
    with T.precision('f64'):
        model = StyleCrafter(tiny_config, seed=0)
    return model


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp('data'))
    build_dataset(out, styles=2, contents=2, n_img=40, n_vid=10, frames=4, seed=0, workers=2)
    return StyleDataset(out)
