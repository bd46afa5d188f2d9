import numpy as np
import pytest

from stylecraft import tensor as T
from stylecraft.adapter import StyleAdapter, build_extractor, patchify
from stylecraft.errors import ArgumentError, ConfigurationError, ShapeError
from stylecraft.model import StyleCrafter

TOKENS = np.array([[1, 5, 7, 13, 0, 0, 0, 0], [2, 6, 8, 13, 3, 5, 7, 13]])


def references(seed, count=2, refs=1):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(count, refs, 32, 32, 3))


def test_patchify_layout():
    images = np.arange(2 * 4 * 4 * 3, dtype=np.float64).reshape(2, 4, 4, 3)
    patches = patchify(images, 2)
    assert patches.shape == (2, 4, 12)
    assert np.array_equal(patches[0, 1], images[0, 0:2, 2:4].reshape(-1))


def test_style_embedding_shape(tiny_model, tiny_config):
    emb = tiny_model.style_embedding(references(0))
    assert emb.shape == (2, tiny_config.style_queries, tiny_config.width)
    assert emb.source_count == 1


def test_duplicated_reference_is_invariant(tiny_model_f64):
    refs = references(1)
    with T.precision('f64'):
        single = tiny_model_f64.style_embedding(refs).rows.data
        doubled = tiny_model_f64.style_embedding(np.concatenate([refs, refs], axis=1))
    assert doubled.source_count == 2
    assert np.allclose(single, doubled.rows.data, atol=1e-5)


def test_empty_and_malformed_references(tiny_model):
    adapter = tiny_model.adapter
    with pytest.raises(ArgumentError):
        adapter.extract_style([])
    with pytest.raises(ArgumentError):
        adapter(np.zeros((2, 0, 32, 32, 3)))
    with pytest.raises(ShapeError):
        adapter(np.zeros((2, 1, 16, 16, 3)))


def test_extractor_variants(tiny_config):
    for variant in ('qformer', 'transformer', 'mlp'):
        config = tiny_config.replace(extractor=variant)
        adapter = StyleAdapter(np.random.default_rng(0), config)
        assert adapter(references(2)).shape == (2, config.style_queries, config.width)
    with pytest.raises(ConfigurationError):
        build_extractor(np.random.default_rng(0), 'resampler', 16, 2, 4)
    with pytest.raises(ConfigurationError):
        tiny_config.replace(extractor='resampler')


def test_scale_predictor_starts_from_its_bias(tiny_model, tiny_config):
    tiny_model.adapter.scale_predictor.scale_proj.weight.data[...] = 0.0
    scales = tiny_model.scale_factors(TOKENS, references(3))
    assert scales.shape == (2, tiny_config.layers)
    assert np.array_equal(scales, np.ones((2, tiny_config.layers)))


def test_scale_factors_depend_on_prompt(tiny_model):
    scales = tiny_model.scale_factors(TOKENS, np.repeat(references(3, 1), 2, axis=0))
    assert np.all(np.isfinite(scales))
    assert not np.array_equal(scales[0], scales[1])


def test_fixed_and_attach_modes_have_no_predicted_scales(tiny_config):
    fixed = StyleCrafter(tiny_config.replace(fusion_mode='dual_fixed_scale'))
    assert np.array_equal(fixed.scale_factors(TOKENS[:1], references(4, 1)), np.ones((1, tiny_config.layers)))
    attach = StyleCrafter(tiny_config.replace(fusion_mode='attach_to_text'))
    assert attach.scale_factors(TOKENS[:1], references(4, 1)) is None


def test_adapter_gradcheck(tiny_model_f64):
    adapter = tiny_model_f64.adapter
    refs = references(5, 1)
    with T.precision('f64'):
        params = [p for _, p in adapter.matching(['extractor.*', 'encoder.patch_embed.*'])]
        f = lambda: T.reduce_sum(T.square(adapter(refs).rows))
        assert T.grad_check(f, params, max_coords=4) < 1e-3
