import os

import numpy as np
import pandas as pd
import pytest

from stylecraft import tensor as T
from stylecraft.config import GuidanceConfig, ModelConfig, StageConfig
from stylecraft.diffusion import training_loss
from stylecraft.errors import ArgumentError, BundleError, ConfigurationError, FreezeViolation, NumericalError
from stylecraft.model import StyleCrafter
from stylecraft.trainer import (CHECKPOINT, LOSS_LOG, _optimize, ablation_matrix, batch_kinds, check_frozen,
                                checkpoint_metadata, extractor_variants, frozen_digests, load_checkpoint,
                                run_stage, save_checkpoint)
from stylecraft.utils.labels import encode_prompt
from stylecraft.utils.serialize import digest

from conftest import TINY

STEPS = dict(steps=3, batch_size_img=4, batch_size_vid=1, log_every=1)


def snapshot(model, prefix):
    return dict((name, digest(p.data)) for name, p in model.named_parameters() if name.startswith(prefix))


def test_batch_kinds_interleave():
    kinds = batch_kinds(10, 0.2)
    assert list(np.where(kinds == 'image')[0]) == [4, 9]
    assert (batch_kinds(7, 1.0) == 'image').all()
    assert (batch_kinds(7, 0.0) == 'video').all()
    assert abs((batch_kinds(1000, 0.2) == 'image').mean() - 0.2) < 1e-9


def test_stage_config_validation():
    assert StageConfig('temporal').trainable == ['backbone.temporal.*']
    with pytest.raises(ConfigurationError):
        StageConfig('adapter', trainable=['optimizer.*'])
    with pytest.raises(ConfigurationError):
        StageConfig('finetune')
    with pytest.raises(ConfigurationError):
        StageConfig.from_dict({'stage': 'adapter', 'momentum': 0.9})


def test_stage_needs_checkpoint(tiny_dataset):
    with pytest.raises(ArgumentError):
        run_stage(StageConfig('adapter', **STEPS), tiny_dataset)


def test_non_finite_loss_stops_training(tiny_model):
    config = StageConfig('adapter', **STEPS)
    with pytest.raises(NumericalError):
        _optimize(tiny_model, config, lambda step, kind: T.Tensor(np.nan), 3, ['adapter.*'])


def test_freeze_violation_is_detected(tiny_model):
    before = frozen_digests(tiny_model, ['adapter.*'])
    check_frozen(tiny_model, before)
    tiny_model.backbone.spatial.output.bias.data[0] += 1.0
    with pytest.raises(FreezeViolation):
        check_frozen(tiny_model, before)


def test_curriculum_respects_freezes(tiny_dataset, tmp_path):
    pretrain = StageConfig('pretrain', autoencoder_steps=2, image_batch_ratio=0.5, **STEPS)
    model, result = run_stage(pretrain, tiny_dataset, out=str(tmp_path / 'pretrain'), model_config=ModelConfig(**TINY))
    assert model.autoencoder.latent_scale != 1.0
    assert result.steps == 3 and np.isfinite(result.final_loss)
    log = pd.read_csv(str(tmp_path / 'pretrain' / LOSS_LOG))
    assert set(log.stage) == {'autoencoder', 'pretrain'}

    backbone = snapshot(model, 'backbone')
    adapter = snapshot(model, 'adapter')
    model, _ = run_stage(StageConfig('adapter', **STEPS), tiny_dataset, ckpt_in=str(tmp_path / 'pretrain'),
                         out=str(tmp_path / 'adapter'))
    assert snapshot(model, 'backbone') == backbone
    assert snapshot(model, 'adapter') != adapter

    spatial = snapshot(model, 'backbone.spatial')
    adapter = snapshot(model, 'adapter')
    temporal = snapshot(model, 'backbone.temporal')
    model, result = run_stage(StageConfig('temporal', image_batch_ratio=0.5, **STEPS), tiny_dataset,
                              ckpt_in=str(tmp_path / 'adapter'), out=str(tmp_path / 'temporal'))
    assert snapshot(model, 'backbone.spatial') == spatial
    assert snapshot(model, 'adapter') == adapter
    assert snapshot(model, 'backbone.temporal') != temporal
    assert set(result.kinds) == {'image', 'video'}


def test_checkpoint_round_trip(tiny_model, tmp_path):
    tiny_model.autoencoder.latent_scale = 0.5
    save_checkpoint(tiny_model, str(tmp_path), stage='adapter', step=7, seed=3)
    metadata = checkpoint_metadata(str(tmp_path))
    assert os.path.exists(str(tmp_path / CHECKPOINT))
    assert metadata['config_hash'] == tiny_model.config.hash()
    assert metadata['stage'] == 'adapter' and metadata['step'] == 7
    restored = load_checkpoint(str(tmp_path))
    assert restored.autoencoder.latent_scale == 0.5
    for (name, a), (_, b) in zip(tiny_model.named_parameters(), restored.named_parameters()):
        assert np.array_equal(a.data, b.data), name


def test_checkpoint_shape_mismatch(tiny_model, tmp_path):
    save_checkpoint(tiny_model, str(tmp_path))
    with pytest.raises(BundleError):
        load_checkpoint(str(tmp_path), config=ModelConfig(**dict(TINY, width=32)))


def test_other_extractor_keeps_fresh_adapter(tiny_model, tmp_path):
    save_checkpoint(tiny_model, str(tmp_path))
    model = load_checkpoint(str(tmp_path), config=tiny_model.config.replace(extractor='mlp'))
    assert model.adapter.variant == 'mlp'
    assert np.array_equal(model.backbone.spatial.output.weight.data, tiny_model.backbone.spatial.output.weight.data)


def test_ablation_matrix():
    adapter, temporal, joint = StageConfig('adapter'), StageConfig('temporal'), StageConfig('joint')
    variants = dict((v.run_id, v) for v in ablation_matrix(ModelConfig(**TINY), adapter, temporal, joint))
    assert sorted(variants) == ['adapter_only', 'attach_to_text', 'fixed_scale', 'joint', 'no_augmentation']
    assert variants['no_augmentation'].stages[0].augment is False
    assert variants['attach_to_text'].model.fusion_mode == 'attach_to_text'
    assert variants['fixed_scale'].model.fusion_mode == 'dual_fixed_scale'
    assert [s.stage for s in variants['adapter_only'].stages] == ['adapter']
    assert [s.stage for s in variants['joint'].stages] == ['joint']
    assert sorted(variants['joint'].stages[0].trainable) == ['adapter.*', 'backbone.temporal.*']
    assert [v.model.extractor for v in extractor_variants(ModelConfig(**TINY), adapter)] == ['transformer', 'mlp']


@pytest.mark.slow
def test_freezes_hold_over_long_stages(tiny_dataset, tmp_path):
    long = dict(STEPS, steps=100, log_every=50)
    model = StyleCrafter(ModelConfig(**TINY))
    backbone = snapshot(model, 'backbone')
    model, _ = run_stage(StageConfig('adapter', **long), tiny_dataset, ckpt_in=model)
    assert snapshot(model, 'backbone') == backbone
    frozen = snapshot(model, 'adapter'), snapshot(model, 'backbone.spatial')
    model, _ = run_stage(StageConfig('temporal', **long), tiny_dataset, ckpt_in=model)
    assert (snapshot(model, 'adapter'), snapshot(model, 'backbone.spatial')) == frozen


@pytest.mark.slow
def test_loss_falls_on_fixed_samples(tiny_model):
    rng = np.random.default_rng(3)
    batch = {'latent': rng.standard_normal((64,) + tiny_model.latent_shape(1)).astype(T.default_dtype()),
             'tokens': np.stack([encode_prompt([('circle', (16, 16), (0, 0))])] * 64)}
    guidance = GuidanceConfig(drop_text_p=0.0, drop_style_p=0.0)
    config = StageConfig('pretrain', steps=200, lr=1e-3, log_every=1)
    # Same timesteps and noise every step, so the objective itself is fixed.
    loss_fn = lambda step, kind: training_loss(batch, tiny_model, guidance, np.random.default_rng(0))
    losses = np.array([row['loss'] for row in _optimize(tiny_model, config, loss_fn, 200, ['backbone.spatial.*'])])
    assert len(losses) == 200
    assert losses[-10:].mean() < 0.9 * losses[:10].mean()
