#!/usr/bin/python3

"""
Training stages and checkpoints.

pretrain   autoencoder, then text-only denoiser on plain images and videos
adapter    style adapter on stylized images, backbone frozen
temporal   temporal blocks on mixed image/video batches, all else frozen
joint      adapter and temporal blocks together on mixed batches
"""

import logging
import os
from collections import OrderedDict

import numpy as np
import pandas as pd

from stylecraft import tensor as T
from stylecraft.config import GuidanceConfig, ModelConfig
from stylecraft.datagen import image_batch, target_crops, video_batch
from stylecraft.diffusion import NoiseSchedule, training_loss
from stylecraft.errors import ArgumentError, BundleError, FreezeViolation, NumericalError, ShapeError
from stylecraft.model import StyleCrafter
from stylecraft.utils.optim import Adam, cosine_lr
from stylecraft.utils.serialize import digest, read_bundle, read_json, write_bundle, write_json

logger = logging.getLogger(__name__)

CHECKPOINT = 'checkpoint.json'
LOSS_LOG = 'loss.csv'
GROUPS = ['autoencoder', 'backbone/spatial', 'backbone/temporal', 'adapter']


def _group_module(model, group):
    return {'autoencoder': model.autoencoder, 'backbone/spatial': model.backbone.spatial,
            'backbone/temporal': model.backbone.temporal, 'adapter': model.adapter}[group]


#=====================================================================#
# Checkpoints
#=====================================================================#

def save_checkpoint(model, directory, stage='init', step=0, seed=0, stage_config=None):
    for group in GROUPS:
        write_bundle(os.path.join(directory, *group.split('/')), _group_module(model, group).state_dict(),
                     {'group': group})
    metadata = {'stage': stage, 'step': step, 'seed': seed, 'config_hash': model.config.hash(),
                'model': model.config.to_dict(), 'latent_scale': float(model.autoencoder.latent_scale),
                'stage_config': stage_config.to_dict() if stage_config is not None else None}
    write_json(os.path.join(directory, CHECKPOINT), metadata)
    logger.info("Saved %s checkpoint at step %d to %s." % (stage, step, directory))
    return directory


def checkpoint_metadata(directory):
    return read_json(os.path.join(directory, CHECKPOINT))


def restore(model, directory, groups=GROUPS):
    """Load the named sub-bundles of a checkpoint into an existing model."""
    metadata = checkpoint_metadata(directory)
    for group in groups:
        path = os.path.join(directory, *group.split('/'))
        tensors, _ = read_bundle(path)
        try:
            _group_module(model, group).load_state_dict(tensors)
        except KeyError as e:
            raise BundleError("Checkpoint bundle %s is missing tensors: %s" % (path, e))
        except ShapeError as e:
            raise BundleError("Checkpoint bundle %s does not fit the model: %s" % (path, e))
    if 'autoencoder' in groups:
        model.autoencoder.latent_scale = float(metadata.get('latent_scale', 1.0))
    return metadata


def load_checkpoint(directory, config=None, expected_hash=None):
    metadata = checkpoint_metadata(directory)
    stored = ModelConfig.from_dict(metadata['model'])
    config = config or stored
    if expected_hash is not None and expected_hash != metadata.get('config_hash'):
        logger.warning("Checkpoint %s was written with config %s, expected %s." % (directory, metadata.get('config_hash'), expected_hash))
    if config.hash() != metadata.get('config_hash'):
        logger.warning("Loading checkpoint %s into a model with a different config." % directory)
    model = StyleCrafter(config, seed=metadata.get('seed', 0))
    groups = list(GROUPS)
    if config.extractor != stored.extractor:
        # The adapter of another extractor variant keeps its fresh initialisation.
        groups.remove('adapter')
    restore(model, directory, groups)
    return model


def frozen_digests(model, trainable):
    names = set(name for name, _ in model.matching(trainable))
    return OrderedDict((name, digest(p.data)) for name, p in model.named_parameters() if name not in names)


def check_frozen(model, before):
    params = dict(model.named_parameters())
    changed = [name for name, h in before.items() if digest(params[name].data) != h]
    if changed:
        raise FreezeViolation("Frozen tensors changed during training: %s" % ', '.join(changed[:5]))


#=====================================================================#
# Stages
#=====================================================================#

def batch_kinds(steps, ratio):
    """Deterministic interleave: step k is an image batch when floor((k+1)r) > floor(kr)."""
    k = np.arange(steps)
    image = np.floor((k + 1) * ratio + 1e-9) > np.floor(k * ratio + 1e-9)
    return np.where(image, 'image', 'video')


class StageResult(object):

    def __init__(self, log, kinds, steps):
        self.log = log
        self.kinds = kinds
        self.steps = steps

    @property
    def image_fraction(self):
        return float(np.mean(np.asarray(self.kinds) == 'image')) if len(self.kinds) else 0.0

    @property
    def final_loss(self):
        return float(self.log.loss.values[-1]) if len(self.log) else float('nan')


def _optimize(model, config, loss_fn, steps, globs, kinds=None, stage=None):
    model.set_trainable(globs)
    params = model.matching(globs)
    optimizer = Adam(params, lr=config.lr)
    before = frozen_digests(model, globs)
    rows = []
    for step in range(steps):
        lr = cosine_lr(config.lr, step, steps)
        optimizer.zero_grad()
        kind = kinds[step] if kinds is not None else 'image'
        loss = loss_fn(step, kind)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError("Loss became %s at step %d of stage %s." % (value, step, stage or config.stage))
        loss.backward()
        optimizer.step(lr)
        check_frozen(model, before)
        if step % config.log_every == 0 or step == steps - 1:
            rows.append({'stage': stage or config.stage, 'step': step, 'loss': value, 'lr': lr, 'kind': kind})
            logger.info("%s step %d: loss %.5f lr %.2e (%s)" % (stage or config.stage, step, value, lr, kind))
    model.set_trainable([])
    return rows


def _sources(dataset, stage):
    if stage == 'pretrain':
        return dataset.images('train', style_ids=[0]), dataset.videos('train', style_ids=[0])
    if stage == 'adapter':
        return dataset.images('train'), None
    # Stylized images, plain videos only.
    return dataset.images('train'), dataset.videos('train', style_ids=[0])


def _check_sources(images, videos, config):
    if len(images['style_id']) == 0:
        raise ArgumentError("Stage %s found no training images." % config.stage)
    if config.stage != 'adapter' and config.image_batch_ratio < 1.0 and (videos is None or len(videos['style_id']) == 0):
        raise ArgumentError("Stage %s needs training videos." % config.stage)


def _build_model(ckpt_in, model_config, stage, seed):
    if isinstance(ckpt_in, StyleCrafter):
        return ckpt_in
    if ckpt_in is None:
        if stage != 'pretrain':
            raise ArgumentError("Stage %s needs an input checkpoint." % stage)
        return StyleCrafter(model_config or ModelConfig(), seed=seed)
    return load_checkpoint(ckpt_in, config=model_config)


def pretrain_autoencoder(model, config, images, videos, rng):
    pool = images['canvas']

    def loss_fn(step, kind):
        crops = target_crops(pool[rng.integers(0, len(pool), size=config.batch_size_img)])
        if videos is not None and len(videos['style_id']):
            crops = np.concatenate([crops, videos['frames'][rng.integers(0, len(videos['style_id']))]], axis=0)
        return model.autoencoder.reconstruction_loss(crops)

    rows = _optimize(model, config, loss_fn, config.autoencoder_steps, ['autoencoder.*'], stage='autoencoder')
    sample = target_crops(pool[rng.integers(0, len(pool), size=min(256, len(pool)))])
    with T.no_grad():
        z = model.autoencoder.encode(sample).data
    model.autoencoder.latent_scale = float(1.0 / max(z.std(), 1e-6))
    logger.info("Latent scale set to %.4f." % model.autoencoder.latent_scale)
    return rows


def run_stage(config, dataset, ckpt_in=None, out=None, model_config=None, schedule=None):
    """Train one stage; returns (model, StageResult). ckpt_in is a directory or a model."""
    model = _build_model(ckpt_in, model_config, config.stage, config.seed)
    schedule = schedule or NoiseSchedule()
    rng = np.random.default_rng([config.seed, 17])
    images, videos = _sources(dataset, config.stage)
    _check_sources(images, videos, config)
    guidance = GuidanceConfig(drop_text_p=config.drop_text_p, drop_style_p=config.drop_style_p)
    rows = []
    globs = list(config.trainable)
    if config.stage == 'pretrain':
        everything = dataset.images('train')
        if config.autoencoder_steps > 0 and any(g.startswith('autoencoder') for g in globs):
            rows += pretrain_autoencoder(model, config, everything, videos, rng)
        globs = [g for g in globs if not g.startswith('autoencoder')]
        guidance = GuidanceConfig(drop_text_p=config.drop_text_p, drop_style_p=0.0)
    styled = config.stage != 'pretrain'
    if config.stage == 'adapter':
        kinds = np.array(['image'] * config.steps)
    else:
        kinds = batch_kinds(config.steps, config.image_batch_ratio)

    def loss_fn(step, kind):
        if kind == 'image':
            index = rng.integers(0, len(images['style_id']), size=config.batch_size_img)
            batch = image_batch(images, index, rng, augment=config.augment, references=config.references)
        else:
            index = rng.integers(0, len(videos['style_id']), size=config.batch_size_vid)
            batch = video_batch(videos, index, rng if styled else None, augment=config.augment)
        latent = model.encode_pixels(batch['target'])
        return training_loss({'latent': latent, 'tokens': batch['tokens'],
                              'style_ref': batch['style_ref'] if styled else None},
                             model, guidance, rng, schedule)

    rows += _optimize(model, config, loss_fn, config.steps, globs, kinds)
    log = pd.DataFrame(rows, columns=['stage', 'step', 'loss', 'lr', 'kind'])
    result = StageResult(log, kinds, config.steps)
    if out is not None:
        save_checkpoint(model, out, config.stage, config.steps, config.seed, config)
        log.to_csv(os.path.join(out, LOSS_LOG), index=False)
    return model, result


#=====================================================================#
# Ablations
#=====================================================================#

class AblationVariant(object):

    def __init__(self, run_id, model, stages):
        self.run_id = run_id
        self.model = model
        self.stages = stages

    def __repr__(self):
        return 'AblationVariant(%s: %s)' % (self.run_id, ' -> '.join(s.stage for s in self.stages))


def ablation_matrix(base_model, adapter, temporal, joint):
    """The five single-change variants of the two-stage recipe."""
    base_model = base_model or ModelConfig()
    return [AblationVariant('no_augmentation', base_model, [adapter.replace(augment=False, run_id='no_augmentation'), temporal]),
            AblationVariant('attach_to_text', base_model.replace(fusion_mode='attach_to_text'), [adapter, temporal]),
            AblationVariant('fixed_scale', base_model.replace(fusion_mode='dual_fixed_scale'), [adapter, temporal]),
            AblationVariant('adapter_only', base_model, [adapter]),
            AblationVariant('joint', base_model, [joint])]


def extractor_variants(base_model, adapter):
    base_model = base_model or ModelConfig()
    return [AblationVariant('extractor_%s' % v, base_model.replace(extractor=v), [adapter]) for v in ('transformer', 'mlp')]


def run_variant(variant, dataset, pretrained, out):
    model = pretrained
    for config in variant.stages:
        directory = os.path.join(out, variant.run_id, config.stage)
        model, _ = run_stage(config, dataset, ckpt_in=model, out=directory, model_config=variant.model)
    return model, os.path.join(out, variant.run_id, variant.stages[-1].stage)


def run_ablation_matrix(dataset, pretrained, out, base_model, adapter, temporal, joint, extractors=True):
    """Trains the full recipe and every variant from one pretrained checkpoint; returns run id -> checkpoint dir."""
    variants = [AblationVariant('full', base_model, [adapter, temporal])]
    variants += ablation_matrix(base_model, adapter, temporal, joint)
    if extractors:
        variants += extractor_variants(base_model, adapter)
    runs = OrderedDict()
    for variant in variants:
        logger.info("Running ablation %r." % variant)
        _, runs[variant.run_id] = run_variant(variant, dataset, pretrained, out)
    return runs
