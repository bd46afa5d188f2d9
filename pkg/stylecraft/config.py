#!/usr/bin/python3

import copy
import logging
import os

import pkg_resources

from stylecraft.errors import ArgumentError, ConfigurationError
from stylecraft.utils import labels
from stylecraft.utils.serialize import config_hash, read_json

DATA_PATH = pkg_resources.resource_filename('stylecraft', 'data/')
CURRICULUM = DATA_PATH + 'curriculum.json'
SEED_VARIABLE = 'STYLECRAFT_SEED'

STAGES = ['pretrain', 'adapter', 'temporal', 'joint']
FUSION_MODES = ['dual', 'attach_to_text', 'dual_fixed_scale']
EXTRACTORS = ['qformer', 'transformer', 'mlp']
PARTITIONS = ['autoencoder.', 'backbone.spatial.', 'backbone.temporal.', 'adapter.']

TRAINABLE = {'pretrain': ['autoencoder.*', 'backbone.spatial.*', 'backbone.temporal.*'],
             'adapter': ['adapter.*'],
             'temporal': ['backbone.temporal.*'],
             'joint': ['adapter.*', 'backbone.temporal.*']}

logger = logging.getLogger(__name__)


class _Fields(object):
    """JSON round trip over the attributes named in FIELDS."""

    FIELDS = ()

    def to_dict(self):
        return dict((k, copy.deepcopy(getattr(self, k))) for k in self.FIELDS)

    @classmethod
    def from_dict(cls, values):
        unknown = sorted(set(values) - set(cls.FIELDS))
        if unknown:
            raise ConfigurationError("Unknown %s fields: %s." % (cls.__name__, ', '.join(unknown)))
        return cls(**dict(values))

    def replace(self, **changes):
        values = self.to_dict()
        values.update(changes)
        return self.from_dict(values)

    def hash(self):
        return config_hash(self.to_dict())

    def __eq__(self, other):
        return type(self) == type(other) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return '%s(%s)' % (type(self).__name__, ', '.join('%s=%r' % (k, getattr(self, k)) for k in self.FIELDS))


class ModelConfig(_Fields):

    FIELDS = ('image_size', 'patch', 'latent_channels', 'frames', 'max_frames', 'layers', 'width', 'heads',
              'vocab_size', 'text_length', 'fusion_mode', 'style_queries', 'encoder_layers', 'qformer_blocks',
              'extractor', 'frame_position', 'autoencoder_width')

    def __init__(self, image_size=32, patch=4, latent_channels=16, frames=8, max_frames=16, layers=8, width=64,
                 heads=4, vocab_size=labels.VOCAB_SIZE, text_length=labels.PROMPT_LENGTH, fusion_mode='dual',
                 style_queries=16, encoder_layers=2, qformer_blocks=2, extractor='qformer', frame_position=True,
                 autoencoder_width=32):
        if fusion_mode not in FUSION_MODES:
            raise ConfigurationError("Fusion mode must be dual, attach_to_text or dual_fixed_scale, but you entered %s." % fusion_mode)
        if extractor not in EXTRACTORS:
            raise ConfigurationError("Extractor must be qformer, transformer or mlp, but you entered %s." % extractor)
        if width % heads != 0:
            raise ConfigurationError("Width %d is not divisible by %d heads." % (width, heads))
        if image_size % patch != 0 or image_size % 4 != 0:
            raise ConfigurationError("Image size %d must be divisible by 4 and by the patch size %d." % (image_size, patch))
        if frames > max_frames:
            raise ConfigurationError("frames (%d) exceeds max_frames (%d)." % (frames, max_frames))
        self.image_size = image_size
        self.patch = patch
        self.latent_channels = latent_channels
        self.frames = frames
        self.max_frames = max_frames
        self.layers = layers
        self.width = width
        self.heads = heads
        self.vocab_size = vocab_size
        self.text_length = text_length
        self.fusion_mode = fusion_mode
        self.style_queries = style_queries
        self.encoder_layers = encoder_layers
        self.qformer_blocks = qformer_blocks
        self.extractor = extractor
        self.frame_position = frame_position
        self.autoencoder_width = autoencoder_width

    @property
    def latent_size(self):
        return self.image_size // 4

    @property
    def patches(self):
        return (self.image_size // self.patch) ** 2


class StageConfig(_Fields):

    FIELDS = ('stage', 'steps', 'batch_size_img', 'batch_size_vid', 'image_batch_ratio', 'lr', 'seed', 'trainable',
              'augment', 'autoencoder_steps', 'drop_text_p', 'drop_style_p', 'references', 'log_every', 'run_id')

    def __init__(self, stage='adapter', steps=3000, batch_size_img=16, batch_size_vid=2, image_batch_ratio=0.2,
                 lr=3e-4, seed=0, trainable=None, augment=True, autoencoder_steps=0, drop_text_p=0.1,
                 drop_style_p=0.1, references=1, log_every=10, run_id=None):
        if stage not in STAGES:
            raise ConfigurationError("Stage must be pretrain, adapter, temporal or joint, but you entered %s." % stage)
        if not 0.0 <= image_batch_ratio <= 1.0:
            raise ConfigurationError("image_batch_ratio must be in [0, 1], but you entered %s." % image_batch_ratio)
        for p in (drop_text_p, drop_style_p):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError("Dropout probabilities must be in [0, 1], but you entered %s." % p)
        trainable = list(TRAINABLE[stage]) if trainable is None else list(trainable)
        for glob in trainable:
            if not any(glob.startswith(prefix) for prefix in PARTITIONS):
                raise ConfigurationError("Trainable glob %s lies outside the parameter partition." % glob)
        self.stage = stage
        self.steps = steps
        self.batch_size_img = batch_size_img
        self.batch_size_vid = batch_size_vid
        self.image_batch_ratio = image_batch_ratio
        self.lr = lr
        self.seed = seed
        self.trainable = trainable
        self.augment = augment
        self.autoencoder_steps = autoencoder_steps
        self.drop_text_p = drop_text_p
        self.drop_style_p = drop_style_p
        self.references = references
        self.log_every = log_every
        self.run_id = run_id or stage


class GuidanceConfig(_Fields):

    FIELDS = ('lambda_t', 'lambda_s', 'drop_text_p', 'drop_style_p')

    def __init__(self, lambda_t=7.5, lambda_s=5.0, drop_text_p=0.1, drop_style_p=0.1):
        if lambda_t < 0 or lambda_s < 0:
            raise ArgumentError("Guidance scales must be non-negative, but you entered %s and %s." % (lambda_t, lambda_s))
        self.lambda_t = lambda_t
        self.lambda_s = lambda_s
        self.drop_text_p = drop_text_p
        self.drop_style_p = drop_style_p


IMAGE_GUIDANCE = GuidanceConfig(7.5, 5.0)
VIDEO_GUIDANCE = GuidanceConfig(15.0, 7.5)


def merge(base, override):
    """Recursive dict merge; None values in override are ignored."""
    out = copy.deepcopy(dict(base))
    for key, value in (override or {}).items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def env_seed(default):
    value = os.environ.get(SEED_VARIABLE)
    if value is None or value == '':
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError("%s must be an integer, but you entered %s." % (SEED_VARIABLE, value))


def load_curriculum(config_file=None, overrides=None):
    """Package defaults < --config file < flags < STYLECRAFT_SEED."""
    settings = read_json(CURRICULUM)
    if config_file is not None:
        settings = merge(settings, read_json(config_file))
    settings = merge(settings, overrides)
    seed = env_seed(None)
    if seed is not None:
        logger.info("Seed %d taken from %s." % (seed, SEED_VARIABLE))
        for block in settings.get('stages', {}).values():
            block['seed'] = seed
        settings.setdefault('data', {})['seed'] = seed
        settings.setdefault('eval', {})['seed'] = seed
    return settings


def model_config(settings):
    return ModelConfig.from_dict(settings.get('model', {}))


def stage_config(settings, stage, **flags):
    block = dict(settings.get('stages', {}).get(stage, {}))
    block['stage'] = stage
    block = merge(block, flags)
    return StageConfig.from_dict(block)


def guidance_config(settings, video=False, **flags):
    block = dict(settings.get('eval', {}).get('guidance_video' if video else 'guidance_image', {}))
    return GuidanceConfig.from_dict(merge(block, flags))
