#!/usr/bin/python3

"""
Command-line entry point.

    stylecraft gen-data | pretrain | train-adapter | finetune-temporal |
               ablate | sample | eval | probe-train

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

import stylecraft
from stylecraft import config as C
from stylecraft.datagen import CROP, HELD_OUT, StyleDataset, build_dataset, reference_crops
from stylecraft.diffusion import generate
from stylecraft.errors import ArgumentError, StyleCraftError, UsageError
from stylecraft.explore import plot_loss, save_png
from stylecraft.probe import train_probe, ProbeModel
from stylecraft.trainer import (ablation_matrix, checkpoint_metadata, extractor_variants, load_checkpoint,
                                run_stage, run_variant, AblationVariant, LOSS_LOG)
from stylecraft.utils import labels
from stylecraft.utils.serialize import write_json
from stylecraft.utils.warp import resize_area
from stylecraft.validate import run_eval_suite

logger = logging.getLogger(__name__)

RUN_MANIFEST = 'run.json'
VARIANTS = ['full', 'no_augmentation', 'attach_to_text', 'fixed_scale', 'adapter_only', 'joint',
            'extractor_transformer', 'extractor_mlp']


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting on bad input."""

    def error(self, message):
        raise UsageError('%s: %s' % (self.prog, message))


#=====================================================================#
# Run manifests
#=====================================================================#

def source_revision():
    try:
        out = subprocess.run(['git', 'rev-parse', 'HEAD'], cwd=os.path.dirname(os.path.abspath(__file__)),
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return 'stylecraft-%s' % stylecraft.__version__


def _now():
    return datetime.now(timezone.utc).isoformat()


class RunManifest(object):

    def __init__(self, command, settings, seed):
        self.command = command
        self.settings = settings
        self.seed = seed
        self.revision = source_revision()
        self.started = _now()
        self.finished = None
        self.artifacts = []

    def add(self, *paths):
        self.artifacts += [p for p in paths if p is not None]

    def write(self, directory):
        self.finished = _now()
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, RUN_MANIFEST)
        write_json(path, {'command': self.command, 'config': self.settings, 'seed': self.seed,
                          'revision': self.revision, 'started': self.started, 'finished': self.finished,
                          'artifacts': sorted(set(self.artifacts))})
        return path


#=====================================================================#
# Subcommands
#=====================================================================#

def _stage_flags(args):
    return {'steps': args.steps, 'lr': args.lr, 'seed': C.env_seed(args.seed), 'batch_size_img': args.batch_size_img,
            'batch_size_vid': args.batch_size_vid, 'image_batch_ratio': args.image_batch_ratio,
            'log_every': args.log_every, 'drop_text_p': args.drop_text_p, 'drop_style_p': args.drop_style_p}


def gen_data(args, settings):
    data = C.merge(settings.get('data', {}), {'styles': args.styles, 'contents': args.contents, 'images': args.images,
                                               'videos': args.videos, 'frames': args.frames, 'seed': C.env_seed(args.seed),
                                               'held_out': args.held_out})
    manifest = RunManifest('gen-data', {'data': data}, data['seed'])
    build_dataset(args.out, data['styles'], data['contents'], data['images'], data['videos'], data['frames'],
                  data['seed'], args.workers, data.get('held_out', HELD_OUT))
    manifest.add('manifest.json')
    return manifest, args.out


def _train(stage, args, settings, extra=None):
    flags = _stage_flags(args)
    flags.update(extra or {})
    config = C.stage_config(settings, stage, **flags)
    model_config = C.model_config(settings) if args.ckpt is None else None
    manifest = RunManifest(args.command, {'stage': config.to_dict(),
                                          'model': model_config.to_dict() if model_config else None,
                                          'ckpt': args.ckpt, 'data': args.data}, config.seed)
    run_stage(config, StyleDataset(args.data), ckpt_in=args.ckpt, out=args.out, model_config=model_config)
    plot_loss(os.path.join(args.out, LOSS_LOG), os.path.join(args.out, 'loss.svg'))
    manifest.add('checkpoint.json', LOSS_LOG, 'loss.svg')
    return manifest, args.out


def pretrain(args, settings):
    return _train('pretrain', args, settings, {'autoencoder_steps': args.autoencoder_steps})


def train_adapter(args, settings):
    return _train('adapter', args, settings, {'augment': False if args.no_augment else None,
                                              'references': args.references})


def finetune_temporal(args, settings):
    return _train('temporal', args, settings)


def ablate(args, settings):
    flags = _stage_flags(args)
    adapter = C.stage_config(settings, 'adapter', **flags)
    temporal = C.stage_config(settings, 'temporal', **flags)
    joint = C.stage_config(settings, 'joint', **flags)
    base = C.ModelConfig.from_dict(checkpoint_metadata(args.ckpt)['model'])
    variants = [AblationVariant('full', base, [adapter, temporal])]
    variants += ablation_matrix(base, adapter, temporal, joint) + extractor_variants(base, adapter)
    variant = dict((v.run_id, v) for v in variants)[args.variant]
    manifest = RunManifest('ablate', {'variant': variant.run_id, 'model': variant.model.to_dict(),
                                      'stages': [s.to_dict() for s in variant.stages], 'ckpt': args.ckpt}, adapter.seed)
    _, directory = run_variant(variant, StyleDataset(args.data), args.ckpt, args.out)
    manifest.add(os.path.relpath(directory, args.out))
    return manifest, args.out


def _style_reference(value, seed):
    if value.isdigit():
        return reference_crops(int(value), 1, seed=seed + 1000)[0]
    image = np.asarray(plt.imread(value), dtype=np.float32)
    if image.ndim != 3 or image.shape[2] < 3:
        raise ArgumentError("Style reference must be an RGB image, but %s has shape %s." % (value, image.shape))
    image = image[..., :3]
    if image.max() > 1.0:
        image = image / 255.0
    if image.shape[:2] != (CROP, CROP):
        image = resize_area(image, CROP)
    return image


def sample(args, settings):
    guidance = C.guidance_config(settings, args.frames > 1, lambda_t=args.lambda_t, lambda_s=args.lambda_s)
    seed = C.env_seed(args.seed)
    model = load_checkpoint(args.ckpt)
    tokens = labels.parse_prompt(args.content)[None]
    refs = None
    if args.style_ref is not None:
        refs = _style_reference(args.style_ref, seed)[None, None]
    elif args.lambda_s is None:
        guidance = guidance.replace(lambda_s=0.0)
    steps = args.steps or settings.get('eval', {}).get('sample_steps', 50)
    frames = generate(model, tokens, refs, guidance, steps, seed, args.frames)[0]
    single = args.out.endswith('.png')
    directory = os.path.dirname(os.path.abspath(args.out)) if single else args.out
    os.makedirs(directory, exist_ok=True)
    manifest = RunManifest('sample', {'ckpt': args.ckpt, 'style_ref': args.style_ref, 'content': args.content,
                                      'guidance': guidance.to_dict(), 'frames': args.frames, 'steps': steps}, seed)
    if single:
        manifest.add(os.path.basename(save_png(frames[0], args.out)))
    else:
        for t, frame in enumerate(frames):
            manifest.add(os.path.basename(save_png(frame, os.path.join(directory, 'frame_%03d.png' % t))))
    logger.info("Sampled %s with %d frame(s)." % (labels.decode_prompt(tokens[0]), len(frames)))
    return manifest, directory


def evaluate(args, settings):
    grid = dict(settings.get('eval', {}))
    video = args.video
    guidance = C.guidance_config(settings, video, lambda_t=args.lambda_t, lambda_s=args.lambda_s)
    seed = C.env_seed(grid.get('seed', 0) if args.seed is None else args.seed)
    dataset = StyleDataset(args.data)
    model = load_checkpoint(args.ckpt)
    probe = ProbeModel.load(args.probe)
    probe.print_accuracy()
    references = args.references or grid.get('references', 1)
    report = run_eval_suite(model, probe, args.out, guidance, references=references, video=video,
                            styles=min(grid.get('styles', 8), dataset.styles),
                            contents=min(grid.get('contents', dataset.contents), dataset.contents), held_out=dataset.held_out,
                            refs_per_style=grid.get('refs_per_style', 2),
                            steps=args.steps or grid.get('sample_steps', 50), seed=seed, run_id=args.run_id)
    report.print_accuracy()
    manifest = RunManifest('eval', {'ckpt': args.ckpt, 'probe': args.probe, 'eval': grid, 'video': video,
                                    'references': references, 'guidance': guidance.to_dict()}, seed)
    manifest.add('report.csv', 'scales.svg', 'sheet.png')
    return manifest, args.out


def probe_train(args, settings):
    block = C.merge(settings.get('probe', {}), {'steps': args.steps, 'batch_size': args.batch_size,
                                                'lr': args.lr, 'seed': args.seed})
    block['seed'] = C.env_seed(block.get('seed', 0))
    manifest = RunManifest('probe-train', {'probe': block, 'data': args.data}, block['seed'])
    probe = train_probe(StyleDataset(args.data), args.out, block['steps'], block['batch_size'], block['lr'], block['seed'])
    probe.print_accuracy()
    manifest.add('manifest.json')
    return manifest, args.out


#=====================================================================#
# Parser
#=====================================================================#

def _common(parser):
    parser.add_argument('--config', help="JSON file merged over the packaged curriculum")
    parser.add_argument('--quiet', action='store_true', help="log warnings only")


def _stage_arguments(parser, ckpt_required=True):
    parser.add_argument('--data', required=True, help="dataset directory written by gen-data")
    parser.add_argument('--out', required=True, help="checkpoint directory to write")
    parser.add_argument('--ckpt', required=ckpt_required, default=None, help="input checkpoint directory")
    parser.add_argument('--steps', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--batch-size-img', type=int)
    parser.add_argument('--batch-size-vid', type=int)
    parser.add_argument('--image-batch-ratio', type=float)
    parser.add_argument('--log-every', type=int)
    parser.add_argument('--drop-text-p', type=float)
    parser.add_argument('--drop-style-p', type=float)


def build_parser():
    parser = ArgumentParser(prog='stylecraft', description="Reference-based style adapter for toy text-to-video diffusion.")
    parser.add_argument('--version', action='version', version='%(prog)s ' + stylecraft.__version__)
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    p = commands.add_parser('gen-data', help="render the procedural dataset")
    _common(p)
    p.add_argument('--out', required=True)
    p.add_argument('--styles', type=int)
    p.add_argument('--contents', type=int)
    p.add_argument('--images', type=int)
    p.add_argument('--videos', type=int)
    p.add_argument('--frames', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--held-out', type=int, help="contents per style reserved for evaluation")
    p.add_argument('--workers', type=int, default=1)
    p.set_defaults(func=gen_data)

    p = commands.add_parser('pretrain', help="autoencoder and text-only base model")
    _common(p)
    _stage_arguments(p, ckpt_required=False)
    p.add_argument('--autoencoder-steps', type=int)
    p.set_defaults(func=pretrain)

    p = commands.add_parser('train-adapter', help="style adapter on images, backbone frozen")
    _common(p)
    _stage_arguments(p)
    p.add_argument('--no-augment', action='store_true', help="use the target itself as style reference")
    p.add_argument('--references', type=int)
    p.set_defaults(func=train_adapter)

    p = commands.add_parser('finetune-temporal', help="temporal blocks on mixed batches")
    _common(p)
    _stage_arguments(p)
    p.set_defaults(func=finetune_temporal)

    p = commands.add_parser('ablate', help="train one ablation variant from a pretrained checkpoint")
    _common(p)
    _stage_arguments(p)
    p.add_argument('--variant', required=True, choices=VARIANTS)
    p.set_defaults(func=ablate)

    p = commands.add_parser('sample', help="generate an image or video")
    _common(p)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--style-ref', help="PNG path or a style id")
    p.add_argument('--content', required=True, help="space-separated content token ids")
    p.add_argument('--lambda-t', type=float)
    p.add_argument('--lambda-s', type=float)
    p.add_argument('--frames', type=int, default=1)
    p.add_argument('--steps', type=int)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True, help="PNG file, or a directory of frame PNGs")
    p.set_defaults(func=sample)

    p = commands.add_parser('eval', help="score a checkpoint on the evaluation grid")
    _common(p)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--probe', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--video', action='store_true')
    p.add_argument('--references', type=int)
    p.add_argument('--lambda-t', type=float)
    p.add_argument('--lambda-s', type=float)
    p.add_argument('--steps', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--run-id', default='full')
    p.set_defaults(func=evaluate)

    p = commands.add_parser('probe-train', help="train the scoring probe")
    _common(p)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--steps', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--seed', type=int)
    p.set_defaults(func=probe_train)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        return e.code or 0
    logging.basicConfig(format='%(asctime)s : %(levelname)s : %(message)s',
                        level=logging.WARNING if args.quiet else logging.INFO)
    try:
        settings = C.load_curriculum(args.config)
        manifest, directory = args.func(args, settings)
        manifest.write(directory)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (StyleCraftError, OSError) as e:
        logger.error("%s failed: %s" % (args.command, e))
        return 2
    return 0


def run():
    sys.exit(main())


if __name__ == '__main__':
    run()
