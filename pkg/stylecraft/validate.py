#!/usr/bin/python3

"""
Metric suite on probe embeddings: content score, style score, temporal
consistency and the flow warping error, plus the evaluation grid runner
and the ablation ordering table.
"""

import logging
import os

import numpy as np
import pandas as pd
from sklearn.metrics.pairwise import cosine_similarity

from stylecraft import diffusion
from stylecraft.config import IMAGE_GUIDANCE, VIDEO_GUIDANCE, GuidanceConfig
from stylecraft.datagen import CROP, ContentSpec, StyleSpec, held_out_pairs, reference_crops, render
from stylecraft.errors import ArgumentError, ShapeError
from stylecraft.explore import Explore, contact_sheet
from stylecraft.utils.serialize import config_hash
from stylecraft.utils.warp import downsample_motion, warp

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['run_id', 'row', 'kind', 'style_id', 'content_id', 'ref_index', 'reference_count',
                  'content_score', 'content_probe_acc', 'style_score', 'style_probe_acc', 'gram_style_score',
                  'temp_consistency', 'warping_error', 'probe_style_acc', 'probe_content_acc', 'config_hash']
METRICS = ['content_score', 'content_probe_acc', 'style_score', 'style_probe_acc', 'gram_style_score',
           'temp_consistency', 'warping_error']


#=====================================================================#
# Metrics
#=====================================================================#

def warping_error(frames, flow, occluded=None):
    """
    Mean over t of the mean absolute difference between frame t and frame
    t+1 sampled at p + flow_t(p), over non-occluded pixels; x1000.
    """
    frames = np.asarray(frames, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if frames.ndim != 4 or flow.shape != (frames.shape[0] - 1,) + frames.shape[1:3] + (2,):
        raise ShapeError("Flow of shape %s does not match frames %s." % (flow.shape, frames.shape))
    if occluded is not None and np.shape(occluded) != flow.shape[:3]:
        raise ShapeError("Occlusion mask of shape %s does not match flow %s." % (np.shape(occluded), flow.shape))
    errors = []
    for t in range(len(flow)):
        residual = np.abs(frames[t] - warp(frames[t + 1], flow[t])).mean(axis=-1)
        valid = np.ones(residual.shape, dtype=bool) if occluded is None else ~np.asarray(occluded[t], dtype=bool)
        if valid.any():
            errors.append(residual[valid].mean())
    return 1000.0 * float(np.mean(errors)) if errors else 0.0


def temp_consistency(frames, probe):
    frames = np.asarray(frames)
    if len(frames) < 2:
        raise ArgumentError("Temporal consistency needs at least 2 frames, but you entered %d." % len(frames))
    emb = probe.embeddings(frames)
    return float(np.mean(probe.cosine(emb[:-1], emb[1:])))


def content_score(frames, content_id, probe):
    """(mean cosine to the content prototype, fraction of frames classified as content_id)."""
    frames = np.asarray(frames)
    sims = probe.prototype_similarity(probe.embeddings(frames), content_id)
    _, predicted = probe.predict(frames)
    return float(sims.mean()), float(np.mean(predicted == content_id))


def style_score(frames, style_ref, probe, style_id=None):
    """(mean cosine between frame and reference embeddings, fraction of frames classified as style_id)."""
    frames = np.asarray(frames)
    refs = np.asarray(style_ref)
    if refs.ndim == 3:
        refs = refs[None]
    ref_emb = probe.embeddings(refs).mean(axis=0)
    emb = probe.embeddings(frames)
    sims = cosine_similarity(emb, ref_emb[None])[:, 0]
    acc = float('nan')
    if style_id is not None:
        predicted, _ = probe.predict(frames)
        acc = float(np.mean(predicted == style_id))
    return float(sims.mean()), acc


def style_descriptor(image, bins=8):
    """Channel Gram matrix and per-channel colour histograms of one image."""
    x = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    gram = x.T @ x / len(x)
    hist = [np.histogram(x[:, c], bins=bins, range=(0.0, 1.0))[0] / float(len(x)) for c in range(3)]
    return np.concatenate([gram.reshape(-1)] + hist)


def gram_style_score(frames, style_ref):
    """Training-free second style measure: cosine of Gram/histogram descriptors."""
    refs = np.asarray(style_ref)
    if refs.ndim == 3:
        refs = refs[None]
    target = np.mean([style_descriptor(r) for r in refs], axis=0)
    desc = np.stack([style_descriptor(f) for f in np.asarray(frames)])
    return float(cosine_similarity(desc, target[None])[:, 0].mean())


#=====================================================================#
# Reports
#=====================================================================#

class MetricsReport(object):

    def __init__(self, rows, probe, config_hash='', run_id='run'):
        self.run_id = run_id
        self.config_hash = config_hash
        self.probe_style_acc = float(probe.style_acc)
        self.probe_content_acc = float(probe.content_acc)
        self.rows = pd.DataFrame(rows)
        self.rows['run_id'] = run_id
        self.rows['probe_style_acc'] = self.probe_style_acc
        self.rows['probe_content_acc'] = self.probe_content_acc
        self.rows['config_hash'] = config_hash
        # Image runs leave the temporal metrics NaN.
        for column in REPORT_COLUMNS:
            if column not in self.rows:
                self.rows[column] = np.nan
        self.rows = self.rows[REPORT_COLUMNS]

    @property
    def summary(self):
        return dict((m, float(self.rows[m].mean())) for m in METRICS)

    def table(self):
        summary = dict(self.summary)
        summary.update({'run_id': self.run_id, 'row': 'summary', 'kind': self.rows.kind.iloc[0] if len(self.rows) else '',
                        'reference_count': self.rows.reference_count.iloc[0] if len(self.rows) else np.nan,
                        'probe_style_acc': self.probe_style_acc, 'probe_content_acc': self.probe_content_acc,
                        'config_hash': self.config_hash})
        rows = self.rows.copy()
        rows['row'] = rows['row'].astype(str)
        return pd.concat([rows, pd.DataFrame([summary])[REPORT_COLUMNS]], ignore_index=True)

    def to_csv(self, path):
        self.table().to_csv(path, index=False, float_format='%.6f')
        return path

    def print_accuracy(self):
        print("Metrics (%s):" % self.run_id)
        for name, value in self.summary.items():
            print("%s: %0.4f" % (name, value))
        print()


class Validate(object):

    def __init__(self, model, probe, styles=8, contents=12, refs_per_style=2, references=1, guidance=None,
                 steps=50, seed=0, video=False, run_id='full', batch_size=16, held_out=None):
        probe.require_gate()
        self.model = model
        self.probe = probe
        self.styles = styles
        self.contents = contents
        self.refs_per_style = refs_per_style
        self.references = references
        self.video = video
        self.frames = model.config.frames if video else 1
        self.guidance = guidance or (VIDEO_GUIDANCE if video else IMAGE_GUIDANCE)
        self.steps = steps
        self.seed = seed
        self.run_id = run_id
        self.batch_size = batch_size
        # Pairs reserved by build_dataset; without a dataset, the band it would reserve for these dims.
        self.held_out = held_out if held_out is not None else held_out_pairs(styles, contents)
        self.cells = self.grid()

    def grid(self):
        rng = np.random.default_rng([self.seed, 31])
        prompts = {}
        for c in range(self.contents):
            content = ContentSpec.from_id(c, rng, video=self.video)
            motion = None
            if self.video:
                truth = render(StyleSpec.from_id(0, self.seed), content, self.frames, seed=self.seed)
                motion = downsample_motion(truth.flow, truth.occluded, truth.ids[:-1], truth.frames.shape[1] // CROP)
            prompts[c] = (content.tokens(self.video), motion)
        cells = []
        for s in range(self.styles):
            refs = reference_crops(s, self.refs_per_style * self.references, seed=self.seed + 1000)
            refs = refs.reshape((self.refs_per_style, self.references) + refs.shape[1:])
            held = [c for style_id, c in self.held_out if style_id == s and c < self.contents]
            for j, c in enumerate(held):
                r = j % self.refs_per_style
                tokens, motion = prompts[c]
                cells.append({'style_id': s, 'content_id': c, 'ref_index': r, 'tokens': tokens,
                              'refs': refs[r], 'motion': motion})
        if not cells:
            raise ArgumentError("No held-out (style, content) pair lies within %d styles and %d contents." % (self.styles, self.contents))
        return cells

    def generate(self, guidance=None):
        guidance = guidance or self.guidance
        out = []
        for b, i in enumerate(range(0, len(self.cells), self.batch_size)):
            chunk = self.cells[i:i + self.batch_size]
            tokens = np.stack([c['tokens'] for c in chunk])
            refs = np.stack([c['refs'] for c in chunk])
            out.append(diffusion.generate(self.model, tokens, refs, guidance, self.steps, self.seed + b, self.frames))
        return np.concatenate(out)

    def score(self, frames):
        rows = []
        for i, (cell, clip) in enumerate(zip(self.cells, frames)):
            row = {'row': i, 'kind': 'video' if self.video else 'image', 'style_id': cell['style_id'],
                   'content_id': cell['content_id'], 'ref_index': cell['ref_index'],
                   'reference_count': self.references}
            row['content_score'], row['content_probe_acc'] = content_score(clip, cell['content_id'], self.probe)
            row['style_score'], row['style_probe_acc'] = style_score(clip, cell['refs'], self.probe, cell['style_id'])
            row['gram_style_score'] = gram_style_score(clip, cell['refs'])
            if self.video:
                flow, occluded = cell['motion']
                row['temp_consistency'] = temp_consistency(clip, self.probe)
                row['warping_error'] = warping_error(clip, flow, occluded)
            rows.append(row)
        return rows

    def run(self, out=None, guidance=None):
        frames = self.generate(guidance)
        settings = {'model': self.model.config.to_dict(), 'guidance': (guidance or self.guidance).to_dict(),
                    'steps': self.steps, 'seed': self.seed, 'references': self.references, 'video': self.video}
        report = MetricsReport(self.score(frames), self.probe, config_hash(settings), self.run_id)
        if out is not None:
            os.makedirs(out, exist_ok=True)
            report.to_csv(os.path.join(out, 'report.csv'))
            Explore(self.model, self.styles, self.contents, self.references, self.seed).plot_scales(os.path.join(out, 'scales.svg'))
            contact_sheet(frames[:32], os.path.join(out, 'sheet.png'),
                          titles=['s%d c%d' % (c['style_id'], c['content_id']) for c in self.cells[:32]])
            logger.info("Wrote report for %d samples to %s." % (len(frames), out))
        return report


def run_eval_suite(model, probe, out=None, guidance=None, references=1, video=False, **grid):
    return Validate(model, probe, references=references, guidance=guidance, video=video, **grid).run(out)


def guidance_sweep(model, probe, lambda_s_values=(0.0, 2.5, 5.0, 7.5), lambda_t=7.5, video=False, **grid):
    """Mean scores over the grid for each style scale at a fixed text scale."""
    validator = Validate(model, probe, video=video, **grid)
    rows = []
    for lambda_s in lambda_s_values:
        guidance = GuidanceConfig(lambda_t, lambda_s)
        report = MetricsReport(validator.score(validator.generate(guidance)), probe, run_id='lambda_s=%g' % lambda_s)
        row = {'lambda_t': lambda_t, 'lambda_s': lambda_s}
        row.update(report.summary)
        rows.append(row)
    return pd.DataFrame(rows)


def copy_reference_baseline(probe, styles=8, contents=12, refs_per_style=2, seed=0, frames=1, held_out=None):
    """Scores 'generations' that replicate the style reference: high style score, chance content accuracy."""
    held_out = held_out if held_out is not None else held_out_pairs(styles, contents)
    rows = []
    for s in range(styles):
        refs = reference_crops(s, refs_per_style, seed=seed + 1000)
        held = [c for style_id, c in held_out if style_id == s and c < contents]
        for j, c in enumerate(held):
            ref = refs[j % refs_per_style]
            clip = np.repeat(ref[None], frames, axis=0)
            row = {'row': len(rows), 'kind': 'video' if frames > 1 else 'image', 'style_id': s, 'content_id': c,
                   'ref_index': j % refs_per_style, 'reference_count': 1}
            row['content_score'], row['content_probe_acc'] = content_score(clip, c, probe)
            row['style_score'], row['style_probe_acc'] = style_score(clip, ref, probe, s)
            row['gram_style_score'] = gram_style_score(clip, ref)
            rows.append(row)
    return MetricsReport(rows, probe, run_id='copy_reference')


def _summary(report):
    return report.summary if isinstance(report, MetricsReport) else dict(report)


def ordering_table(images, videos=None, path=None):
    """
    Directional comparisons of ablation runs against 'full'. images and
    videos map run ids to MetricsReport (or summary dicts).
    """
    images = dict((k, _summary(v)) for k, v in images.items())
    videos = dict((k, _summary(v)) for k, v in (videos or {}).items())
    rows = []

    def check(name, source, lhs, metric, op, rhs, margin=0.0):
        if lhs not in source or rhs not in source:
            return
        a, b = source[lhs][metric], source[rhs][metric]
        passed = {'<': a < b - margin, '<=': a <= b - margin, '>': a > b + margin, '>=': a >= b + margin}[op]
        rows.append({'check': name, 'metric': metric, 'lhs': lhs, 'lhs_value': a, 'op': op,
                     'rhs': rhs, 'rhs_value': b, 'margin': margin, 'passed': bool(passed)})

    check('copies content without dual attention', images, 'attach_to_text', 'content_probe_acc', '<=', 'full', 0.30)
    check('style kept without dual attention', images, 'attach_to_text', 'style_score', '>=', 'full')
    check('augmentation helps style', images, 'no_augmentation', 'style_score', '<', 'full')
    check('temporal adaptation lowers warping error', videos, 'adapter_only', 'warping_error', '>', 'full')
    check('joint training loses style', videos if 'joint' in videos else images, 'joint', 'style_score', '<', 'full')
    check('query transformer beats transformer', images, 'full', 'style_score', '>=', 'extractor_transformer')
    check('transformer beats mlp', images, 'extractor_transformer', 'style_score', '>=', 'extractor_mlp')
    check('more references keep style', images, 'full_multi', 'style_score', '>=', 'full')
    table = pd.DataFrame(rows, columns=['check', 'metric', 'lhs', 'lhs_value', 'op', 'rhs', 'rhs_value', 'margin', 'passed'])
    if path is not None:
        table.to_csv(path, index=False, float_format='%.6f')
    return table


def print_ordering(table):
    print("Ablation orderings:")
    for _, row in table.iterrows():
        print("%s: %s (%0.4f %s %0.4f)" % (row.check, 'yes' if row.passed else 'NO', row.lhs_value, row.op, row.rhs_value))
    print()
