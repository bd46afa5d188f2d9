#!/usr/bin/python3

"""
Procedural stylized images and videos with exact labels and flow.

Styles live in palettes, background modes and object-space textures;
contents are shape layouts and motions. Captions are content tokens only.
"""

import logging
import os
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score

from stylecraft.errors import ArgumentError, ConfigurationError, GenerationError
from stylecraft.utils import labels
from stylecraft.utils.serialize import read_json, read_tensor, write_json, write_tensor
from stylecraft.utils.warp import downsample_motion, occlusion, resize_area

logger = logging.getLogger(__name__)

CANVAS = 64
CROP = 32
STYLE_SIDE = 48
FRAMES = 8
SPEED = 2
HELD_OUT = 4

Rendering = namedtuple('Rendering', 'frames flow occluded ids')
Crops = namedtuple('Crops', 'target style_ref offset')


class StyleSpec(object):

    def __init__(self, style_id, palette, texture_freq, stroke_noise, background_mode, phase=0.0):
        if background_mode not in labels.BACKGROUNDS:
            raise ConfigurationError("Background must be flat, gradient or hatched, but you entered %s." % background_mode)
        self.style_id = style_id
        self.palette = [tuple(c) for c in palette]
        self.texture_freq = texture_freq
        self.stroke_noise = stroke_noise
        self.background_mode = background_mode
        self.phase = phase

    @classmethod
    def from_id(cls, style_id, seed=0):
        pal = labels.palette(style_id)
        if style_id == 0:
            # Plain flat style: the photorealistic stand-in.
            return cls(0, pal, 0.0, 0.0, 'flat')
        rng = np.random.default_rng([seed, style_id])
        return cls(style_id, pal,
                   texture_freq=2.0 + (style_id * 5) % 7 + rng.uniform(0.0, 0.5),
                   stroke_noise=0.04 * (1 + style_id % 4),
                   background_mode=labels.BACKGROUNDS[style_id % 3],
                   phase=rng.uniform(0.0, 2 * np.pi))


class ContentSpec(object):

    def __init__(self, content_id, shapes, motion=None):
        self.content_id = content_id
        self.shapes = shapes
        self.motion = motion if motion is not None else [(0, 0)] * len(shapes)

    @property
    def is_static(self):
        return all(v == (0, 0) for v in self.motion)

    @classmethod
    def from_id(cls, content_id, rng=None, video=False):
        catalog = content_catalog()
        if content_id < 0 or content_id >= len(catalog):
            raise ArgumentError("Content id must be in [0, %d), but you entered %d." % (len(catalog), content_id))
        rng = rng if rng is not None else np.random.default_rng(0)
        layout = catalog[content_id]
        shapes, motion = [], []
        mode = content_id % 3
        for kind, quadrant in layout:
            qx, qy = quadrant % 2, quadrant // 2
            jitter = rng.integers(-3, 4, size=2)
            center = (16 + 32 * qx + int(jitter[0]), 16 + 32 * qy + int(jitter[1]))
            size = int(rng.integers(8, 12)) if len(layout) == 1 else int(rng.integers(6, 10))
            shapes.append({'kind': labels.KINDS[kind], 'center': center, 'size': size})
            if video:
                # Shapes drift toward the middle of the canvas.
                sx, sy = (1 if qx == 0 else -1), (1 if qy == 0 else -1)
                motion.append((SPEED * sx * (mode in (0, 2)), SPEED * sy * (mode in (1, 2))))
            else:
                motion.append((0, 0))
        return cls(content_id, shapes, motion)

    def tokens(self, video=None):
        video = (not self.is_static) if video is None else video
        return labels.encode_prompt([(s['kind'], s['center'], v) for s, v in zip(self.shapes, self.motion)], video=video)


def content_catalog():
    singles = [((k, q),) for q in range(4) for k in range(4)]
    doubles = [((k1, q1), (k2, 3 - q1)) for q1 in (0, 1) for k1 in range(4) for k2 in range(4)]
    catalog = []
    for single, double in zip(singles, doubles):
        catalog += [single, double]
    return catalog + doubles[len(singles):]


def shape_mask(kind, u, v, r):
    if kind == 'circle':
        return u * u + v * v <= r * r
    if kind == 'square':
        return np.maximum(np.abs(u), np.abs(v)) <= r
    if kind == 'triangle':
        return (v <= r) & (v >= -r) & (2 * np.abs(u) <= v + r)
    if kind == 'star':
        rho = np.sqrt(u * u + v * v)
        return rho <= r * (0.6 + 0.4 * np.cos(5 * np.arctan2(v, u)))
    raise ConfigurationError("Shape kind must be one of %s, but you entered %s." % (', '.join(labels.KINDS), kind))


def background(style, size=CANVAS):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    base, second = np.array(style.palette[0]), np.array(style.palette[1])
    if style.background_mode == 'flat':
        return np.broadcast_to(base, (size, size, 3)).copy()
    if style.background_mode == 'gradient':
        a = (ys / (size - 1))[..., None]
        return base * (1 - a) + second * a
    stripes = (((xs + ys) * max(style.texture_freq, 1.0) / size) % 1.0) < 0.5
    return np.where(stripes[..., None], second, base)


def render(style, content, frames=1, seed=0, size=CANVAS):
    """
    Render T frames of content in style.

    Shapes move rigidly by whole pixels and carry their texture and stroke
    noise in object coordinates, so flow(t) maps every visible surface point
    of frame t onto frame t+1 exactly.
    """
    if frames < 1:
        raise ArgumentError("frames must be at least 1, but you entered %d." % frames)
    ys, xs = np.mgrid[0:size, 0:size]
    bg = background(style, size)
    canvases = np.empty((frames, size, size, 3))
    ids = np.zeros((frames, size, size), dtype=np.int64)
    strength = 0.0 if style.texture_freq == 0 else 0.6
    tint = np.array(style.palette[-1 if len(style.palette) > 4 else 1])
    patterns = []
    for k, shape in enumerate(content.shapes):
        r = shape['size']
        rng = np.random.default_rng([seed, content.content_id, k])
        patterns.append(rng.uniform(0.0, 1.0, size=(2 * r + 1, 2 * r + 1)))
    for t in range(frames):
        canvas = bg.copy()
        for k, shape in enumerate(content.shapes):
            r = shape['size']
            cx = shape['center'][0] + t * content.motion[k][0]
            cy = shape['center'][1] + t * content.motion[k][1]
            if cx - r < 0 or cy - r < 0 or cx + r > size - 1 or cy + r > size - 1:
                raise GenerationError("Shape %d (%s) leaves the canvas at frame %d." % (k, shape['kind'], t))
            u, v = xs - cx, ys - cy
            mask = shape_mask(shape['kind'], u, v, r)
            color = np.array(style.palette[2 + k % (len(style.palette) - 2)])
            a = strength * 0.5 * (1.0 + np.sin(2 * np.pi * style.texture_freq * (u + v) / size + style.phase))
            noise = patterns[k][np.clip(v + r, 0, 2 * r), np.clip(u + r, 0, 2 * r)] - 0.5
            fill = color * (1 - a[..., None]) + tint * a[..., None] + style.stroke_noise * noise[..., None]
            canvas[mask] = fill[mask]
            ids[t][mask] = k + 1
        canvases[t] = np.clip(canvas, 0.0, 1.0)
    flow = np.zeros((max(frames - 1, 0), size, size, 2))
    occluded = np.zeros((max(frames - 1, 0), size, size), dtype=bool)
    for t in range(frames - 1):
        for k in range(len(content.shapes)):
            flow[t][ids[t] == k + 1] = content.motion[k]
        occluded[t] = occlusion(ids[t], ids[t + 1], flow[t])
    return Rendering(canvases.astype(np.float32), flow.astype(np.float32), occluded, ids)


def decoupled_crops(canvas, rng, augment=True):
    """
    Target: shorter side to 32, centre crop. Style reference: shorter side
    to 48, random 32x32 crop. Without augmentation the reference is the target.
    """
    if canvas.shape[:2] != (CANVAS, CANVAS):
        raise ArgumentError("Canvas must be %dx%d, got %s." % (CANVAS, CANVAS, canvas.shape[:2]))
    scaled = resize_area(canvas, CROP)
    top = (scaled.shape[0] - CROP) // 2
    target = scaled[top:top + CROP, top:top + CROP]
    if not augment:
        return Crops(target, target.copy(), None)
    larger = resize_area(canvas, STYLE_SIDE)
    oy, ox = (int(o) for o in rng.integers(0, STYLE_SIDE - CROP + 1, size=2))
    return Crops(target, larger[oy:oy + CROP, ox:ox + CROP], (oy, ox))


def crop_footprints(offset, canvas=CANVAS):
    """Canvas-coordinate boxes (y0, x0, y1, x1) of the target and style crops."""
    target = (0.0, 0.0, float(canvas), float(canvas))
    if offset is None:
        return target, target
    scale = canvas / float(STYLE_SIDE)
    oy, ox = offset
    return target, (oy * scale, ox * scale, (oy + CROP) * scale, (ox + CROP) * scale)


def crop_overlap(offset, canvas=CANVAS):
    a, b = crop_footprints(offset, canvas)
    inter = max(0.0, min(a[2], b[2]) - max(a[0], b[0])) * max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def target_crops(canvases):
    return np.stack([decoupled_crops(c, None, augment=False).target for c in canvases])


def reference_crops(style_id, count, seed=0, contents=16):
    """Unseen style-reference crops of one style, from random layouts."""
    rng = np.random.default_rng([seed, style_id, 7])
    style = StyleSpec.from_id(style_id, seed)
    crops = []
    for i in range(count):
        content = ContentSpec.from_id(int(rng.integers(0, contents)), rng)
        canvas = render(style, content, 1, seed=int(rng.integers(0, 2 ** 31))).frames[0]
        crops.append(decoupled_crops(canvas, rng).style_ref)
    return np.stack(crops)


#=====================================================================#
# Dataset bundles
#=====================================================================#

def _render_sample(args):
    sid, kind, style_id, content_id, frames, seed = args
    rng = np.random.default_rng([seed, sid])
    style = StyleSpec.from_id(style_id, seed)
    content = ContentSpec.from_id(content_id, rng, video=(kind == 'video'))
    return render(style, content, frames if kind == 'video' else 1, seed=seed + sid), content.tokens(kind == 'video')


def held_out_pairs(styles, contents, per_style=HELD_OUT, seed=0):
    """
    (style, content) pairs kept out of every split for evaluation. Each style
    reserves a seeded band of per_style consecutive contents, shifted by
    per_style from one style to the next.
    """
    if per_style < 0:
        raise ArgumentError("Held-out contents per style must be >= 0, but you entered %d." % per_style)
    per_style = min(per_style, contents - 1)
    offset = int(np.random.default_rng([seed, 5]).integers(0, contents))
    pairs = [(s, (offset + s * per_style + j) % contents) for s in range(styles) for j in range(per_style)]
    reserved = set(pairs)
    covered = set(c for s in range(styles) for c in range(contents) if (s, c) not in reserved)
    if len(covered) < contents:
        raise ArgumentError("Holding out %d contents per style leaves %d of %d contents without training pairs."
                            % (per_style, contents - len(covered), contents))
    return pairs


def build_dataset(out, styles=8, contents=16, n_img=2048, n_vid=256, frames=FRAMES, seed=0, workers=1, held_out=HELD_OUT):
    if styles < 2 or contents < 2:
        raise ArgumentError("A dataset needs at least 2 styles and 2 contents, but you entered %d and %d." % (styles, contents))
    if contents > len(content_catalog()):
        raise ArgumentError("At most %d contents are available, but you entered %d." % (len(content_catalog()), contents))
    reserved = held_out_pairs(styles, contents, held_out, seed)
    skip = set(reserved)
    pairs = [(s, c) for c in range(contents) for s in range(styles) if (s, c) not in skip]
    jobs = [(i, 'image') + pairs[i % len(pairs)] + (1, seed) for i in range(n_img)]
    # Videos are plain-style only.
    jobs += [(n_img + j, 'video', 0, j % contents, frames, seed) for j in range(n_vid)]
    split_rng = np.random.default_rng([seed, 1])
    val = set(split_rng.permutation(n_img)[:n_img // 10].tolist())
    val |= set((n_img + split_rng.permutation(n_vid)[:n_vid // 10]).tolist())
    sample_dir = os.path.join(out, 'samples')
    os.makedirs(sample_dir, exist_ok=True)
    records = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for job, (rendering, tokens) in zip(jobs, pool.map(_render_sample, jobs)):
            sid, kind, style_id, content_id = job[:4]
            record = {'id': sid, 'kind': kind, 'split': 'val' if sid in val else 'train',
                      'style_id': style_id, 'content_id': content_id,
                      'tokens': 'samples/%06d_tokens.sct' % sid, 'pixels': 'samples/%06d_pixels.sct' % sid}
            write_tensor(os.path.join(out, record['tokens']), 'tokens', tokens.astype(np.float32))
            if kind == 'image':
                write_tensor(os.path.join(out, record['pixels']), 'pixels', rendering.frames[0])
            else:
                write_tensor(os.path.join(out, record['pixels']), 'pixels', rendering.frames)
                record['flow'] = 'samples/%06d_flow.sct' % sid
                record['occlusion'] = 'samples/%06d_occlusion.sct' % sid
                record['surfaces'] = 'samples/%06d_surfaces.sct' % sid
                write_tensor(os.path.join(out, record['flow']), 'flow', rendering.flow)
                write_tensor(os.path.join(out, record['occlusion']), 'occlusion', rendering.occluded.astype(np.float32))
                write_tensor(os.path.join(out, record['surfaces']), 'surfaces', rendering.ids.astype(np.float32))
            records.append(record)
            if len(records) % 500 == 0:
                logger.info("Rendered %d of %d samples." % (len(records), len(jobs)))
    dims = {'canvas': CANVAS, 'crop': CROP, 'frames': frames, 'styles': styles, 'contents': contents,
            'vocab': labels.VOCAB_SIZE, 'prompt_length': labels.PROMPT_LENGTH}
    write_json(os.path.join(out, 'manifest.json'), {'version': 1, 'seed': seed, 'dims': dims,
                                                     'held_out': [list(p) for p in reserved], 'samples': records})
    logger.info("Wrote %d images and %d videos to %s." % (n_img, n_vid, out))
    return out


class StyleDataset(object):

    def __init__(self, directory):
        self.directory = directory
        manifest = read_json(os.path.join(directory, 'manifest.json'))
        self.dims = dict(manifest['dims'])
        self.seed = manifest.get('seed', 0)
        self.held_out = [tuple(p) for p in manifest.get('held_out', [])]
        self.table = pd.DataFrame(manifest['samples'])
        self._cache = {}

    @property
    def styles(self):
        return self.dims['styles']

    @property
    def contents(self):
        return self.dims['contents']

    def _read(self, path):
        return read_tensor(os.path.join(self.directory, path))[1]

    def select(self, kind, split=None, style_ids=None):
        rows = self.table[self.table.kind == kind]
        if split is not None:
            rows = rows[rows.split == split]
        if style_ids is not None:
            rows = rows[rows.style_id.isin(list(style_ids))]
        return rows

    def images(self, split='train', style_ids=None):
        key = ('image', split, None if style_ids is None else tuple(style_ids))
        if key not in self._cache:
            rows = self.select('image', split, style_ids)
            self._cache[key] = {
                'canvas': np.stack([self._read(p) for p in rows.pixels]) if len(rows) else np.zeros((0, CANVAS, CANVAS, 3), np.float32),
                'tokens': np.stack([self._read(p) for p in rows.tokens]).astype(np.int64) if len(rows) else np.zeros((0, labels.PROMPT_LENGTH), np.int64),
                'style_id': rows.style_id.values.astype(np.int64),
                'content_id': rows.content_id.values.astype(np.int64),
                'id': rows['id'].values.astype(np.int64)}
        return self._cache[key]

    def videos(self, split='train', style_ids=(0,)):
        """Videos at crop resolution with their downsampled flow and occlusion."""
        key = ('video', split, None if style_ids is None else tuple(style_ids))
        if key not in self._cache:
            rows = self.select('video', split, style_ids)
            frames, flows, masks, first = [], [], [], []
            for _, row in rows.iterrows():
                fine = self._read(row.pixels)
                surfaces = self._read(row.surfaces).astype(np.int64)
                flow, occluded = downsample_motion(self._read(row.flow), self._read(row.occlusion) > 0.5,
                                                   surfaces[:-1], CANVAS // CROP)
                frames.append(resize_area(fine, CROP))
                first.append(fine[0])
                flows.append(flow.astype(np.float32))
                masks.append(occluded)
            self._cache[key] = {
                'frames': np.stack(frames) if frames else np.zeros((0, self.dims['frames'], CROP, CROP, 3), np.float32),
                'flow': np.stack(flows) if flows else None,
                'occluded': np.stack(masks) if masks else None,
                'first': np.stack(first) if first else np.zeros((0, CANVAS, CANVAS, 3), np.float32),
                'tokens': np.stack([self._read(p) for p in rows.tokens]).astype(np.int64) if len(rows) else np.zeros((0, labels.PROMPT_LENGTH), np.int64),
                'style_id': rows.style_id.values.astype(np.int64),
                'content_id': rows.content_id.values.astype(np.int64),
                'id': rows['id'].values.astype(np.int64)}
        return self._cache[key]


def image_batch(images, index, rng, augment=True, references=1):
    """Targets, style references (B, R, 32, 32, 3) and tokens for the chosen image rows."""
    targets, refs, offsets = [], [], []
    for i in index:
        crops = [decoupled_crops(images['canvas'][i], rng, augment) for _ in range(references)]
        targets.append(crops[0].target)
        refs.append(np.stack([c.style_ref for c in crops]))
        offsets.append([c.offset for c in crops])
    return {'target': np.stack(targets), 'style_ref': np.stack(refs), 'offsets': offsets,
            'tokens': images['tokens'][index], 'style_id': images['style_id'][index],
            'content_id': images['content_id'][index]}


def video_batch(videos, index, rng=None, augment=True):
    """Frames and tokens; with rng, each video also gets a style crop of its own first canvas."""
    batch = {'target': videos['frames'][index], 'tokens': videos['tokens'][index],
             'style_id': videos['style_id'][index], 'content_id': videos['content_id'][index]}
    if rng is not None:
        batch['style_ref'] = np.stack([decoupled_crops(videos['first'][i], rng, augment).style_ref for i in index])[:, None]
    return batch


def linear_style_probe(styles=8, contents=16, n=1200, seed=0, test_fraction=0.25):
    """Held-out style accuracy of a linear classifier on raw style crops."""
    rng = np.random.default_rng([seed, 3])
    x, y = [], []
    for i in range(n):
        style_id = i % styles
        content = ContentSpec.from_id(int(rng.integers(0, contents)), rng)
        canvas = render(StyleSpec.from_id(style_id, seed), content, 1, seed=seed + i).frames[0]
        x.append(decoupled_crops(canvas, rng).style_ref.reshape(-1))
        y.append(style_id)
    x, y = np.array(x), np.array(y)
    order = rng.permutation(n)
    cut = int(n * (1 - test_fraction))
    train, test = order[:cut], order[cut:]
    clf = LogisticRegression(max_iter=2000).fit(x[train], y[train])
    return accuracy_score(y[test], clf.predict(x[test]))
