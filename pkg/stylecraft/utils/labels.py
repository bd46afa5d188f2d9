#!/usr/bin/python3

import numpy as np
from matplotlib import colors as mcolors

from stylecraft.errors import ArgumentError

# Shape vocabulary.
KINDS = ['circle', 'square', 'triangle', 'star']

# Token ids: PAD, shape kinds, horizontal half, vertical half, motion sign pairs.
PAD = 0
KIND_TOKENS = {k: 1 + i for i, k in enumerate(KINDS)}
X_TOKENS = {0: 5, 1: 6}
Y_TOKENS = {0: 7, 1: 8}
MOTION_BASE = 9
VOCAB_SIZE = 18
SHAPES_PER_PROMPT = 2
TOKENS_PER_SHAPE = 4
PROMPT_LENGTH = SHAPES_PER_PROMPT * TOKENS_PER_SHAPE

# Hand-picked palettes: background, secondary, then object colours.
PALETTES = {0: ['#B4B4B4', '#9C9C9C', '#3A6EA5', '#C0504D', '#9BBB59'],
            1: ['#F2E8CF', '#1D3557', '#E63946', '#457B9D', '#2A9D8F'],
            2: ['#0B0C10', '#1F2833', '#66FCF1', '#FF00FF', '#C5F900'],
            3: ['#FFF1E6', '#F8C8DC', '#7FB7BE', '#D88C9A', '#8E7DBE'],
            4: ['#704214', '#A67B5B', '#F4E1C1', '#E0C097', '#3E2723'],
            5: ['#FFFFFF', '#000000', '#DD0100', '#225095', '#FAC901'],
            6: ['#1B4332', '#2D6A4F', '#D8F3DC', '#95D5B2', '#F4A261'],
            7: ['#FF7B00', '#FFB700', '#3D0066', '#7B2CBF', '#FFFFFF']}

STYLE_NAMES = {0: 'plain', 1: 'ukiyo', 2: 'neon', 3: 'pastel', 4: 'sepia', 5: 'mondrian', 6: 'forest', 7: 'sunset'}

BACKGROUNDS = ['flat', 'gradient', 'hatched']


def motion_token(vx, vy):
    return MOTION_BASE + (int(np.sign(vx)) + 1) * 3 + (int(np.sign(vy)) + 1)


def palette(style_id):
    if style_id in PALETTES:
        return [mcolors.to_rgb(c) for c in PALETTES[style_id]]
    # Beyond the named styles: evenly spaced hues with alternating value.
    hue = (style_id * 0.618033988749895) % 1.0
    rows = []
    for i, (dh, s, v) in enumerate([(0.0, 0.25, 0.95), (0.5, 0.35, 0.35), (0.1, 0.9, 0.85), (0.3, 0.8, 0.6), (0.6, 0.7, 0.9)]):
        rows.append(tuple(mcolors.hsv_to_rgb(((hue + dh) % 1.0, s, v)).tolist()))
    return rows


def style_name(style_id):
    return STYLE_NAMES.get(style_id, 'style%d' % style_id)


def encode_prompt(shapes, video=False):
    """Content tokens for a list of (kind, center, velocity); style never enters."""
    if not shapes or len(shapes) > SHAPES_PER_PROMPT:
        raise ArgumentError("A prompt holds 1 to %d shapes, but you entered %d." % (SHAPES_PER_PROMPT, len(shapes)))
    tokens = []
    for kind, center, velocity in shapes:
        vx, vy = velocity if video else (0, 0)
        tokens += [KIND_TOKENS[kind], X_TOKENS[int(center[0] >= 32)], Y_TOKENS[int(center[1] >= 32)], motion_token(vx, vy)]
    tokens += [PAD] * (PROMPT_LENGTH - len(tokens))
    return np.array(tokens, dtype=np.int64)


def decode_prompt(tokens):
    inverse = {v: k for k, v in KIND_TOKENS.items()}
    words = []
    for i in range(0, len(tokens), TOKENS_PER_SHAPE):
        chunk = [int(t) for t in tokens[i:i + TOKENS_PER_SHAPE]]
        if chunk[0] == PAD:
            continue
        m = chunk[3] - MOTION_BASE
        words.append('%s %s-%s %+d,%+d' % (inverse[chunk[0]], 'top' if chunk[2] == Y_TOKENS[0] else 'bottom',
                                          'left' if chunk[1] == X_TOKENS[0] else 'right', m // 3 - 1, m % 3 - 1))
    return '; '.join(words)


def prompt_length(tokens):
    return int(np.count_nonzero(np.asarray(tokens) != PAD))


def parse_prompt(text):
    """Inverse of the CLI form "4 5 7 13" (space-separated token ids)."""
    try:
        tokens = [int(t) for t in text.replace(',', ' ').split()]
    except ValueError:
        raise ArgumentError("Content must be space-separated token ids, but you entered %s." % text)
    if len(tokens) > PROMPT_LENGTH or any(t < 0 or t >= VOCAB_SIZE for t in tokens):
        raise ArgumentError("Content tokens must be at most %d ids in [0, %d)." % (PROMPT_LENGTH, VOCAB_SIZE))
    return np.array(tokens + [PAD] * (PROMPT_LENGTH - len(tokens)), dtype=np.int64)
