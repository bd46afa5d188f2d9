#!/usr/bin/python3

import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.colors import Normalize
from matplotlib.patches import Rectangle
from scipy.stats import spearmanr

from stylecraft.datagen import ContentSpec, reference_crops
from stylecraft.utils import labels

logger = logging.getLogger(__name__)


def _style_plots():
    matplotlib.rcParams['axes.titlesize'] = 16
    matplotlib.rcParams['axes.labelsize'] = 14
    matplotlib.rcParams['font.size'] = 10
    matplotlib.rcParams['svg.hashsalt'] = 'stylecraft'


class Explore(object):

    def __init__(self, model, styles=8, contents=12, refs_per_style=1, seed=0):
        self.model = model
        self.styles = styles
        self.contents = contents
        self.seed = seed
        rng = np.random.default_rng([seed, 29])
        self.prompts = [ContentSpec.from_id(c, rng).tokens() for c in range(contents)]
        self.references = [reference_crops(s, refs_per_style, seed=seed + 1000) for s in range(styles)]
        self.table = None

    def scale_factor_table(self):
        """s for every (prompt, style, layer); one row per layer entry."""
        rows = []
        tokens = np.stack(self.prompts)
        for s in range(self.styles):
            refs = np.repeat(self.references[s][None], len(tokens), axis=0)
            scales = self.model.scale_factors(tokens, refs)
            if scales is None:
                scales = np.ones((len(tokens), self.model.config.layers))
            for p in range(len(tokens)):
                for layer, value in enumerate(scales[p]):
                    rows.append({'prompt': p, 'style': s, 'layer': layer, 'scale': float(value),
                                 'prompt_length': labels.prompt_length(tokens[p]),
                                 'prompt_text': labels.decode_prompt(tokens[p])})
        self.table = pd.DataFrame(rows)
        return self.table

    def prompt_length_correlation(self):
        table = self.table if self.table is not None else self.scale_factor_table()
        return prompt_length_correlation(table)

    def plot_scales(self, savepath):
        table = self.table if self.table is not None else self.scale_factor_table()
        return plot_scales(table, savepath)


def prompt_length_correlation(table):
    """Spearman correlation between prompt length and the mean scale of each (prompt, style) pair."""
    means = table.groupby(['prompt', 'style']).agg({'scale': 'mean', 'prompt_length': 'first'})
    if means.prompt_length.nunique() < 2:
        return float('nan'), float('nan')
    rho, p = spearmanr(means.prompt_length.values, means.scale.values)
    return float(rho), float(p)


def plot_scales(table, savepath):
    """Heatmap of s: one row per (prompt, style) pair, one column per layer, one tagged cell each."""
    _style_plots()
    pairs = table[['prompt', 'style']].drop_duplicates().values.tolist()
    layers = int(table.layer.max()) + 1
    norm = Normalize(vmin=table.scale.min(), vmax=max(table.scale.max(), table.scale.min() + 1e-6))
    cmap = plt.get_cmap('viridis')
    fig, ax = plt.subplots(figsize=(2 + 0.4 * layers, 1 + 0.15 * len(pairs)))
    for r, (p, s) in enumerate(pairs):
        cells = table[(table.prompt == p) & (table.style == s)]
        for _, cell in cells.iterrows():
            rect = Rectangle((cell.layer, r), 1, 1, facecolor=cmap(norm(cell.scale)), edgecolor='none')
            rect.set_gid('scale_p%d_s%d_l%d' % (p, s, cell.layer))
            ax.add_patch(rect)
    ax.set_xlim(0, layers)
    ax.set_ylim(len(pairs), 0)
    ax.set_xlabel("Layer")
    ax.set_ylabel("(prompt, style)")
    ax.set_yticks([])
    fig.colorbar(plt.cm.ScalarMappable(norm=norm, cmap=cmap), ax=ax, label="scale factor")
    fig.savefig(savepath, bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    return savepath


def contact_sheet(images, savepath, titles=None, columns=8):
    """images: (N, H, W, 3) or (N, T, H, W, 3); videos show their first and last frame side by side."""
    images = np.asarray(images)
    if images.ndim == 5:
        images = np.concatenate([images[:, 0], images[:, -1]], axis=2)
    n = len(images)
    rows = max(1, int(np.ceil(n / float(columns))))
    fig, axes = plt.subplots(rows, columns, figsize=(1.5 * columns, 1.5 * rows), squeeze=False)
    for i, ax in enumerate(axes.reshape(-1)):
        ax.axis('off')
        if i < n:
            ax.imshow(np.clip(images[i], 0.0, 1.0), interpolation='nearest')
            if titles is not None:
                ax.set_title(titles[i], fontsize=6)
    fig.savefig(savepath, dpi=100, bbox_inches='tight', metadata={'Software': None})
    plt.close(fig)
    return savepath


def save_png(image, savepath):
    plt.imsave(savepath, np.clip(np.asarray(image), 0.0, 1.0), metadata={'Software': None})
    return savepath


def plot_loss(loss_csv, savepath):
    _style_plots()
    log = pd.read_csv(loss_csv)
    fig, ax = plt.subplots(figsize=(8, 5))
    for key, grp in log.groupby('stage', sort=False):
        grp.plot(ax=ax, kind='line', x='step', y='loss', linewidth=2, label=key)
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    ax.set_yscale('log')
    fig.savefig(savepath, bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    return savepath
