#!/usr/bin/python3

"""
Style adapter: a small patch encoder standing in for a frozen image
encoder, a query transformer that compresses reference tokens into N style
rows, and the scale predictor that weighs the style branch per layer.
"""

import numpy as np

from stylecraft import tensor as T
from stylecraft.config import EXTRACTORS
from stylecraft.errors import ArgumentError, ConfigurationError, ShapeError
from stylecraft.utils.layers import Attention, LayerNorm, Linear, Module, QueryBlock, TransformerBlock


class ImageTokens(object):

    def __init__(self, global_token, local_tokens):
        self.global_token = global_token
        self.local_tokens = local_tokens

    def sequence(self):
        return T.concat([self.global_token, self.local_tokens], axis=1)


class StyleEmbedding(object):

    def __init__(self, rows, source_count=1):
        self.rows = rows
        self.source_count = source_count

    @property
    def shape(self):
        return self.rows.shape


def patchify(images, patch):
    """(B, H, W, C) pixels -> (B, H/p * W/p, p*p*C) row-major patches."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class PatchEncoder(Module):

    def __init__(self, rng, image_size, patch, width, heads, layers=2):
        self.image_size = image_size
        self.patch = patch
        grid = (image_size // patch) ** 2
        self.patch_embed = Linear(rng, patch * patch * 3, width)
        self.position = T.Parameter(rng.normal(0.0, 0.02, size=(grid, width)))
        self.pool_token = T.Parameter(rng.normal(0.0, 0.02, size=(1, width)))
        self.blocks = [TransformerBlock(rng, width, heads) for _ in range(layers)]
        self.norm = LayerNorm(width)

    def embed_patches(self, images):
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeError("Reference images must be (B, %d, %d, 3), got %s." % (self.image_size, self.image_size, images.shape))
        return self.patch_embed(T.Tensor(patchify(images, self.patch)))

    def __call__(self, images):
        local = self.embed_patches(images) + self.position
        pool = T.expand(self.pool_token, 0, local.shape[0])
        x = T.concat([pool, local], axis=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return ImageTokens(T.slice_axis(x, 1, 0, 1), T.slice_axis(x, 1, 1, x.shape[1]))


class QueryTransformer(Module):

    def __init__(self, rng, width, heads, queries, blocks=2):
        self.queries = T.Parameter(rng.normal(0.0, 0.02, size=(queries, width)))
        self.blocks = [QueryBlock(rng, width, heads) for _ in range(blocks)]
        self.norm = LayerNorm(width)

    def __call__(self, context):
        x = T.expand(self.queries, 0, context.shape[0])
        for block in self.blocks:
            x = block(x, context)
        return self.norm(x)


class TransformerExtractor(Module):
    """Self-attention over the reference tokens; the first N outputs are the style rows."""

    def __init__(self, rng, width, heads, queries, blocks=2):
        self.queries = queries
        self.blocks = [TransformerBlock(rng, width, heads) for _ in range(blocks)]
        self.norm = LayerNorm(width)

    def __call__(self, context):
        if context.shape[1] < self.queries:
            raise ConfigurationError("The transformer extractor needs at least %d tokens, got %d." % (self.queries, context.shape[1]))
        x = context
        for block in self.blocks:
            x = block(x)
        return self.norm(T.slice_axis(x, 1, 0, self.queries))


class MLPExtractor(Module):
    """Mean-pooled tokens through a two-layer MLP, reshaped to N rows."""

    def __init__(self, rng, width, heads, queries, blocks=2):
        self.queries = queries
        self.width = width
        self.hidden = Linear(rng, width, 2 * width)
        self.out = Linear(rng, 2 * width, queries * width)
        self.norm = LayerNorm(width)

    def __call__(self, context):
        pooled = T.reduce_mean(context, axis=1)
        rows = self.out(T.gelu(self.hidden(pooled)))
        return self.norm(T.reshape(rows, (context.shape[0], self.queries, self.width)))


def build_extractor(rng, variant, width, heads, queries, blocks=2):
    kinds = {'qformer': QueryTransformer, 'transformer': TransformerExtractor, 'mlp': MLPExtractor}
    if variant not in kinds:
        raise ConfigurationError("Extractor must be %s, but you entered %s." % (', '.join(EXTRACTORS), variant))
    return kinds[variant](rng, width, heads, queries, blocks)


class ScalePredictor(Module):

    def __init__(self, rng, width, heads, layers, blocks=2):
        self.factor_query = T.Parameter(rng.normal(0.0, 0.02, size=(1, width)))
        self.blocks = [QueryBlock(rng, width, heads) for _ in range(blocks)]
        self.norm = LayerNorm(width)
        self.scale_proj = Linear(rng, width, layers)
        # Untrained predictor behaves like fixed-scale fusion.
        self.scale_proj.bias.data[...] = 1.0

    def __call__(self, text_emb, style_emb):
        context = T.concat([text_emb, style_emb], axis=1)
        x = T.expand(self.factor_query, 0, context.shape[0])
        for block in self.blocks:
            x = block(x, context)
        s = self.scale_proj(self.norm(x))
        return T.reshape(s, (s.shape[0], s.shape[2]))


class FusionLayer(Module):
    """Adapter-owned half of a fused layer: style cross-attention and its layer norm."""

    def __init__(self, rng, width, heads):
        self.style_attn = Attention(rng, width, heads)
        self.norm = LayerNorm(width)

    def __call__(self, x, style_rows):
        return self.norm(self.style_attn(x, style_rows))


class StyleAdapter(Module):

    def __init__(self, rng, config):
        self.variant = config.extractor
        self.encoder = PatchEncoder(rng, config.image_size, config.patch, config.width, config.heads, config.encoder_layers)
        self.extractor = build_extractor(rng, config.extractor, config.width, config.heads, config.style_queries, config.qformer_blocks)
        self.scale_predictor = ScalePredictor(rng, config.width, config.heads, config.layers)
        self.fusion = [FusionLayer(rng, config.width, config.heads) for _ in range(config.layers)]

    def encode_reference(self, images):
        return self.encoder(images)

    def extract_style(self, tokens):
        """One ImageTokens or a list of them; several references are concatenated along the key axis."""
        if isinstance(tokens, ImageTokens):
            tokens = [tokens]
        if not tokens:
            raise ArgumentError("extract_style needs at least one reference.")
        context = T.concat([t.sequence() for t in tokens], axis=1) if len(tokens) > 1 else tokens[0].sequence()
        return StyleEmbedding(self.extractor(context), len(tokens))

    def predict_scales(self, text_emb, style_emb):
        rows = style_emb.rows if isinstance(style_emb, StyleEmbedding) else style_emb
        return self.scale_predictor(text_emb, rows)

    def __call__(self, references):
        """references: (B, R, H, W, 3) pixels -> StyleEmbedding from R references per sample."""
        references = np.asarray(references)
        if references.ndim == 4:
            references = references[:, None]
        if references.ndim != 5 or references.shape[1] == 0:
            raise ArgumentError("References must be (B, R, H, W, 3) with R >= 1, got %s." % (references.shape,))
        return self.extract_style([self.encode_reference(references[:, r]) for r in range(references.shape[1])])
