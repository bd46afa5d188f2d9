#!/usr/bin/python3

"""
Latent denoiser. Each of the L blocks runs spatial self-attention, the
text/style fusion, temporal self-attention across frames and an MLP.
Parameters split into `spatial` (everything frame-local, text cross-attention
included) and `temporal` (cross-frame attention and frame positions).
"""

import numpy as np

from stylecraft import tensor as T
from stylecraft.utils.layers import Attention, FeedForward, LayerNorm, Linear, Module, sinusoidal


class SpatialBlock(Module):

    def __init__(self, rng, width, heads):
        self.norm_self = LayerNorm(width)
        self.self_attn = Attention(rng, width, heads)
        self.norm_cross = LayerNorm(width)
        self.text_attn = Attention(rng, width, heads)
        self.norm_ff = LayerNorm(width)
        self.ff = FeedForward(rng, width)


class TemporalBlock(Module):
    """Attention along the frame axis; the zero output projection makes a fresh block a residual no-op."""

    def __init__(self, rng, width, heads):
        self.norm = LayerNorm(width)
        self.attn = Attention(rng, width, heads, zero_output=True)


class Spatial(Module):

    def __init__(self, rng, config):
        d = config.width
        self.patch_embed = Linear(rng, config.latent_channels, d)
        self.position = T.Parameter(rng.normal(0.0, 0.02, size=(config.latent_size ** 2, d)))
        self.time_hidden = Linear(rng, d, d)
        self.time_out = Linear(rng, d, d)
        self.text_embed = T.Parameter(rng.normal(0.0, 0.02, size=(config.vocab_size, d)))
        self.text_position = T.Parameter(rng.normal(0.0, 0.02, size=(config.text_length, d)))
        self.null_text = T.Parameter(rng.normal(0.0, 0.02, size=(config.text_length, d)))
        self.blocks = [SpatialBlock(rng, d, config.heads) for _ in range(config.layers)]
        self.norm_out = LayerNorm(d)
        self.output = Linear(rng, d, config.latent_channels)


class Temporal(Module):

    def __init__(self, rng, config):
        self.frame_position = T.Parameter(rng.normal(0.0, 0.02, size=(config.max_frames, config.width)))
        self.blocks = [TemporalBlock(rng, config.width, config.heads) for _ in range(config.layers)]


def fuse_dual(block, fusion, x, text, style, scale):
    """
    TCA(x, F_t) + s * LN(SCA(x, F_s)).

    x is the normed layer input (N, tokens, d); scale is one entry per row of x.
    """
    out = block.text_attn(x, text)
    if style is None:
        return out
    return out + T.mul(fusion(x, style), scale)


def fuse_attach_to_text(block, x, text, style, style_mask=None):
    """One cross-attention over [F_t | F_s]; style_mask (N,) marks rows whose style keys are hidden."""
    if style is None:
        return block.text_attn(x, text)
    context = T.concat([text, style], axis=1)
    mask = None
    if style_mask is not None and np.any(style_mask):
        heads = block.text_attn.heads
        mask = np.zeros((x.shape[0], heads, x.shape[1], context.shape[1]))
        mask[np.asarray(style_mask, dtype=bool), :, :, text.shape[1]:] = -np.inf
    return block.text_attn(x, context, mask=mask)


def temporal_self_attention(block, x, frames, positions=None):
    """
    x: (B*T, tokens, d) in frame-major order. Attention runs over T for
    every spatial token; positions (T, d) are added to queries and keys only.
    """
    bt, n, d = x.shape
    b = bt // frames
    h = T.transpose(T.reshape(x, (b, frames, n, d)), (0, 2, 1, 3))
    h = T.reshape(h, (b * n, frames, d))
    v = block.norm(h)
    q = v if positions is None else v + positions
    out = T.reshape(block.attn(q, q, value=v), (b, n, frames, d))
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bt, n, d))
    return x + out


def _per_frame(x, frames):
    """Repeat (B, ...) conditioning for every frame: (B*T, ...)."""
    if frames == 1:
        return x
    e = T.expand(x, 1, frames)
    return T.reshape(e, (x.shape[0] * frames,) + x.shape[1:])


class Denoiser(Module):

    def __init__(self, rng, config):
        self.config = config
        self.spatial = Spatial(rng, config)
        self.temporal = Temporal(rng, config)

    def text_embedding(self, tokens, batch, keep=None):
        """F_t for token ids (B, Lt); tokens None or keep False selects the learned null rows."""
        null = T.expand(self.spatial.null_text, 0, batch)
        if tokens is None:
            return null
        tokens = np.asarray(tokens, dtype=np.int64)
        emb = T.embedding(self.spatial.text_embed, tokens) + self.spatial.text_position
        if keep is None:
            return emb
        return T.where(np.asarray(keep, dtype=bool), emb, null)

    def time_embedding(self, t):
        t = np.asarray(t)
        base = T.Tensor(sinusoidal(t, self.config.width))
        return self.spatial.time_out(T.gelu(self.spatial.time_hidden(base)))

    def __call__(self, z, t, text, style=None, scales=None, fusion=None, keep_style=None):
        """
        z: (B, T, h, w, c) latents; t: (B,) steps; text: (B, Lt, d) F_t;
        style: (B, N, d) F_s or None; scales: (B, L) or None (treated as ones);
        fusion: the adapter's per-layer FusionLayer list; keep_style: (B,) or None.
        """
        z = T.as_tensor(z)
        b, frames, hh, ww, c = z.shape
        n = hh * ww
        mode = self.config.fusion_mode
        x = self.spatial.patch_embed(T.reshape(z, (b * frames, n, c))) + self.spatial.position
        temb = _per_frame(self.time_embedding(t), frames)
        x = x + T.expand(temb, 1, n)
        text = _per_frame(text, frames)
        if style is not None:
            style = _per_frame(style, frames)
        keep = None if keep_style is None else np.repeat(np.asarray(keep_style, dtype=bool), frames)
        positions = None
        if self.config.frame_position:
            positions = T.slice_axis(self.temporal.frame_position, 0, 0, frames)
        for i, (block, tblock) in enumerate(zip(self.spatial.blocks, self.temporal.blocks)):
            x = x + block.self_attn(block.norm_self(x))
            h = block.norm_cross(x)
            if mode == 'attach_to_text':
                hidden = None if keep is None else ~keep
                x = x + fuse_attach_to_text(block, h, text, style, hidden)
            else:
                scale = None
                if style is not None:
                    if scales is None:
                        scale = T.Tensor(np.ones(b * frames))
                    else:
                        scale = _per_frame(T.reshape(T.slice_axis(scales, 1, i, i + 1), (b,)), frames)
                    if keep is not None:
                        scale = T.mul(scale, keep.astype(np.float64))
                x = x + fuse_dual(block, fusion[i] if fusion is not None else None, h, text, style, scale)
            x = temporal_self_attention(tblock, x, frames, positions)
            x = x + block.ff(block.norm_ff(x))
        out = self.spatial.output(self.spatial.norm_out(x))
        return T.reshape(out, (b, frames, hh, ww, c))
