#!/usr/bin/python3

import logging

import numpy as np

from stylecraft import tensor as T
from stylecraft.adapter import StyleAdapter, StyleEmbedding
from stylecraft.backbone import Denoiser
from stylecraft.config import ModelConfig
from stylecraft.errors import ShapeError
from stylecraft.utils.layers import Linear, Module

logger = logging.getLogger(__name__)


class Autoencoder(Module):
    """Two stride-2 convolutions down to (h/4, w/4, c) latents; upsample + 3x3 convolutions back."""

    def __init__(self, rng, channels, width=32):
        self.down1 = Linear(rng, 4 * 4 * 3, width)
        self.down2 = Linear(rng, 4 * 4 * width, channels)
        self.up1 = Linear(rng, 3 * 3 * channels, width)
        self.up2 = Linear(rng, 3 * 3 * width, 3)
        self.latent_scale = 1.0

    def encode(self, images):
        x = T.as_tensor(images)
        x = T.gelu(self.down1(T.unfold2d(x, 4, stride=2, padding=1)))
        return self.down2(T.unfold2d(x, 4, stride=2, padding=1))

    def decode(self, latents):
        x = T.gelu(self.up1(T.unfold2d(T.upsample2x(T.as_tensor(latents)), 3, padding=1)))
        return self.up2(T.unfold2d(T.upsample2x(x), 3, padding=1))

    def reconstruction_loss(self, images):
        return T.mse(self.decode(self.encode(images)), images)


class Conditioning(object):
    """Everything one denoise branch needs besides (z_t, t)."""

    def __init__(self, text, style=None, scales=None, keep_style=None):
        self.text = text
        self.style = style
        self.scales = scales
        self.keep_style = keep_style


class StyleCrafter(Module):

    def __init__(self, config=None, seed=0):
        self.config = config if config is not None else ModelConfig()
        rng = np.random.default_rng(seed)
        self.autoencoder = Autoencoder(rng, self.config.latent_channels, self.config.autoencoder_width)
        self.backbone = Denoiser(rng, self.config)
        self.adapter = StyleAdapter(rng, self.config)

    def partition(self):
        """Parameter names per top-level group."""
        groups = {'autoencoder': [], 'backbone.spatial': [], 'backbone.temporal': [], 'adapter': []}
        for name, _ in self.named_parameters():
            for group in groups:
                if name.startswith(group + '.'):
                    groups[group].append(name)
        return groups

    #=================================================================#
    # Pixels <-> latents
    #=================================================================#

    def encode_pixels(self, pixels):
        """(B, T, H, W, 3) or (B, H, W, 3) pixels -> (B, T, h, w, c) scaled latents, no gradient."""
        pixels = np.asarray(pixels)
        if pixels.ndim == 4:
            pixels = pixels[:, None]
        b, frames = pixels.shape[:2]
        size = self.config.image_size
        if pixels.shape[2:] != (size, size, 3):
            raise ShapeError("Pixels must be %dx%dx3, got %s." % (size, size, pixels.shape[2:]))
        with T.no_grad():
            z = self.autoencoder.encode(pixels.reshape((b * frames,) + pixels.shape[2:])).data
        z = z * self.autoencoder.latent_scale
        return z.reshape((b, frames) + z.shape[1:])

    def decode_latents(self, latents):
        latents = np.asarray(latents)
        b, frames = latents.shape[:2]
        with T.no_grad():
            x = self.autoencoder.decode(latents.reshape((b * frames,) + latents.shape[2:]) / self.autoencoder.latent_scale).data
        return np.clip(x, 0.0, 1.0).reshape((b, frames) + x.shape[1:])

    def latent_shape(self, frames=1):
        return (frames, self.config.latent_size, self.config.latent_size, self.config.latent_channels)

    #=================================================================#
    # Conditioning and denoising
    #=================================================================#

    def condition(self, tokens, references=None, batch=None, keep_text=None, keep_style=None):
        """
        Build F_t, F_s and s. tokens None is the null text; references
        (B, R, H, W, 3) pixels, a StyleEmbedding, or None for no style.
        """
        if batch is None:
            batch = len(tokens) if tokens is not None else len(references)
        text = self.backbone.text_embedding(tokens, batch, keep_text)
        if references is None:
            return Conditioning(text)
        style = references if isinstance(references, StyleEmbedding) else self.adapter(references)
        mode = self.config.fusion_mode
        scales = None
        if mode == 'dual':
            scales = self.adapter.predict_scales(text, style)
        elif mode == 'dual_fixed_scale':
            scales = T.Tensor(np.ones((batch, self.config.layers)))
        return Conditioning(text, style.rows, scales, keep_style)

    def denoise(self, z, t, cond, scale_override=None):
        scales = cond.scales
        if scale_override is not None and cond.style is not None:
            scales = T.Tensor(np.broadcast_to(np.asarray(scale_override, dtype=np.float64), (z.shape[0], self.config.layers)).copy())
        return self.backbone(z, t, cond.text, cond.style, scales, self.adapter.fusion, cond.keep_style)

    def __call__(self, z, t, tokens=None, references=None, keep_text=None, keep_style=None, scale_override=None):
        cond = self.condition(tokens, references, batch=np.shape(z)[0], keep_text=keep_text, keep_style=keep_style)
        return self.denoise(z, t, cond, scale_override)

    def style_embedding(self, references):
        with T.no_grad():
            return self.adapter(references)

    def scale_factors(self, tokens, references):
        with T.no_grad():
            cond = self.condition(tokens, references)
        return None if cond.scales is None else cond.scales.data
