#!/usr/bin/python3

"""
Forward noising, the noise-prediction objective with condition dropout,
three-term guidance and the deterministic DDIM sampler.
"""

import logging

import numpy as np

from stylecraft import tensor as T
from stylecraft.config import GuidanceConfig
from stylecraft.errors import ArgumentError, ScheduleError, ShapeError

logger = logging.getLogger(__name__)


class NoiseSchedule(object):

    def __init__(self, steps=1000, beta_start=1e-4, beta_end=2e-2):
        self.steps = steps
        self.betas = np.linspace(beta_start, beta_end, steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def check(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.steps):
            raise ScheduleError("Diffusion step must be in [0, %d), but you entered %s." % (self.steps, t.tolist()))
        return t.astype(np.int64)

    def sampling_steps(self, n=50):
        """n train steps spread from the noisiest to step 0, descending."""
        if n < 1 or n > self.steps:
            raise ScheduleError("Sampling steps must be in [1, %d], but you entered %d." % (self.steps, n))
        return np.unique(np.round(np.linspace(0, self.steps - 1, n)).astype(np.int64))[::-1]


def _per_sample(values, ndim):
    values = np.asarray(values)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample(x0, t, noise, schedule=None):
    schedule = schedule or NoiseSchedule()
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ShapeError("Noise of shape %s does not match latents %s." % (noise.shape, x0.shape))
    t = schedule.check(t)
    ab = schedule.alpha_bar[t]
    if t.ndim:
        ab = _per_sample(ab, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(x0.dtype)


def condition_masks(batch, guidance, rng):
    """Independent per-sample keep flags for text and style."""
    keep_text = rng.random(batch) >= guidance.drop_text_p
    keep_style = rng.random(batch) >= guidance.drop_style_p
    return keep_text, keep_style


def training_loss(batch, model, guidance, rng, schedule=None, stats=None):
    """
    MSE between predicted and true noise. batch holds 'latent' (B, T, h, w, c),
    'tokens' (B, Lt) and optionally 'style_ref' (B, R, H, W, 3).
    """
    schedule = schedule or NoiseSchedule()
    x0 = np.asarray(batch['latent'])
    b = x0.shape[0]
    t = rng.integers(0, schedule.steps, size=b)
    noise = rng.standard_normal(x0.shape).astype(x0.dtype)
    z = q_sample(x0, t, noise, schedule)
    keep_text, keep_style = condition_masks(b, guidance, rng)
    references = batch.get('style_ref')
    if stats is not None:
        stats['samples'] = stats.get('samples', 0) + b
        stats['text_dropped'] = stats.get('text_dropped', 0) + int((~keep_text).sum())
        stats['style_dropped'] = stats.get('style_dropped', 0) + int((~keep_style).sum())
    eps = model(z, t, batch['tokens'], references, keep_text=keep_text,
                keep_style=keep_style if references is not None else None)
    return T.mse(eps, noise)


def cfg_combine(eps_uncond, eps_text, eps_text_style, lambda_t, lambda_s):
    """eps_u + l_s (eps_ts - eps_t) + l_t (eps_t - eps_u)."""
    branches = [b for b in (eps_uncond, eps_text, eps_text_style) if b is not None]
    shapes = set(np.shape(b) for b in branches)
    if len(shapes) != 1:
        raise ShapeError("Guidance branches disagree in shape: %s." % sorted(shapes))
    if lambda_s == 0:
        return eps_uncond + lambda_t * (eps_text - eps_uncond)
    if lambda_s == 1 and lambda_t == 1:
        return np.array(eps_text_style, copy=True)
    return eps_uncond + lambda_s * (eps_text_style - eps_text) + lambda_t * (eps_text - eps_uncond)


def sample(model, tokens, references=None, guidance=None, steps=50, seed=0, frames=1, schedule=None):
    """
    Deterministic DDIM from seeded noise. Per step: eps(c_t) always,
    eps(null) unless lambda_t == 1 with style guidance on, eps(c_t, c_s)
    when lambda_s > 0. Returns (B, T, h, w, c) latents.
    """
    guidance = guidance or GuidanceConfig()
    schedule = schedule or NoiseSchedule()
    if guidance.lambda_s > 0 and references is None:
        raise ArgumentError("Style guidance lambda_s=%s needs a style reference." % guidance.lambda_s)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    b = tokens.shape[0]
    need_style = guidance.lambda_s > 0
    need_uncond = guidance.lambda_t != 1 or not need_style
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b,) + model.latent_shape(frames)).astype(T.default_dtype())
    with T.no_grad():
        cond_t = model.condition(tokens, None, batch=b)
        cond_u = model.condition(None, None, batch=b) if need_uncond else None
        cond_ts = model.condition(tokens, references, batch=b) if need_style else None
        timesteps = schedule.sampling_steps(steps)
        for i, step in enumerate(timesteps):
            t = np.full(b, step, dtype=np.int64)
            eps_t = model.denoise(x, t, cond_t).data
            eps_u = model.denoise(x, t, cond_u).data if need_uncond else eps_t
            eps_ts = model.denoise(x, t, cond_ts).data if need_style else None
            eps = cfg_combine(eps_u, eps_t, eps_ts, guidance.lambda_t, guidance.lambda_s)
            ab = schedule.alpha_bar[step]
            ab_prev = schedule.alpha_bar[timesteps[i + 1]] if i + 1 < len(timesteps) else 1.0
            x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            x = (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps).astype(x.dtype)
    return x


def generate(model, tokens, references=None, guidance=None, steps=50, seed=0, frames=1):
    """sample() decoded to (B, T, H, W, 3) pixels in [0, 1]."""
    return model.decode_latents(sample(model, tokens, references, guidance, steps, seed, frames))
