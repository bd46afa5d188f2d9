#!/usr/bin/python3

import numpy as np


def area_weights(n_in, n_out):
    """Row i averages the input span [i*n_in/n_out, (i+1)*n_in/n_out)."""
    scale = n_in / float(n_out)
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            weights[i, j] = (min(hi, j + 1) - max(lo, j)) / scale
    return weights


def resize_area(images, size):
    """Area resampling of (..., H, W, C) images to size x size."""
    images = np.asarray(images)
    wh = area_weights(images.shape[-3], size)
    ww = area_weights(images.shape[-2], size)
    return np.einsum('ij,...jkc,lk->...ilc', wh, images, ww).astype(images.dtype)


def warp(image, flow):
    """Sample image at p + flow(p) with bilinear interpolation and edge clamping."""
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    x = np.clip(xs + flow[..., 0], 0, w - 1)
    y = np.clip(ys + flow[..., 1], 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    top = image[y0, x0] * (1 - ax) + image[y0, x1] * ax
    bottom = image[y1, x0] * (1 - ax) + image[y1, x1] * ax
    return top * (1 - ay) + bottom * ay


def occlusion(ids_t, ids_next, flow):
    """True where the surface at p in frame t is not what frame t+1 shows at p + flow(p)."""
    h, w = ids_t.shape
    ys, xs = np.mgrid[0:h, 0:w]
    x = xs + np.rint(flow[..., 0]).astype(np.int64)
    y = ys + np.rint(flow[..., 1]).astype(np.int64)
    inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    landed = ids_next[np.clip(y, 0, h - 1), np.clip(x, 0, w - 1)]
    return ~inside | (landed != ids_t)


def downsample_motion(flow, occluded, ids, factor=2):
    """
    Flow and occlusion for frames area-downsampled by an integer factor.

    A coarse pixel stays valid only when all its fine pixels are valid and
    belong to one surface; its flow is the fine flow divided by the factor.
    """
    t, h, w, _ = flow.shape
    hb, wb = h // factor, w // factor
    blocks = lambda a: a.reshape(a.shape[0], hb, factor, wb, factor, *a.shape[3:])
    coarse_flow = blocks(flow).mean(axis=(2, 4)) / factor
    fine_ids = blocks(ids)
    uniform = (fine_ids == fine_ids[:, :, :1, :, :1]).all(axis=(2, 4))
    valid = (~blocks(occluded)).all(axis=(2, 4)) & uniform
    return coarse_flow, ~valid
