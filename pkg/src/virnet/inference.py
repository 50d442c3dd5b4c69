"""Test-time restoration: mean image from RNet, variance map from SNet."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .degradation import KernelEmbedding, stretch_embedding
from .distributions import sigma_mode
from .networks import NetworkConfig, Params, rnet_forward, snet_forward


@dataclass
class Restoration:
    image: np.ndarray  # clamped posterior mean, [h', w']
    variance: np.ndarray  # posterior mode of sigma^2, [h, w]


def _pad_to_multiple(img: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[-2:]
    ph, pw = -h % m, -w % m
    if ph == 0 and pw == 0:
        return img, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode=mode), (h, w)


def restore(y: np.ndarray, params: Params, cfg: NetworkConfig, kernel: np.ndarray | None = None,
            embedding: KernelEmbedding | None = None) -> Restoration:
    """Deterministic restoration of one ``[h, w]`` image (no sampling)."""
    y = np.asarray(y, dtype=np.float64)
    yp, (h, w) = _pad_to_multiple(y, cfg.multiple)
    code = None
    if cfg.t > 0:
        if kernel is None or embedding is None:
            raise ValueError("this model needs a blur kernel and its embedding")
        code = stretch_embedding(embedding.project(kernel), *yp.shape[-2:])[None]
    with T.no_grad():
        q_z = rnet_forward(yp, params, cfg, code)
        q_s = snet_forward(yp, params, cfg)
    s = cfg.scale
    mu = q_z.mu.data[0, 0, : h * s, : w * s]
    var = sigma_mode(q_s)[0, 0, :h, :w]
    return Restoration(image=np.clip(mu, 0.0, 1.0), variance=var)
