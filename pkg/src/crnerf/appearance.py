"""Appearance injection: encoders, covariance transform net, decoder and loss.

Images and feature grids are ``1 x C x H x W`` tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

EMBED_GRID = (8, 8)
HIDDEN = 32


def init_conv(params: ParamSet, name: str, c_in: int, c_out: int, rng, dtype=np.float64) -> None:
    bound = math.sqrt(6.0 / (9 * c_in))
    params.add(f"{name}.weight", rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(dtype))
    params.add(f"{name}.bias", np.zeros((1, c_out, 1, 1), dtype=dtype))


def conv(p: dict, name: str, x) -> Tensor:
    return ad.conv2d(x, p[f"{name}.weight"]) + p[f"{name}.bias"]


def conv_stack(p: dict, prefix: str, x, n_layers: int, final=None) -> Tensor:
    """``n_layers`` 3x3 convs with ReLU between; ``final`` applied to the last output."""
    for k in range(n_layers):
        x = conv(p, f"{prefix}.conv{k}", x)
        if k < n_layers - 1:
            x = ad.relu(x)
    return final(x) if final is not None else x


def init_encoder(params: ParamSet, prefix: str, channels: int, rng, dtype=np.float64) -> None:
    for k, (ci, co) in enumerate([(3, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, channels)]):
        init_conv(params, f"{prefix}.conv{k}", ci, co, rng, dtype)


def encode_appearance(p: dict, image, prefix: str = "enc_a") -> Tensor:
    """Three 3x3 convs then adaptive average pooling to an 8 x 8 grid.

    Works on any image of at least 8 x 8 pixels.
    """
    image = ad.as_tensor(image)
    if image.shape[-2] < 8 or image.shape[-1] < 8:
        raise ValueError(f"reference image {image.shape[-2]}x{image.shape[-1]} is smaller than 8x8")
    return ad.adaptive_avg_pool(conv_stack(p, prefix, image, 3), EMBED_GRID)


def init_transform(params: ParamSet, channels: int, rng, dtype=np.float64, prefix: str = "transform") -> None:
    for branch in ("phi1", "phi2", "phi3"):
        for k in range(2):
            init_conv(params, f"{prefix}.{branch}.conv{k}", channels, channels, rng, dtype)


def learned_transform(p: dict, cross, app, prefix: str = "transform") -> Tensor:
    """``T phi1(F_cr)`` with ``T = Cov(phi2(F_cr)) Cov(phi3(F_a))``.

    Covariances are over spatial positions.  ``cross`` may be any
    ``1 x C x h x w`` grid; ``app`` is the pooled appearance embedding.
    """
    cross = ad.as_tensor(cross)
    app = ad.as_tensor(app)
    c = cross.shape[1]
    if app.shape[1] != c:
        raise ad.ShapeError(f"learned_transform: {c} cross-ray channels vs {app.shape[1]} appearance channels")
    hw = cross.shape[2] * cross.shape[3]
    f1 = conv_stack(p, f"{prefix}.phi1", cross, 2)
    f2 = conv_stack(p, f"{prefix}.phi2", cross, 2)
    f3 = conv_stack(p, f"{prefix}.phi3", app, 2)
    cov_cr = ad.spatial_cov(ad.reshape(f2, (c, hw)))
    cov_a = ad.spatial_cov(ad.reshape(f3, (c, app.shape[2] * app.shape[3])))
    out = (cov_cr @ cov_a) @ ad.reshape(f1, (c, hw))
    return ad.reshape(out, cross.shape)


def init_decoder(params: ParamSet, channels: int, rng, dtype=np.float64, prefix: str = "decoder") -> None:
    for k, (ci, co) in enumerate([(channels, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 3)]):
        init_conv(params, f"{prefix}.conv{k}", ci, co, rng, dtype)


def decode(p: dict, grid, prefix: str = "decoder") -> Tensor:
    """Resolution-preserving RGB decoder with a sigmoid output."""
    return conv_stack(p, prefix, grid, 3, final=ad.sigmoid)


@dataclass
class AppearanceLoss:
    total: Tensor
    style: Tensor  # ||E_a(I_n) - F_a||^2
    content: Tensor  # ||E_c(I_n) - E_c(D(F_cr))||^2
    rendered: Tensor  # I_n = D(T(F_cr))


def appearance_loss(p: dict, cross, ref_image, beta: float, app=None, transformed=None) -> AppearanceLoss:
    """Style term plus ``beta`` times the content term; also returns ``I_n``.

    ``app`` (the embedding of ``ref_image``) and ``transformed`` (``T(F_cr)``)
    may be supplied when the caller already computed them.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if app is None:
        app = encode_appearance(p, ref_image, "enc_a")
    if transformed is None:
        transformed = learned_transform(p, cross, app)
    rendered = decode(p, transformed)
    style = ad.sq_l2_norm(encode_appearance(p, rendered, "enc_a") - app)
    anchor = decode(p, cross)
    content = ad.sq_l2_norm(encode_appearance(p, rendered, "enc_c") - encode_appearance(p, anchor, "enc_c"))
    return AppearanceLoss(style + content * float(beta), style, content, rendered)
