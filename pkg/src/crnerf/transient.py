"""Transient-object handling: segmentation net, grid sampling and masked loss.

Map semantics: ``M -> 1`` marks a transient pixel, so ``(1 - M)`` removes it
from the reconstruction term.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .appearance import conv_stack, init_conv
from .autodiff import ParamSet, Tensor

SEG_HIDDEN = 16


def init_segmenter(params: ParamSet, rng, dtype=np.float64, prefix: str = "segment") -> None:
    shapes = [(3, SEG_HIDDEN), (SEG_HIDDEN, SEG_HIDDEN), (SEG_HIDDEN, SEG_HIDDEN), (SEG_HIDDEN, 1)]
    for k, (ci, co) in enumerate(shapes):
        init_conv(params, f"{prefix}.conv{k}", ci, co, rng, dtype)


def segment_transient(p: dict, image, prefix: str = "segment") -> Tensor:
    """Full-resolution ``1 x 1 x H x W`` transient probability map."""
    return conv_stack(p, prefix, ad.as_tensor(image), 4, final=ad.sigmoid)


def grid_sample_map(tmap, pixels) -> Tensor:
    """Bilinear samples of a ``... x H x W`` map at ``(row, col)`` pixel coordinates.

    Coordinates outside the image are clamped to the border.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pixels) == 0:
        raise ValueError("grid_sample_map: empty pixel list")
    return ad.bilinear_sample(tmap, pixels)


def transient_loss(map_samples, rendered, reference, mask_reg: float = 0.05) -> Tensor:
    """``sum((1 - M) * (I_n - I_a)^2) + mask_reg * mean(M)``.

    ``map_samples`` is ``1 x 1 x p x p`` (or any shape broadcasting against
    the ``1 x 3 x p x p`` images).
    """
    m = ad.as_tensor(map_samples)
    if np.any(m.data < 0) or np.any(m.data > 1):
        raise ValueError("transient map values must lie in [0, 1]")
    resid = rendered - reference
    loss = ad.l1_norm((1.0 - m) * (resid * resid))
    if mask_reg:
        loss = loss + ad.mean(m) * float(mask_reg)
    return loss
