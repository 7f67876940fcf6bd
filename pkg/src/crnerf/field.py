"""Neural field, stratified ray sampling and volume rendering.

All per-point quantities are channel-major: a field query over ``N`` points
returns a ``C x N`` feature matrix and a ``1 x N`` density row, so weights are
``W @ X`` and no transposes are needed anywhere in the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

POS_LEVELS = 10
DIR_LEVELS = 4
FEATURE_CHANNELS = 16
SKIP_LAYER = 5


@dataclass(frozen=True)
class FieldConfig:
    width: int = 256
    depth: int = 8
    channels: int = FEATURE_CHANNELS
    pos_levels: int = POS_LEVELS
    dir_levels: int = DIR_LEVELS

    @property
    def pos_dim(self) -> int:
        return 2 * self.pos_levels * 3

    @property
    def dir_dim(self) -> int:
        return 2 * self.dir_levels * 3


def positional_encoding(v, levels: int) -> Tensor:
    """``(sin(2^j pi v), cos(2^j pi v))`` for ``j < levels``, stacked on axis 0.

    ``v`` is a length-``k`` vector or a ``k x N`` matrix; the result has
    ``2 * levels * k`` rows.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    v = ad.as_tensor(v)
    parts = []
    for j in range(levels):
        scaled = v * float(2**j * math.pi)
        parts += [ad.sin(scaled), ad.cos(scaled)]
    return ad.concat(parts, axis=0)


@dataclass
class RaySampleSet:
    t_values: np.ndarray  # R x n, ascending per row
    deltas: np.ndarray  # R x n


def stratified_samples(n_rays: int, n: int, near: float, far: float, rng: np.random.Generator | None = None) -> RaySampleSet:
    """One sample per equal-width bin; bin midpoints when ``rng`` is None.

    The last delta of every ray is the bin width ``(far - near) / n``.
    """
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if not far > near:
        raise ValueError(f"invalid bounds: far {far} must exceed near {near}")
    width = (far - near) / n
    lower = near + width * np.arange(n)
    if rng is None:
        t = np.broadcast_to(lower + 0.5 * width, (n_rays, n)).copy()
    else:
        t = lower + width * rng.random((n_rays, n))
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = width
    return RaySampleSet(t, deltas)


def sample_ray_points(n: int, near: float, far: float, jitter_seed: int | None = None) -> RaySampleSet:
    """Samples for a single ray (``1 x n`` arrays)."""
    rng = None if jitter_seed is None else np.random.default_rng(jitter_seed)
    return stratified_samples(1, n, near, far, rng)


def init_field_params(params: ParamSet, cfg: FieldConfig, rng: np.random.Generator, dtype=np.float64, prefix: str = "field") -> None:
    """He-uniform weights, zero biases."""
    fan_in = cfg.pos_dim
    for k in range(cfg.depth):
        if k == SKIP_LAYER:
            fan_in += cfg.pos_dim
        _linear(params, f"{prefix}.layer{k}", fan_in, cfg.width, rng, dtype)
        fan_in = cfg.width
    _linear(params, f"{prefix}.density", cfg.width, 1, rng, dtype)
    _linear(params, f"{prefix}.feature", cfg.width + cfg.dir_dim, cfg.channels, rng, dtype)


def _linear(params: ParamSet, name: str, fan_in: int, fan_out: int, rng, dtype) -> None:
    bound = math.sqrt(6.0 / fan_in)
    params.add(f"{name}.weight", rng.uniform(-bound, bound, (fan_out, fan_in)).astype(dtype))
    params.add(f"{name}.bias", np.zeros((fan_out, 1), dtype=dtype))


@dataclass
class FieldOutput:
    feature: Tensor  # C x N
    density: Tensor  # 1 x N


def field_query(p: dict, x, d, cfg: FieldConfig, prefix: str = "field") -> FieldOutput:
    """Query the MLP at ``3 x N`` positions ``x`` with ``3 x N`` unit directions ``d``."""
    try:
        enc_x = positional_encoding(x, cfg.pos_levels)
        enc_d = positional_encoding(d, cfg.dir_levels)
        h = enc_x
        for k in range(cfg.depth):
            if k == SKIP_LAYER:
                h = ad.concat([h, enc_x], axis=0)
            h = ad.relu(p[f"{prefix}.layer{k}.weight"] @ h + p[f"{prefix}.layer{k}.bias"])
        sigma = ad.softplus(p[f"{prefix}.density.weight"] @ h + p[f"{prefix}.density.bias"])
        feat = p[f"{prefix}.feature.weight"] @ ad.concat([h, enc_d], axis=0) + p[f"{prefix}.feature.bias"]
    except KeyError as exc:
        raise KeyError(f"field parameters missing {exc.args[0]!r}") from None
    return FieldOutput(feat, sigma)


@dataclass
class RenderResult:
    value: Tensor  # C x R
    weights: Tensor  # R x n
    opacity: Tensor  # R
    depth: Tensor  # R


def _exclusive_sum_matrix(n: int, dtype) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=dtype), k=1)


def volume_render(payload, densities, deltas, t_values=None) -> RenderResult:
    """Alpha-composite ``C x R x n`` payloads along rays with ``R x n`` densities.

    ``w_i = exp(-sum_{l<i} sigma_l delta_l) * (1 - exp(-sigma_i delta_i))``;
    returns ``sum_i w_i payload_i`` plus opacity and (if ``t_values`` is
    given) expected depth.
    """
    payload = ad.as_tensor(payload)
    densities = ad.as_tensor(densities)
    if np.any(densities.data < 0):
        raise ValueError("volume_render: negative density")
    if payload.ndim != 3 or payload.shape[1:] != densities.shape:
        raise ad.ShapeError(f"volume_render: payload {payload.shape} vs densities {densities.shape}")
    dt = densities.data.dtype
    deltas = np.asarray(deltas, dtype=dt)
    sd = densities * deltas
    n = densities.shape[1]
    transmittance = ad.exp(-(sd @ _exclusive_sum_matrix(n, dt)))
    alpha = 1.0 - ad.exp(-sd)
    w = transmittance * alpha
    r = densities.shape[0]
    value = ad.tsum(payload * ad.reshape(w, (1, r, n)), axis=2)
    opacity = ad.tsum(w, axis=1)
    depth = ad.tsum(w * np.asarray(t_values, dtype=dt), axis=1) if t_values is not None else None
    return RenderResult(value, w, opacity, depth)


@dataclass
class RayBundle:
    """``R`` rays of one camera; ``grid`` is the (rows, cols) layout of the patch."""

    origins: np.ndarray  # R x 3
    directions: np.ndarray  # R x 3
    pixels: np.ndarray  # R x 2
    grid: tuple[int, int]

    def __len__(self) -> int:
        return len(self.origins)

    def take(self, idx) -> "RayBundle":
        idx = np.asarray(idx)
        return RayBundle(self.origins[idx], self.directions[idx], self.pixels[idx], (1, len(idx)))


def patch_rays(camera, row0: int, col0: int, rows: int, cols: int | None = None) -> RayBundle:
    cols = rows if cols is None else cols
    rr, cc = np.meshgrid(np.arange(row0, row0 + rows), np.arange(col0, col0 + cols), indexing="ij")
    pixels = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    o, d = camera.rays(pixels)
    return RayBundle(o, d, pixels, (rows, cols))


def image_rays(camera) -> RayBundle:
    return patch_rays(camera, 0, 0, camera.height, camera.width)


@dataclass
class PointFeatures:
    """Field output for every sample of every ray in a bundle."""

    feature: Tensor  # C x (R*n), ray-major
    density: Tensor  # R x n
    samples: RaySampleSet


def query_bundle(p: dict, rays: RayBundle, n: int, near: float, far: float, cfg: FieldConfig, rng=None) -> PointFeatures:
    samples = stratified_samples(len(rays), n, near, far, rng)
    dt = ad.default_dtype()
    pts = rays.origins[:, None, :] + samples.t_values[:, :, None] * rays.directions[:, None, :]
    x = pts.reshape(-1, 3).T.astype(dt)
    d = np.repeat(rays.directions, n, axis=0).T.astype(dt)
    out = field_query(p, x, d, cfg)
    return PointFeatures(out.feature, ad.reshape(out.density, (len(rays), n)), samples)


@dataclass
class CrossRayFeature:
    grid: Tensor  # 1 x C x rows x cols
    patch_origin: tuple[int, int]
    opacity: np.ndarray
    depth: np.ndarray


def render_point_features(feature: Tensor, pts: PointFeatures, grid: tuple[int, int]) -> Tensor:
    """Volume-render ``C x (R*n)`` per-point features into a ``1 x C x rows x cols`` grid."""
    r, n = pts.density.shape
    c = feature.shape[0]
    res = volume_render(ad.reshape(feature, (c, r, n)), pts.density, pts.samples.deltas)
    return ad.reshape(res.value, (1, c) + tuple(grid))


def cross_ray_feature(p: dict, rays: RayBundle, n: int, near: float, far: float, cfg: FieldConfig, rng=None) -> CrossRayFeature:
    """Per-ray feature volume rendering arranged row-major into the patch grid."""
    pts = query_bundle(p, rays, n, near, far, cfg, rng)
    r = len(rays)
    c = pts.feature.shape[0]
    res = volume_render(ad.reshape(pts.feature, (c, r, n)), pts.density, pts.samples.deltas, pts.samples.t_values)
    grid = ad.reshape(res.value, (1, c) + tuple(rays.grid))
    origin = (int(rays.pixels[0, 0]), int(rays.pixels[0, 1]))
    return CrossRayFeature(grid, origin, res.opacity.data, res.depth.data)
