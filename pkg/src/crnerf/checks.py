"""Gradient checks for every op kind and for the full training loss on a toy patch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import field as fld
from .synthscene import look_at, make_camera
from .trainer import TrainBatch, TrainConfig, compute_losses, init_params, select_variant


@dataclass
class GradCase:
    name: str
    f: Callable[[dict], ad.Tensor]
    point: dict[str, np.ndarray]


def _away_from_zero(rng, shape, low=0.1):
    return rng.uniform(low, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _project(rng, shape):
    """A fixed random weighting that turns any output into a scalar."""
    weights = rng.normal(size=shape)
    return lambda out: ad.tsum(out * weights)


def op_cases(seed: int = 0) -> list[GradCase]:
    """One small case per op kind; inputs that hit a kink are kept away from it."""
    rng = np.random.default_rng(seed)
    x34 = rng.normal(size=(3, 4))
    cases = []

    def unary(kind, fn, value, out_shape=None):
        proj = _project(rng, out_shape or value.shape)
        cases.append(GradCase(kind, lambda p: proj(fn(p["x"])), {"x": value}))

    def binary(kind, fn, a, b, out_shape):
        proj = _project(rng, out_shape)
        cases.append(GradCase(kind, lambda p: proj(fn(p["a"], p["b"])), {"a": a, "b": b}))

    binary("matmul", ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), (3, 5))
    binary("conv2d", ad.conv2d, rng.normal(size=(1, 2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), (1, 3, 5, 6))
    binary("add", lambda a, b: a + b, x34, rng.normal(size=(3, 1)), (3, 4))
    binary("sub", lambda a, b: a - b, rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), (3, 4))
    binary("mul", lambda a, b: a * b, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), (3, 4))
    unary("scalar-mul", lambda x: x * 2.5, rng.normal(size=(3, 4)))
    unary("relu", ad.relu, _away_from_zero(rng, (3, 4)))
    unary("softplus", ad.softplus, rng.normal(size=(3, 4)))
    unary("sigmoid", ad.sigmoid, rng.normal(size=(3, 4)))
    unary("sin", ad.sin, rng.normal(size=(3, 4)))
    unary("cos", ad.cos, rng.normal(size=(3, 4)))
    unary("exp", ad.exp, rng.normal(size=(3, 4)))
    unary("mean", lambda x: ad.mean(x, axis=1), rng.normal(size=(3, 4)), (3,))
    unary("sum", lambda x: ad.tsum(x, axis=0), rng.normal(size=(3, 4)), (4,))
    unary("reshape", lambda x: ad.reshape(x, (2, 6)), rng.normal(size=(3, 4)), (2, 6))
    binary("concat", lambda a, b: ad.concat([a, b], axis=0), rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), (5, 4))
    unary("adaptive-average-pool", lambda x: ad.adaptive_avg_pool(x, (3, 4)), rng.normal(size=(1, 2, 7, 9)), (1, 2, 3, 4))
    unary("spatial-covariance", ad.spatial_cov, rng.normal(size=(3, 10)), (3, 3))
    cases.append(GradCase("l1-norm", lambda p: ad.l1_norm(p["x"]), {"x": _away_from_zero(rng, (3, 4))}))
    cases.append(GradCase("squared-l2-norm", lambda p: ad.sq_l2_norm(p["x"]), {"x": rng.normal(size=(3, 4))}))
    coords = rng.uniform(0.1, 4.9, size=(6, 2)) + 0.013
    unary("bilinear-sample", lambda x: ad.bilinear_sample(x, coords), rng.normal(size=(1, 1, 6, 7)), (1, 1, 6))
    return cases


TOY_IMAGE = 16
TOY_PATCH = 8


def toy_pipeline(seed: int = 0, variant: str = "full") -> GradCase:
    """The complete training loss on an 8 x 8 patch of a random 16 x 16 image."""
    cfg = TrainConfig(variant=variant, rays=TOY_PATCH**2, samples=8, width=16, depth=6, beta=0.5, lam=0.1,
                      precision="float64", seed=seed)
    params = init_params(cfg)
    rng = np.random.default_rng(seed + 1)
    image = rng.uniform(size=(1, 3, TOY_IMAGE, TOY_IMAGE))
    cam = make_camera(look_at(np.array([0.0, -4.0, 2.0])), size=TOY_IMAGE)
    rays = fld.patch_rays(cam, 3, 5, TOY_PATCH)
    graph = select_variant(cfg)
    names = [n for n in params.names() if n.split(".", 1)[0] in graph.groups]

    def f(p):
        batch = TrainBatch("toy", (3, 5), rays, image, np.random.default_rng(seed + 2))
        return compute_losses(p, batch, graph, cfg, 2.0, 6.0).total

    return GradCase(f"pipeline[{variant}]", f, {n: params[n] for n in names})


def run_grad_checks(tolerance: float = 1e-4, pipeline_coords: int = 8, seed: int = 0):
    """Yield ``(case name, GradCheckReport)`` for every op kind, then the toy pipeline."""
    for case in op_cases(seed):
        yield case.name, ad.grad_check(case.f, case.point, tolerance)
    case = toy_pipeline(seed)
    yield case.name, ad.grad_check(case.f, case.point, tolerance, max_coords=pipeline_coords, seed=seed)
