"""Training loop: patch sampling, loss assembly, Adam updates, variants, checkpoints."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import appearance as app
from . import field as fld
from . import transient as tr
from .autodiff import ParamSet, Tensor
from .synthscene import Dataset

VARIANTS = ("full", "appearance-only", "transient-only", "base", "raypoint-fusion")
GROUPS = ("field", "enc_a", "transform", "decoder", "enc_c", "segment")
LOG_HEADER = ("step", "loss_total", "loss_a", "loss_t", "seconds")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    variant: str = "full"
    steps: int = 30000
    seed: int = 0
    rays: int = 1024
    lr: float = 5e-4
    lam: float = 1e-3
    beta: float = 1e-5
    samples: int = 64
    mask_reg: float = 0.05
    precision: str = "float32"
    checkpoint_every: int = 1000
    width: int = 256
    depth: int = 8
    record_time: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if math.isqrt(self.rays) ** 2 != self.rays:
            raise ValueError(f"rays per patch must be a perfect square, got {self.rays}")
        if self.lam < 0 or self.beta < 0 or self.mask_reg < 0:
            raise ValueError("lambda, beta and mask_reg must be non-negative")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.steps < 0 or self.checkpoint_every < 1:
            raise ValueError("steps must be >= 0 and checkpoint_every >= 1")

    @property
    def patch(self) -> int:
        return math.isqrt(self.rays)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def field(self) -> fld.FieldConfig:
        return fld.FieldConfig(width=self.width, depth=self.depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class VariantGraph:
    name: str
    groups: tuple[str, ...]
    appearance: bool
    transient: bool
    point_fusion: bool = False


def select_variant(config: TrainConfig | str) -> VariantGraph:
    name = config if isinstance(config, str) else config.variant
    if name == "full":
        return VariantGraph(name, GROUPS, True, True)
    if name == "raypoint-fusion":
        return VariantGraph(name, GROUPS, True, True, point_fusion=True)
    if name == "appearance-only":
        return VariantGraph(name, ("field", "enc_a", "transform", "decoder", "enc_c"), True, False)
    if name == "transient-only":
        return VariantGraph(name, ("field", "decoder", "segment"), False, True)
    if name == "base":
        return VariantGraph(name, ("field", "decoder"), False, False)
    raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")


def init_params(config: TrainConfig) -> ParamSet:
    """Every group is initialised (in a fixed order) regardless of the variant.

    Variants therefore share the same starting field; groups outside the
    variant graph just never change.
    """
    rng = np.random.default_rng(config.seed)
    dt = config.dtype
    c = config.field.channels
    params = ParamSet()
    fld.init_field_params(params, config.field, rng, dt)
    app.init_encoder(params, "enc_a", c, rng, dt)
    app.init_transform(params, c, rng, dt)
    app.init_decoder(params, c, rng, dt)
    app.init_encoder(params, "enc_c", c, rng, dt)
    tr.init_segmenter(params, rng, dt)
    return params


def active_names(params: ParamSet, graph: VariantGraph) -> list[str]:
    return [n for n in params.names() if n.split(".", 1)[0] in graph.groups]


@dataclass
class TrainBatch:
    image_id: str
    origin: tuple[int, int]
    rays: fld.RayBundle
    image: np.ndarray  # 1 x 3 x H x W reference (and target) image
    jitter: np.random.Generator | None

    @property
    def target(self) -> np.ndarray:
        r0, c0 = self.origin
        rows, cols = self.rays.grid
        return self.image[:, :, r0 : r0 + rows, c0 : c0 + cols]


def to_chw(image: np.ndarray) -> np.ndarray:
    """``H x W x 3`` -> ``1 x 3 x H x W``."""
    return np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)[None])


def from_chw(image) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return np.ascontiguousarray(data[0].transpose(1, 2, 0))


@dataclass
class LossTerms:
    total: Tensor
    loss_a: Tensor | None
    loss_t: Tensor
    rendered: Tensor


def compute_losses(p: dict, batch: TrainBatch, graph: VariantGraph, config: TrainConfig, near: float, far: float) -> LossTerms:
    """``L_a + lambda * L_t`` for the appearance variants, ``lambda * L_t`` otherwise."""
    cfg = config.field
    image = batch.image.astype(ad.default_dtype(), copy=False)
    target = batch.target.astype(ad.default_dtype(), copy=False)
    loss_a = None
    if graph.point_fusion:
        pts = fld.query_bundle(p, batch.rays, config.samples, near, far, cfg, batch.jitter)
        cross = fld.render_point_features(pts.feature, pts, batch.rays.grid)
        f_a = app.encode_appearance(p, image, "enc_a")
        rows, cols = batch.rays.grid
        c = pts.feature.shape[0]
        point_grid = ad.reshape(pts.feature, (1, c, rows, cols * config.samples))
        moved = app.learned_transform(p, point_grid, f_a)
        transformed = fld.render_point_features(ad.reshape(moved, (c, rows * cols * config.samples)), pts, batch.rays.grid)
        la = app.appearance_loss(p, cross, image, config.beta, app=f_a, transformed=transformed)
        loss_a, rendered = la.total, la.rendered
    else:
        cross = fld.cross_ray_feature(p, batch.rays, config.samples, near, far, cfg, batch.jitter).grid
        if graph.appearance:
            la = app.appearance_loss(p, cross, image, config.beta)
            loss_a, rendered = la.total, la.rendered
        else:
            rendered = app.decode(p, cross)
    if graph.transient:
        tmap = tr.segment_transient(p, image)
        m = ad.reshape(tr.grid_sample_map(tmap, batch.rays.pixels), (1, 1) + tuple(batch.rays.grid))
        loss_t = tr.transient_loss(m, rendered, target, config.mask_reg)
    else:
        resid = rendered - target
        loss_t = ad.l1_norm(resid * resid)
    total = loss_t * float(config.lam)
    if loss_a is not None:
        total = loss_a + total
    return LossTerms(total, loss_a, loss_t, rendered)


@dataclass
class StepRecord:
    step: int
    loss_total: float
    loss_a: float | None
    loss_t: float
    seconds: float | None = None


class NonFiniteLossError(FloatingPointError):
    pass


def train_step(params: ParamSet, batch: TrainBatch, config: TrainConfig, step: int, near: float, far: float,
               graph: VariantGraph | None = None) -> tuple[StepRecord, dict[str, np.ndarray]]:
    """One Adam step over the parameters active in the variant; in place."""
    graph = graph or select_variant(config)
    names = active_names(params, graph)
    with ad.precision(config.dtype):
        tape = ad.Tape()
        p = params.bind(tape, names)
        try:
            terms = compute_losses(p, batch, graph, config, near, far)
        except ad.NonFiniteError as exc:
            raise NonFiniteLossError(f"non-finite value at step {step}: {exc}") from exc
        if not np.isfinite(terms.total.data):
            raise NonFiniteLossError(f"non-finite loss {terms.total.data} at step {step}")
        g = ad.backprop(tape, terms.total)
    grads = {n: g[p[n].node] for n in names}
    ad.adam_update(params, grads, config.lr)
    rec = StepRecord(
        step,
        float(terms.total.data),
        None if terms.loss_a is None else float(terms.loss_a.data),
        float(terms.loss_t.data),
    )
    return rec, grads


class TrainingData:
    """Training images and cameras, kept in memory."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.records = dataset.split("train")
        if not self.records:
            raise ValueError(f"malformed dataset: {dataset.root} has no training images")
        self.ids = [r["id"] for r in self.records]
        self.cameras = [dataset.camera(i) for i in self.ids]
        self.images = [to_chw(dataset.image(i)) for i in self.ids]
        self.near = dataset.scene.near
        self.far = dataset.scene.far

    def batch(self, config: TrainConfig, step: int) -> TrainBatch:
        """The patch for ``step``: a function of ``(seed, step)`` only."""
        rng = np.random.default_rng([config.seed, step])
        k = int(rng.integers(len(self.ids)))
        cam = self.cameras[k]
        p = config.patch
        if p > cam.height or p > cam.width:
            raise ValueError(f"patch {p}x{p} does not fit a {cam.height}x{cam.width} image")
        r0 = int(rng.integers(cam.height - p + 1))
        c0 = int(rng.integers(cam.width - p + 1))
        return TrainBatch(self.ids[k], (r0, c0), fld.patch_rays(cam, r0, c0, p), self.images[k], rng)


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def checkpoint_meta(config: TrainConfig, step: int, dataset_dir, near: float, far: float) -> dict:
    return {"config": config.to_dict(), "step": step, "dataset": str(dataset_dir), "near": near, "far": far}


def run_training(dataset_dir, config: TrainConfig, out_dir, resume=None, progress=None) -> Path:
    """Train and return the path of the final checkpoint.

    Writes ``run_config.json``, ``train_log.csv``, ``ckpt_XXXXXXX.npz`` every
    ``checkpoint_every`` steps and ``final.npz`` (with ``steps=0`` only the
    initial checkpoint is written).  The log's ``seconds``
    column is blank unless ``record_time`` is set, so that two runs with the
    same seed produce identical logs; wall times always go to ``timing.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = TrainingData(Dataset.load(dataset_dir))
    graph = select_variant(config)
    start = 0
    if resume is not None:
        params, meta = ad.load_checkpoint(resume)
        if meta.get("config", {}).get("variant") != config.variant:
            raise ValueError(f"checkpoint {resume} was trained as {meta.get('config', {}).get('variant')!r}, not {config.variant!r}")
        start = int(meta["step"])
    else:
        params = init_params(config)
    (out / "run_config.json").write_text(
        json.dumps({"config": config.to_dict(), "dataset": str(dataset_dir), "resume": None if resume is None else str(resume)}, indent=2, sort_keys=True)
    )
    log_path, timing_path = out / "train_log.csv", out / "timing.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    if resume is None:
        ad.save_checkpoint(out / "ckpt_0000000.npz", params, checkpoint_meta(config, 0, dataset_dir, data.near, data.far))
    with open(log_path, mode, newline="") as log_f, open(timing_path, mode, newline="") as time_f:
        log, timing = csv.writer(log_f), csv.writer(time_f)
        if mode == "w":
            log.writerow(LOG_HEADER)
            timing.writerow(("step", "seconds"))
        for step in range(start + 1, config.steps + 1):
            t0 = time.perf_counter()
            rec, _ = train_step(params, data.batch(config, step), config, step, data.near, data.far, graph)
            rec.seconds = time.perf_counter() - t0
            log.writerow((rec.step, _fmt(rec.loss_total), _fmt(rec.loss_a), _fmt(rec.loss_t),
                          _fmt(rec.seconds) if config.record_time else ""))
            timing.writerow((rec.step, f"{rec.seconds:.4f}"))
            if progress is not None:
                progress(rec)
            if step % config.checkpoint_every == 0:
                log_f.flush()
                ad.save_checkpoint(out / f"ckpt_{step:07d}.npz", params, checkpoint_meta(config, step, dataset_dir, data.near, data.far))
    if config.steps == 0:
        return out / "ckpt_0000000.npz"
    final = out / "final.npz"
    ad.save_checkpoint(final, params, checkpoint_meta(config, max(start, config.steps), dataset_dir, data.near, data.far))
    return final


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
