"""Inference: novel views, cached multi-appearance rendering, interpolation, evaluation.

No segmentation net and no content encoder run here, and ray samples sit at
bin midpoints, so every output is a deterministic function of its inputs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import appearance as app
from . import field as fld
from . import transient as tr
from .metrics import iou, psnr, ssim
from .synthscene import CameraModel, Dataset, write_png
from .trainer import TrainConfig, from_chw, select_variant, to_chw

DEFAULT_TILE_ROWS = 8


class VariantMismatchError(ValueError):
    pass


@dataclass
class CrossCache:
    """Reference-independent part of a render, computed once per camera."""

    grid: ad.Tensor | None  # 1 x C x H x W cross-ray features
    points: fld.PointFeatures | None  # per-point features (point-fusion variant only)
    shape: tuple[int, int]


class Model:
    """A trained checkpoint plus the variant wiring needed to render with it."""

    def __init__(self, params: ad.ParamSet, meta: dict):
        self.params = params
        self.meta = meta
        self.config = TrainConfig.from_dict(meta["config"])
        self.graph = select_variant(self.config)
        self.near = float(meta.get("near", 2.0))
        self.far = float(meta.get("far", 6.0))
        self.p = params.bind(None)

    @classmethod
    def load(cls, path) -> "Model":
        params, meta = ad.load_checkpoint(path)
        return cls(params, meta)

    @property
    def uses_reference(self) -> bool:
        return self.graph.appearance

    @property
    def has_segmenter(self) -> bool:
        return self.graph.transient

    def _image(self, image) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim == 3 and image.shape[-1] == 3:
            image = to_chw(image)
        return image.astype(self.config.dtype)

    def cross_features(self, camera: CameraModel, tile_rows: int | None = DEFAULT_TILE_ROWS) -> CrossCache:
        """Field queries for the full image, in row tiles joined before any decode."""
        h, w = camera.height, camera.width
        rows = h if tile_rows is None else max(1, int(tile_rows))
        n = self.config.samples
        cfg = self.config.field
        feats, dens, t_vals, deltas = [], [], [], []
        values = []
        with ad.precision(self.config.dtype):
            for r0 in range(0, h, rows):
                rays = fld.patch_rays(camera, r0, 0, min(rows, h - r0), w)
                pts = fld.query_bundle(self.p, rays, n, self.near, self.far, cfg, None)
                if self.graph.point_fusion:
                    feats.append(pts.feature.data)
                    dens.append(pts.density.data)
                    t_vals.append(pts.samples.t_values)
                    deltas.append(pts.samples.deltas)
                else:
                    c = pts.feature.shape[0]
                    res = fld.volume_render(ad.reshape(pts.feature, (c, len(rays), n)), pts.density, pts.samples.deltas)
                    values.append(res.value.data)
        if self.graph.point_fusion:
            pts = fld.PointFeatures(
                ad.Tensor(np.concatenate(feats, axis=1)),
                ad.Tensor(np.concatenate(dens, axis=0)),
                fld.RaySampleSet(np.concatenate(t_vals, axis=0), np.concatenate(deltas, axis=0)),
            )
            return CrossCache(None, pts, (h, w))
        value = np.concatenate(values, axis=1)
        return CrossCache(ad.Tensor(value.reshape((1, value.shape[0], h, w))), None, (h, w))

    def embed(self, reference) -> ad.Tensor:
        with ad.precision(self.config.dtype):
            return app.encode_appearance(self.p, self._image(reference), "enc_a")

    def decode_with(self, cache: CrossCache, f_a: ad.Tensor | None) -> np.ndarray:
        """Transform (when the variant has one) and decode; returns ``H x W x 3``."""
        with ad.precision(self.config.dtype):
            if f_a is None:
                grid = cache.grid if cache.grid is not None else fld.render_point_features(cache.points.feature, cache.points, cache.shape)
                return from_chw(app.decode(self.p, grid))
            if cache.points is not None:
                pts = cache.points
                h, w = cache.shape
                c, total = pts.feature.shape
                moved = app.learned_transform(self.p, ad.reshape(pts.feature, (1, c, h, total // h)), f_a)
                grid = fld.render_point_features(ad.reshape(moved, (c, total)), pts, cache.shape)
            else:
                grid = app.learned_transform(self.p, cache.grid, f_a)
            return from_chw(app.decode(self.p, grid))

    def check_reference(self, reference) -> None:
        if self.uses_reference and reference is None:
            raise VariantMismatchError(f"a {self.config.variant} checkpoint needs a reference image")
        if not self.uses_reference and reference is not None:
            raise VariantMismatchError(f"a {self.config.variant} checkpoint has no appearance module and cannot take a reference image")


def as_model(checkpoint) -> Model:
    return checkpoint if isinstance(checkpoint, Model) else Model.load(checkpoint)


def render_novel_view(checkpoint, camera: CameraModel, reference=None, tile_rows: int | None = DEFAULT_TILE_ROWS) -> np.ndarray:
    """Render a full ``H x W x 3`` view in the appearance of ``reference``."""
    model = as_model(checkpoint)
    model.check_reference(reference)
    cache = model.cross_features(camera, tile_rows)
    f_a = model.embed(reference) if reference is not None else None
    return model.decode_with(cache, f_a)


@dataclass
class TimingReport:
    cross_seconds: float
    per_reference_seconds: list[float] = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return self.cross_seconds + sum(self.per_reference_seconds)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("stage", "index", "seconds"))
            w.writerow(("cross_features", "", f"{self.cross_seconds:.6f}"))
            for k, s in enumerate(self.per_reference_seconds):
                w.writerow(("reference", k, f"{s:.6f}"))
            w.writerow(("total", "", f"{self.total_seconds:.6f}"))


def render_multi_appearance(checkpoint, camera: CameraModel, references, tile_rows: int | None = DEFAULT_TILE_ROWS):
    """One set of cross-ray features, decoded once per reference; returns ``(images, timing)``."""
    references = list(references)
    if not references:
        raise ValueError("need at least one reference image")
    model = as_model(checkpoint)
    model.check_reference(references[0])
    t0 = time.perf_counter()
    cache = model.cross_features(camera, tile_rows)
    timing = TimingReport(time.perf_counter() - t0)
    images = []
    for ref in references:
        t0 = time.perf_counter()
        images.append(model.decode_with(cache, model.embed(ref)))
        timing.per_reference_seconds.append(time.perf_counter() - t0)
    return images, timing


def interpolate_appearance(checkpoint, camera: CameraModel, ref_a, ref_b, alphas, tile_rows: int | None = DEFAULT_TILE_ROWS) -> list[np.ndarray]:
    """Frames for ``F_a(alpha) = (1 - alpha) F_a(ref_a) + alpha F_a(ref_b)``."""
    alphas = [float(a) for a in alphas]
    if any(a < 0 or a > 1 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    if alphas != sorted(alphas):
        raise ValueError("alphas must be sorted")
    model = as_model(checkpoint)
    model.check_reference(ref_a)
    cache = model.cross_features(camera, tile_rows)
    fa, fb = model.embed(ref_a), model.embed(ref_b)
    frames = []
    for a in alphas:
        if a == 0.0:
            mix = fa
        elif a == 1.0:
            mix = fb
        else:
            mix = ad.Tensor(((1.0 - a) * fa.data + a * fb.data).astype(fa.data.dtype))
        frames.append(model.decode_with(cache, mix))
    return frames


def predict_transient_map(checkpoint, image) -> np.ndarray:
    """Full-resolution ``H x W`` transient probability map (diagnostics only)."""
    model = as_model(checkpoint)
    if not model.has_segmenter:
        raise VariantMismatchError(f"a {model.config.variant} checkpoint has no segmentation net")
    with ad.precision(model.config.dtype):
        return tr.segment_transient(model.p, model._image(image)).data[0, 0]


@dataclass
class MetricsReport:
    rows: list[dict]
    iou_rows: list[dict] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr"] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows]))

    @property
    def mean_iou(self) -> float | None:
        """Mean over train images whose ground-truth mask is non-empty."""
        vals = [r["iou"] for r in self.iou_rows if r["gt_pixels"] > 0]
        return float(np.mean(vals)) if vals else None

    @property
    def has_iou(self) -> bool:
        return bool(self.iou_rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            header = ["id", "split", "psnr", "ssim"] + (["iou"] if self.has_iou else [])
            w.writerow(header)
            for r in self.rows:
                w.writerow([r["id"], "test", f"{r['psnr']:.4f}", f"{r['ssim']:.6f}"] + ([""] if self.has_iou else []))
            for r in self.iou_rows:
                w.writerow([r["id"], "train", "", "", f"{r['iou']:.6f}"])
            tail = ["mean", "", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"]
            if self.has_iou:
                tail.append("" if self.mean_iou is None else f"{self.mean_iou:.6f}")
            w.writerow(tail)


def score_pairs(pairs) -> MetricsReport:
    """PSNR/SSIM for ``(id, prediction, truth)`` triples."""
    return MetricsReport([{"id": i, "psnr": psnr(a, b), "ssim": ssim(a, b)} for i, a, b in pairs])


def evaluate_dataset(checkpoint, dataset_dir, masks_out=None, tile_rows: int | None = DEFAULT_TILE_ROWS) -> MetricsReport:
    """Render every test view with its designated reference and score it.

    Models with a segmentation net also get IoU of ``M > 0.5`` against the
    training masks; the predicted maps go to ``masks_out`` as 8-bit PNGs.
    """
    model = as_model(checkpoint)
    ds = Dataset.load(dataset_dir)
    tests = ds.split("test")
    if not tests:
        raise ValueError(f"{dataset_dir} has no test split")
    pairs = []
    for rec in tests:
        ref = None
        if model.uses_reference:
            ref_id = rec.get("reference_id") or ds.split("train")[0]["id"]
            ref = ds.image(ref_id)
        pred = render_novel_view(model, ds.camera(rec["id"]), ref, tile_rows)
        pairs.append((rec["id"], pred, ds.image(rec["id"])))
    report = score_pairs(pairs)
    if model.has_segmenter:
        out = Path(masks_out) if masks_out is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        for rec in ds.split("train"):
            truth = ds.mask(rec["id"])
            if truth is None:
                continue
            tmap = predict_transient_map(model, ds.image(rec["id"]))
            if out is not None:
                write_png(out / f"{rec['id']}.png", tmap)
            report.iou_rows.append({"id": rec["id"], "iou": iou(tmap > 0.5, truth), "gt_pixels": int(truth.sum())})
    return report
