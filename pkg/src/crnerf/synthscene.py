"""Procedural "unconstrained photo collections" of an analytic scene.

Geometry is fixed; each image gets a photometric variant (gain, tint, gamma,
sky gradient) and, for training images, random flat-colour occluders whose
ground-truth masks are written alongside but never used for training.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

AMBIENT = 0.25
LIGHT_DIR = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    density: float = 10.0
    kind: str = "sphere"


@dataclass
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    albedo: tuple[float, float, float]
    density: float = 10.0
    kind: str = "box"


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    background: tuple[float, float, float] = (0.55, 0.7, 0.9)
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        if not self.near > 0:
            raise ValueError(f"near plane must be positive, got {self.near}")
        if not self.far > self.near:
            raise ValueError(f"far plane {self.far} must exceed near plane {self.near}")
        for prim in self.primitives:
            alb = np.asarray(prim.albedo)
            if alb.shape != (3,) or alb.min() < 0 or alb.max() > 1:
                raise ValueError(f"albedo {prim.albedo} outside [0,1]^3")

    def to_dict(self) -> dict:
        return {
            "primitives": [asdict(p) for p in self.primitives],
            "background": list(self.background),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = []
        for p in d["primitives"]:
            p = dict(p)
            kind = p.pop("kind")
            ctor = Sphere if kind == "sphere" else Box
            prims.append(ctor(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
        return cls(prims, tuple(d["background"]), d["near"], d["far"])

    def density_at(self, points: np.ndarray) -> np.ndarray:
        """Constant-amplitude occupancy of ``(N, 3)`` points."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.zeros(len(pts))
        for p in self.primitives:
            c = np.asarray(p.center)
            if p.kind == "sphere":
                inside = np.linalg.norm(pts - c, axis=1) <= p.radius
            else:
                inside = np.all(np.abs(pts - c) <= np.asarray(p.half_extents), axis=1)
            out += p.density * inside
        return out


def default_scene() -> SceneSpec:
    return SceneSpec(
        primitives=[
            Box((0.0, 0.0, -0.75), (1.3, 1.3, 0.1), (0.7, 0.68, 0.6)),
            Sphere((0.0, 0.0, 0.0), 0.6, (0.85, 0.3, 0.2)),
            Box((0.75, -0.55, -0.35), (0.3, 0.3, 0.3), (0.2, 0.55, 0.85)),
            Sphere((-0.6, 0.55, -0.3), 0.35, (0.3, 0.8, 0.35)),
            Box((-0.55, -0.7, -0.45), (0.15, 0.15, 0.2), (0.9, 0.85, 0.25)),
        ],
        background=(0.55, 0.7, 0.9),
        near=2.0,
        far=6.0,
    )


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    pose: np.ndarray  # 4x4 camera-to-world, OpenCV axes (x right, y down, z forward)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"degenerate camera: focal lengths ({self.fx}, {self.fy}) must be positive")
        rot = self.pose[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-8:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def pixel_grid(self) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)

    def rays(self, pixels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions, ``(K, 3)`` each, through ``(row, col)`` pixels."""
        pix = self.pixel_grid() if pixels is None else np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        cam = np.stack(
            [(pix[:, 1] - self.cx) / self.fx, (pix[:, 0] - self.cy) / self.fy, np.ones(len(pix))], axis=1
        )
        dirs = cam @ self.pose[:3, :3].T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.pose[:3, 3], dirs.shape).copy()
        return origins, dirs

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "H": self.height,
            "W": self.width,
            "pose": [float(x) for x in self.pose.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["H"]), int(d["W"]), np.asarray(d["pose"]))


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, position
    return pose


def make_camera(pose, size: int = 64, fov_deg: float = 40.0) -> CameraModel:
    f = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    c = (size - 1) / 2
    return CameraModel(f, f, c, c, size, size, pose)


@dataclass
class AppearanceVariant:
    id: int
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    sky_strength: float = 0.0  # background brightens toward the top row by this fraction

    @classmethod
    def identity(cls, id: int = 0) -> "AppearanceVariant":
        return cls(id)

    @classmethod
    def random(cls, id: int, rng: np.random.Generator) -> "AppearanceVariant":
        return cls(
            id,
            tuple(float(x) for x in rng.uniform(0.4, 1.6, 3)),
            tuple(float(x) for x in rng.uniform(-0.2, 0.2, 3)),
            float(rng.uniform(0.7, 1.4)),
            float(rng.uniform(-0.3, 0.3)),
        )

    @property
    def is_identity(self) -> bool:
        return (
            tuple(self.gain) == (1.0, 1.0, 1.0)
            and tuple(self.tint) == (0.0, 0.0, 0.0)
            and self.gamma == 1.0
            and self.sky_strength == 0.0
        )

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Global gain, tint and gamma; output clamped to [0, 1]."""
        if self.is_identity:
            return image.copy()
        out = np.clip(image * np.asarray(self.gain) + np.asarray(self.tint), 0.0, 1.0)
        if self.gamma != 1.0:
            out = out**self.gamma
        return np.clip(out, 0.0, 1.0)


def intersect(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit in ``[near, far]``: ``(t, normal, albedo)``; ``t = inf`` on a miss."""
    k = len(origins)
    t_best = np.full(k, np.inf)
    normals = np.zeros((k, 3))
    albedo = np.zeros((k, 3))
    for prim in scene.primitives:
        c = np.asarray(prim.center, dtype=np.float64)
        oc = origins - c
        if prim.kind == "sphere":
            b = np.einsum("ij,ij->i", oc, dirs)
            disc = b * b - (np.einsum("ij,ij->i", oc, oc) - prim.radius**2)
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t = np.where(ok, -b - sq, np.inf)
            t = np.where(ok & (t < scene.near), -b + sq, t)
            hit_pt = origins + t[:, None] * dirs
            n = (hit_pt - c) / prim.radius
        else:
            he = np.asarray(prim.half_extents, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t1 = (-he - oc) * inv
                t2 = (he - oc) * inv
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            t_enter = np.max(tmin, axis=1)
            t_exit = np.min(tmax, axis=1)
            ok = (t_exit >= t_enter) & (t_exit > 0)
            t = np.where(ok, np.where(t_enter >= scene.near, t_enter, t_exit), np.inf)
            axis = np.argmax(tmin, axis=1)
            n = np.zeros((k, 3))
            n[np.arange(k), axis] = -np.sign(dirs[np.arange(k), axis])
        t = np.where((t >= scene.near) & (t <= scene.far), t, np.inf)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        normals[closer] = n[closer]
        albedo[closer] = np.asarray(prim.albedo)
    return t_best, normals, albedo


def gt_render(scene: SceneSpec, camera: CameraModel, variant: AppearanceVariant | None = None) -> np.ndarray:
    """Ground-truth ``H x W x 3`` image in [0, 1]."""
    origins, dirs = camera.rays()
    t, normals, albedo = intersect(scene, origins, dirs)
    hit = np.isfinite(t)
    lambert = np.clip(normals @ LIGHT_DIR, 0.0, None)
    shade = albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
    bg = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), shade.shape).copy()
    if variant is not None and variant.sky_strength != 0.0:
        rows = camera.pixel_grid()[:, 0]
        bg *= (1.0 + variant.sky_strength * (1.0 - 2.0 * rows / max(camera.height - 1, 1)))[:, None]
    img = np.where(hit[:, None], shade, np.clip(bg, 0.0, 1.0))
    img = np.clip(img, 0.0, 1.0).reshape(camera.height, camera.width, 3)
    return img if variant is None else variant.apply(img)


@dataclass
class Occluder:
    kind: str  # "rect" or "disk" (ellipse inscribed in the box)
    row: int
    col: int
    height: int
    width: int
    fill: tuple[float, float, float]

    def mask(self, h: int, w: int) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        inside = (
            (rows >= self.row)
            & (rows < self.row + self.height)
            & (cols >= self.col)
            & (cols < self.col + self.width)
        )
        if self.kind == "disk":
            rc = self.row + (self.height - 1) / 2
            cc = self.col + (self.width - 1) / 2
            ell = ((rows - rc) / (self.height / 2)) ** 2 + ((cols - cc) / (self.width / 2)) ** 2 <= 1.0
            inside &= ell
        return inside


@dataclass
class TransientSpec:
    occluders: list = field(default_factory=list)

    def mask(self, h: int, w: int) -> np.ndarray:
        m = np.zeros((h, w), dtype=bool)
        for occ in self.occluders:
            m |= occ.mask(h, w)
        return m

    def to_list(self) -> list:
        return [asdict(o) for o in self.occluders]


def sample_transients(h: int, w: int, rng: np.random.Generator, max_occluders: int = 3, max_coverage: float = 0.4) -> TransientSpec:
    """Random flat-colour occluders covering at most ``max_coverage`` of the image."""
    while True:
        occ = []
        for _ in range(int(rng.integers(1, max_occluders + 1))):
            oh = int(rng.integers(max(2, h // 8), max(3, h // 3) + 1))
            ow = int(rng.integers(max(2, w // 8), max(3, w // 3) + 1))
            # fill on the 8-bit grid so stored PNGs reproduce it exactly
            fill = tuple(float(x) / 255.0 for x in rng.integers(0, 256, 3))
            occ.append(
                Occluder(
                    "rect" if rng.random() < 0.5 else "disk",
                    int(rng.integers(0, h - oh + 1)),
                    int(rng.integers(0, w - ow + 1)),
                    oh,
                    ow,
                    fill,
                )
            )
        spec = TransientSpec(occ)
        if spec.mask(h, w).mean() <= max_coverage:
            return spec


def composite_transients(image: np.ndarray, spec: TransientSpec) -> tuple[np.ndarray, np.ndarray]:
    """Paint occluders over ``image``; returns the new image and its binary mask."""
    h, w = image.shape[:2]
    out = image.copy()
    mask = np.zeros((h, w), dtype=bool)
    for occ in spec.occluders:
        m = occ.mask(h, w)
        out[m] = np.asarray(occ.fill)
        mask |= m
    return out, mask


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float64) / 255.0


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def sample_poses(n: int, rng: np.random.Generator, radius: float = 4.0, elev=(15.0, 60.0)) -> list[np.ndarray]:
    poses = []
    for _ in range(n):
        az = rng.uniform(0.0, 2 * math.pi)
        el = math.radians(rng.uniform(*elev))
        pos = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        poses.append(look_at(pos))
    return poses


def generate_dataset(
    scene: SceneSpec,
    n_train: int,
    n_test: int,
    n_variants: int,
    occluder_rate: float,
    seed: int,
    out_dir,
    image_size: int = 64,
) -> Path:
    """Write a dataset directory (cameras.json, images/, masks/, variants.json, scene.json)."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    if not 0.0 <= occluder_rate <= 1.0:
        raise ValueError("occluder_rate must be a fraction")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    variants = [AppearanceVariant.identity(0)] + [AppearanceVariant.random(i, rng) for i in range(1, n_variants)]
    poses = sample_poses(n_train + n_test, rng)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    records = []
    train_centers = []
    for i in range(n_train):
        cam = make_camera(poses[i], image_size)
        var = variants[i % n_variants]
        img = gt_render(scene, cam, var)
        spec = TransientSpec()
        if occluder_rate > 0 and rng.random() < occluder_rate:
            spec = sample_transients(image_size, image_size, rng)
        img, mask = composite_transients(img, spec)
        cid = f"train_{i:03d}"
        _write(out / "images" / f"{cid}.png", img)
        _write(out / "masks" / f"{cid}.png", (mask * 255).astype(np.uint8))
        records.append({"id": cid, **cam.to_dict(), "split": "train", "variant_id": var.id, "occluders": spec.to_list()})
        train_centers.append((cam.center, var.id, cid))
    for j in range(n_test):
        cam = make_camera(poses[n_train + j], image_size)
        var = variants[int(rng.integers(n_variants))]
        img = gt_render(scene, cam, var)
        cid = f"test_{j:03d}"
        _write(out / "images" / f"{cid}.png", img)
        same = [(np.linalg.norm(c - cam.center), k) for c, v, k in train_centers if v == var.id]
        ref = min(same)[1] if same else None
        records.append({"id": cid, **cam.to_dict(), "split": "test", "variant_id": var.id, "reference_id": ref})
    _dump_json(out / "cameras.json", records)
    _dump_json(out / "variants.json", [asdict(v) for v in variants])
    _dump_json(out / "scene.json", scene.to_dict())
    return out


def _write(path: Path, image: np.ndarray) -> None:
    try:
        write_png(path, image)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


@dataclass
class Dataset:
    root: Path
    cameras: list[dict]
    scene: SceneSpec

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        cam_path = root / "cameras.json"
        if not cam_path.exists():
            raise FileNotFoundError(f"malformed dataset: {cam_path} is missing")
        cameras = json.loads(cam_path.read_text())
        scene_path = root / "scene.json"
        scene = SceneSpec.from_dict(json.loads(scene_path.read_text())) if scene_path.exists() else default_scene()
        return cls(root, cameras, scene)

    def split(self, name: str) -> list[dict]:
        return [c for c in self.cameras if c["split"] == name]

    def record(self, cid: str) -> dict:
        for c in self.cameras:
            if c["id"] == cid:
                return c
        raise KeyError(f"no camera {cid!r} in {self.root}")

    def camera(self, cid: str) -> CameraModel:
        return CameraModel.from_dict(self.record(cid))

    def image(self, cid: str) -> np.ndarray:
        rec = self.record(cid)
        img = read_png(self.root / "images" / f"{cid}.png")
        if img.shape != (rec["H"], rec["W"], 3):
            raise ValueError(f"malformed dataset: {cid}.png has shape {img.shape}, cameras.json says {rec['H']}x{rec['W']}")
        return img

    def mask(self, cid: str) -> np.ndarray | None:
        path = self.root / "masks" / f"{cid}.png"
        if not path.exists():
            return None
        mask = read_png(path)
        return (mask if mask.ndim == 2 else mask[..., 0]) > 0.5
