"""Camera / image / depth data model, dataset I/O and a ray-cast scene generator.

Conventions used everywhere in the package:

* poses are camera-to-world; the camera looks down +z with x right and y down;
* pixel ``(u, v)`` (column, row) has its center at ``(u + 0.5, v + 0.5)``;
* depth is z-depth (distance along the optical axis), not ray length;
* invalid depth is flagged by ``ViewRecord.depth_valid``; the depth array holds
  NaN there so a bad pixel can never unproject silently.
"""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "viewprop-1"
MANIFEST_NAME = "manifest.json"
DEFAULT_DEPTH_SCALE = 2e-4  # 16-bit range covers ~13 m


class DatasetError(Exception):
    """Raised when a dataset on disk cannot be loaded or written."""


class SceneError(ValueError):
    """Raised for invalid synthetic scene descriptions."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width, height, fov_y_deg):
        fy = 0.5 * height / np.tan(np.deg2rad(fov_y_deg) / 2)
        return cls(float(fy), float(fy), width / 2.0, height / 2.0, int(width), int(height))


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64).reshape(4, 4)
        return cls(M[:3, :3].copy(), M[:3, 3].copy())

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise SceneError("look-at direction is parallel to the up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)


@dataclass
class ViewRecord:
    """One posed view. ``image`` is (H, W, 3) float in [0, 1]; ``depth`` is (H, W) meters."""

    id: int
    intrinsics: CameraIntrinsics
    pose: RigidPose
    image: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray = None
    modified: np.ndarray = None

    def __post_init__(self):
        H, W = self.intrinsics.height, self.intrinsics.width
        self.image = np.asarray(self.image, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.image.shape != (H, W, 3):
            raise ValueError(f"view {self.id}: image shape {self.image.shape} != {(H, W, 3)}")
        if self.depth.shape != (H, W):
            raise ValueError(f"view {self.id}: depth shape {self.depth.shape} != {(H, W)}")
        if self.depth_valid is None:
            self.depth_valid = np.isfinite(self.depth) & (self.depth > 0)
        self.depth_valid = np.asarray(self.depth_valid, dtype=bool)
        if np.any(self.depth_valid & ~(np.isfinite(self.depth) & (self.depth > 0))):
            raise ValueError(f"view {self.id}: depth flagged valid must be finite and positive")
        self.depth = np.where(self.depth_valid, self.depth, np.nan)
        if self.modified is None:
            self.modified = np.zeros((H, W), dtype=bool)
        self.modified = np.asarray(self.modified, dtype=bool)
        if self.modified.shape != (H, W):
            raise ValueError(f"view {self.id}: modified mask shape {self.modified.shape} != {(H, W)}")

    @property
    def shape(self):
        return self.intrinsics.height, self.intrinsics.width

    def copy(self):
        return copy.deepcopy(self)

    def with_image(self, image):
        out = self.copy()
        out.image = np.asarray(image, dtype=np.float64).copy()
        return out


@dataclass
class DatasetManifest:
    views: list
    depth_scale: float = DEFAULT_DEPTH_SCALE
    version: str = MANIFEST_VERSION

    def __len__(self):
        return len(self.views)

    def copy(self):
        return DatasetManifest([v.copy() for v in self.views], self.depth_scale, self.version)


def ray_distance_to_zdepth(distance, intrinsics):
    """Convert per-pixel ray length (as NeRF renderers export) to z-depth.

    Multiplies by the cosine of each pixel ray's angle to the optical axis.
    """
    u, v = np.meshgrid(np.arange(intrinsics.width) + 0.5, np.arange(intrinsics.height) + 0.5)
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    return np.asarray(distance, dtype=np.float64) / np.sqrt(x * x + y * y + 1.0)


# --------------------------------------------------------------------------
# file I/O


def _view_entry(view):
    k = view.intrinsics
    return {
        "id": int(view.id),
        "image": f"{view.id:03d}.png",
        "depth": f"{view.id:03d}_depth.png",
        "fx": float(k.fx),
        "fy": float(k.fy),
        "cx": float(k.cx),
        "cy": float(k.cy),
        "width": int(k.width),
        "height": int(k.height),
        "pose": [float(x) for x in view.pose.matrix.reshape(-1)],
    }


def quantize_image(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png_rgb(path, image):
    Image.fromarray(quantize_image(image)).save(path, format="PNG")


def read_png_rgb(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float64) / 255.0


def write_png_mask(path, mask):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_png_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def encode_depth(depth, depth_valid, depth_scale):
    stored = np.zeros(depth.shape, dtype=np.int64)
    stored[depth_valid] = np.round(depth[depth_valid] / depth_scale)
    if stored.max(initial=0) > 65535:
        raise DatasetError(f"depth {np.nanmax(depth):.3f} m exceeds 16-bit range at depth_scale={depth_scale}")
    # a positive depth must never quantize to the invalid code
    stored[depth_valid & (stored == 0)] = 1
    return stored.astype(np.uint16)


def save_dataset(manifest, path):
    """Write ``manifest.json`` plus one RGB PNG and one 16-bit depth PNG per view."""
    views = list(manifest.views)
    for v in views:
        H, W = v.shape
        if v.image.shape != (H, W, 3) or v.depth.shape != (H, W):
            raise DatasetError(f"view {v.id}: dimension mismatch")
    try:
        os.makedirs(path, exist_ok=True)
        entries = []
        for v in views:
            entry = _view_entry(v)
            write_png_rgb(os.path.join(path, entry["image"]), v.image)
            stored = encode_depth(v.depth, v.depth_valid, manifest.depth_scale)
            Image.fromarray(stored).save(os.path.join(path, entry["depth"]), format="PNG")
            entries.append(entry)
        doc = {"version": manifest.version, "depth_scale": float(manifest.depth_scale), "views": entries}
        with open(os.path.join(path, MANIFEST_NAME), "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path):
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path) as f:
            doc = json.load(f)
    except FileNotFoundError as exc:
        raise DatasetError(f"no {MANIFEST_NAME} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc

    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {doc.get('version')!r}")
    try:
        depth_scale = float(doc["depth_scale"])
        entries = list(doc["views"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest: {exc}") from exc
    if depth_scale <= 0:
        raise DatasetError("depth_scale must be positive")

    ids = [e.get("id") for e in entries]
    if sorted(ids) != list(range(len(entries))):
        raise DatasetError(f"view ids must be unique and contiguous from 0, got {ids}")

    views = []
    for e in sorted(entries, key=lambda e: e["id"]):
        vid = e["id"]
        try:
            intr = CameraIntrinsics(float(e["fx"]), float(e["fy"]), float(e["cx"]), float(e["cy"]),
                                    int(e["width"]), int(e["height"]))
            pose = RigidPose.from_matrix(np.array(e["pose"], dtype=np.float64))
            image_path = os.path.join(path, e["image"])
            depth_path = os.path.join(path, e["depth"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"view {vid}: malformed entry ({exc})") from exc
        for p in (image_path, depth_path):
            if not os.path.isfile(p):
                raise DatasetError(f"view {vid}: missing file {p}")
        image = read_png_rgb(image_path)
        with Image.open(depth_path) as im:
            stored = np.asarray(im).astype(np.int64)
        if image.shape[:2] != stored.shape:
            raise DatasetError(f"view {vid}: image {image.shape[:2]} and depth {stored.shape} differ in size")
        if image.shape[:2] != (intr.height, intr.width):
            raise DatasetError(f"view {vid}: files are {image.shape[:2]}, manifest says {(intr.height, intr.width)}")
        valid = stored > 0
        depth = np.where(valid, stored * depth_scale, np.nan)
        views.append(ViewRecord(vid, intr, pose, image, depth, valid))
    logger.info("loaded %d views from %s", len(views), path)
    return DatasetManifest(views, depth_scale, doc["version"])


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Plane:
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    period: float = 0.5
    color_a: tuple = (0.9, 0.55, 0.3)
    color_b: tuple = (0.2, 0.45, 0.75)

    def __post_init__(self):
        if not self.period > 0:
            raise SceneError("texture period must be positive")
        n = np.asarray(self.normal, dtype=np.float64)
        if np.linalg.norm(n) == 0:
            raise SceneError("plane normal must be nonzero")


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 1.0)
    radius: float = 0.5
    albedo: tuple = (0.85, 0.25, 0.3)

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError("sphere radius must be positive")


@dataclass
class CameraRing:
    count: int = 20
    radius: float = 2.0
    height: float = 3.0
    look_at: tuple = (0.0, 0.0, 0.0)
    resolution: int = 128
    fov_deg: float = 60.0
    arc_deg: float = 360.0
    jitter_deg: float = 2.0

    def __post_init__(self):
        if self.count < 2:
            raise SceneError("camera count ≥ 2 required")
        if self.resolution < 1:
            raise SceneError("resolution must be positive")


@dataclass
class SyntheticSceneSpec:
    primitives: list = field(default_factory=list)
    light_direction: tuple = (0.3, -0.2, 1.0)
    camera_ring: CameraRing = field(default_factory=CameraRing)
    ambient: float = 0.25
    background: tuple = (0.05, 0.05, 0.05)
    supersample: int = 3

    def __post_init__(self):
        if not self.primitives:
            raise SceneError("scene needs at least one primitive")
        light = np.asarray(self.light_direction, dtype=np.float64)
        if np.linalg.norm(light) == 0:
            raise SceneError("light direction must be nonzero")

    @classmethod
    def from_dict(cls, doc):
        prims = []
        for p in doc.get("primitives", []):
            p = dict(p)
            kind = p.pop("type", None)
            if kind == "plane":
                prims.append(Plane(**p))
            elif kind == "sphere":
                prims.append(Sphere(**p))
            else:
                raise SceneError(f"unknown primitive type {kind!r}")
        kw = {k: v for k, v in doc.items() if k not in ("primitives", "camera_ring")}
        ring = CameraRing(**doc.get("camera_ring", {}))
        return cls(primitives=prims, camera_ring=ring, **kw)


def preset(name, views=20, resolution=128):
    """Named scenes used by the CLI and the test-suite."""
    if name == "plane-ring":
        ring = CameraRing(count=views, radius=1.2, height=3.0, resolution=resolution)
        return SyntheticSceneSpec([Plane(period=0.5)], camera_ring=ring)
    if name == "sphere-over-plane":
        ring = CameraRing(count=views, radius=2.5, height=2.5, resolution=resolution)
        return SyntheticSceneSpec([Plane(period=0.5), Sphere(center=(0.0, 0.0, 0.9), radius=0.4)],
                                  camera_ring=ring)
    raise SceneError(f"unknown preset {name!r} (known: plane-ring, sphere-over-plane)")


PRESETS = ("plane-ring", "sphere-over-plane")


def ring_poses(ring, seed):
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-ring.jitter_deg, ring.jitter_deg, size=ring.count)
    full = ring.arc_deg >= 360.0
    step = ring.arc_deg / (ring.count if full else ring.count - 1)
    start = 0.0 if full else -ring.arc_deg / 2
    center = np.asarray(ring.look_at, dtype=np.float64)
    poses = []
    for k in range(ring.count):
        a = np.deg2rad(start + k * step + jitter[k])
        eye = center + np.array([ring.radius * np.cos(a), ring.radius * np.sin(a), ring.height])
        poses.append(RigidPose.look_at(eye, center))
    return poses


def _intersect(primitives, origins, dirs):
    """First-hit ray parameter (== z-depth for camera-frame z=1 directions) and primitive index."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    which = np.full(n, -1)
    for i, prim in enumerate(primitives):
        if isinstance(prim, Plane):
            normal = np.asarray(prim.normal, dtype=np.float64)
            denom = dirs @ normal
            num = (np.asarray(prim.point, dtype=np.float64) - origins) @ normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(np.abs(denom) > 1e-15, num / denom, np.inf)
        else:
            c = np.asarray(prim.center, dtype=np.float64)
            oc = origins - c
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = 2.0 * np.einsum("ij,ij->i", dirs, oc)
            cc = np.einsum("ij,ij->i", oc, oc) - prim.radius ** 2
            disc = b * b - 4 * a * cc
            with np.errstate(invalid="ignore"):
                s = np.where(disc >= 0, (-b - np.sqrt(disc)) / (2 * a), np.inf)
        s = np.where(s > 1e-9, s, np.inf)
        closer = s < best
        best[closer] = s[closer]
        which[closer] = i
    return best, which


def _shade(primitives, points, which, light, ambient, background):
    out = np.tile(np.asarray(background, dtype=np.float64), (points.shape[0], 1))
    for i, prim in enumerate(primitives):
        sel = which == i
        if not sel.any():
            continue
        P = points[sel]
        if isinstance(prim, Plane):
            normal = np.asarray(prim.normal, dtype=np.float64)
            normal = normal / np.linalg.norm(normal)
            helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            e1 = np.cross(normal, helper)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(normal, e1)
            rel = P - np.asarray(prim.point, dtype=np.float64)
            parity = (np.floor(rel @ e1 / prim.period) + np.floor(rel @ e2 / prim.period)) % 2
            albedo = np.where(parity[:, None] == 0, np.asarray(prim.color_a), np.asarray(prim.color_b))
            normals = np.broadcast_to(normal, P.shape)
        else:
            normals = (P - np.asarray(prim.center, dtype=np.float64)) / prim.radius
            albedo = np.broadcast_to(np.asarray(prim.albedo, dtype=np.float64), P.shape)
        lambert = np.clip(normals @ light, 0.0, None)
        out[sel] = albedo * (ambient + (1.0 - ambient) * lambert)[:, None]
    return np.clip(out, 0.0, 1.0)


def pixel_rays(intrinsics, pose, offsets=((0.5, 0.5),)):
    """World-space ray directions with unit camera-frame z, one set per sub-pixel offset."""
    H, W = intrinsics.height, intrinsics.width
    u, v = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    rays = []
    for du, dv in offsets:
        cam = np.stack([(u + du - intrinsics.cx) / intrinsics.fx,
                        (v + dv - intrinsics.cy) / intrinsics.fy,
                        np.ones_like(u)], axis=-1).reshape(-1, 3)
        rays.append(cam @ pose.rotation.T)
    return rays


def render_view(spec, intrinsics, pose):
    """Ray-cast one camera. Returns (image, depth, valid)."""
    light = np.asarray(spec.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    H, W = intrinsics.height, intrinsics.width
    for prim in spec.primitives:
        if isinstance(prim, Sphere):
            if np.linalg.norm(pose.translation - np.asarray(prim.center)) <= prim.radius:
                raise SceneError("camera inside a sphere")

    (center_dirs,) = pixel_rays(intrinsics, pose)
    origins = np.broadcast_to(pose.translation, center_dirs.shape)
    depth, which = _intersect(spec.primitives, origins, center_dirs)
    valid = np.isfinite(depth)

    n = max(int(spec.supersample), 1)
    offsets = [((i + 0.5) / n, (j + 0.5) / n) for j in range(n) for i in range(n)]
    image = np.zeros((H * W, 3))
    for dirs in pixel_rays(intrinsics, pose, offsets):
        s, w = _intersect(spec.primitives, origins, dirs)
        hit = np.where(np.isfinite(s), s, 0.0)
        image += _shade(spec.primitives, origins + hit[:, None] * dirs, w, light, spec.ambient, spec.background)
    image /= len(offsets)
    return image.reshape(H, W, 3), np.where(valid, depth, np.nan).reshape(H, W), valid.reshape(H, W)


def gen_synthetic(spec, seed=0, depth_scale=DEFAULT_DEPTH_SCALE):
    """Render every ring camera of ``spec``; deterministic given ``seed`` (which jitters the ring)."""
    ring = spec.camera_ring
    intr = CameraIntrinsics.from_fov(ring.resolution, ring.resolution, ring.fov_deg)
    views = []
    for k, pose in enumerate(ring_poses(ring, seed)):
        image, depth, valid = render_view(spec, intr, pose)
        views.append(ViewRecord(k, intr, pose, image, depth, valid))
    return DatasetManifest(views, depth_scale)
