"""Depth-guided correspondence between views.

Everything here is gather-based: a target pixel is unprojected with the
target's own depth, projected into the source camera, and the source is
sampled there. Colors and depths are sampled bilinearly, masks with nearest
neighbour.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter

logger = logging.getLogger(__name__)

Z_EPS = 1e-6
CENTER_TOL = 1e-6


@dataclass(frozen=True)
class FilterPolicy:
    """Thresholds deciding which correspondences are trusted.

    ``occlusion_margin`` and ``occlusion_radius`` drive a min-depth test around
    the sampled source location; it catches points hidden just behind a
    foreground silhouette, where bilinear depth sampling alone reads the
    background through the edge.
    """

    max_reprojection_error: float = 5.0
    depth_agreement_tolerance: float = 0.01
    occlusion_margin: float = 0.05
    occlusion_radius: int = 1
    require_in_frustum: bool = True

    def __post_init__(self):
        if not self.max_reprojection_error > 0:
            raise ValueError("max_reprojection_error must be positive")
        if self.depth_agreement_tolerance < 0:
            raise ValueError("depth_agreement_tolerance must be nonnegative")
        if self.occlusion_margin < 0 or self.occlusion_radius < 0:
            raise ValueError("occlusion settings must be nonnegative")
        if not self.require_in_frustum:
            raise ValueError("require_in_frustum is always true")


@dataclass
class PointCloud:
    pixels: np.ndarray  # (N, 2) integer (u, v)
    positions: np.ndarray  # (N, 3) world meters

    def __len__(self):
        return len(self.positions)


@dataclass
class Projection:
    uv: np.ndarray
    z: np.ndarray
    in_frustum: np.ndarray


@dataclass
class CorrespondenceMap:
    """Per target pixel: where it lands in the source, and whether to trust it."""

    target_view_id: int
    source_view_id: int
    source_uv: np.ndarray  # (H, W, 2), NaN where absent
    projected_depth: np.ndarray  # (H, W)
    reprojection_error: np.ndarray  # (H, W), inf where absent
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.valid.shape

    def validity_ratio(self):
        return float(self.valid.mean())


# --------------------------------------------------------------------------
# camera maps


def _pixel_grid(height, width):
    v, u = np.mgrid[0:height, 0:width]
    return u, v


def camera_points(u, v, depth, intrinsics):
    """Camera-frame points for continuous pixel coordinates ``(u, v)`` at z-depth ``depth``."""
    x = (u - intrinsics.cx) / intrinsics.fx * depth
    y = (v - intrinsics.cy) / intrinsics.fy * depth
    return np.stack([x, y, depth], axis=-1)


def to_world(points, pose):
    return points @ pose.rotation.T + pose.translation


def to_camera(points, pose):
    return (points - pose.translation) @ pose.rotation


def project_camera(points_cam, intrinsics):
    z = points_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * points_cam[..., 0] / z + intrinsics.cx
        v = intrinsics.fy * points_cam[..., 1] / z + intrinsics.cy
    in_front = z > Z_EPS
    inside = in_front & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    uv = np.stack([np.where(in_front, u, np.nan), np.where(in_front, v, np.nan)], axis=-1)
    return uv, z, inside


def unproject(view):
    """World point for every valid-depth pixel, pixel centers at +0.5."""
    u, v = _pixel_grid(*view.shape)
    sel = view.depth_valid
    pts = camera_points(u[sel] + 0.5, v[sel] + 0.5, view.depth[sel], view.intrinsics)
    return PointCloud(np.stack([u[sel], v[sel]], axis=-1), to_world(pts, view.pose))


def project_points(cloud, target):
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    uv, z, inside = project_camera(to_camera(positions, target.pose), target.intrinsics)
    return Projection(uv, z, inside)


# --------------------------------------------------------------------------
# sampling


def _bilinear_setup(uv, height, width):
    # continuous pixel coords -> array coords (pixel centers at integers)
    x = np.clip(uv[..., 0] - 0.5, 0.0, width - 1.0)
    y = np.clip(uv[..., 1] - 0.5, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    return x0, x1, y0, y1, fx, fy


def bilinear_sample(array, uv):
    """Sample ``array`` (H, W[, C]) at continuous pixel coords; reads are clamped to bounds."""
    H, W = array.shape[:2]
    uv = np.nan_to_num(uv, nan=0.0)
    x0, x1, y0, y1, fx, fy = _bilinear_setup(uv, H, W)
    if array.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = array[y0, x0] * (1 - fx) + array[y0, x1] * fx
    bottom = array[y1, x0] * (1 - fx) + array[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def bilinear_depth(view, uv):
    """Bilinear z-depth at ``uv``; invalid unless every contributing neighbour is valid."""
    H, W = view.shape
    x0, x1, y0, y1, fx, fy = _bilinear_setup(np.nan_to_num(uv, nan=0.0), H, W)
    d = np.where(view.depth_valid, view.depth, 0.0)
    ok = view.depth_valid
    w00, w01, w10, w11 = (1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy
    good = ((w00 == 0) | ok[y0, x0]) & ((w01 == 0) | ok[y0, x1]) \
        & ((w10 == 0) | ok[y1, x0]) & ((w11 == 0) | ok[y1, x1])
    value = d[y0, x0] * w00 + d[y0, x1] * w01 + d[y1, x0] * w10 + d[y1, x1] * w11
    return np.where(good, value, np.nan), good


def nearest_sample(array, uv):
    H, W = array.shape[:2]
    uv = np.nan_to_num(uv, nan=0.0)
    x = np.clip(np.floor(uv[..., 0]).astype(np.int64), 0, W - 1)
    y = np.clip(np.floor(uv[..., 1]).astype(np.int64), 0, H - 1)
    return array[y, x]


def _min_filter_depth(view, radius):
    d = np.where(view.depth_valid, view.depth, np.inf)
    if radius == 0:
        return d
    return minimum_filter(d, size=2 * radius + 1, mode="nearest")


# --------------------------------------------------------------------------
# correspondences


def build_correspondences(target, source, policy=None):
    """Map every target pixel into ``source``, flagging occluded / inconsistent pairs.

    The reprojection error is the cycle error: target pixel -> source via the
    target depth, back into the target via the source depth sampled at the
    landing point.
    """
    policy = policy or FilterPolicy()
    H, W = target.shape
    u, v = _pixel_grid(H, W)
    centers = np.stack([u + 0.5, v + 0.5], axis=-1).astype(np.float64)

    world = to_world(camera_points(centers[..., 0], centers[..., 1], target.depth, target.intrinsics), target.pose)
    src_uv, src_z, in_src = project_camera(to_camera(world, source.pose), source.intrinsics)
    in_src &= target.depth_valid

    src_depth, src_depth_ok = bilinear_depth(source, src_uv)
    back_world = to_world(camera_points(src_uv[..., 0], src_uv[..., 1], src_depth, source.intrinsics), source.pose)
    back_uv, _, in_tgt = project_camera(to_camera(back_world, target.pose), target.intrinsics)

    reproj = np.linalg.norm(back_uv - centers, axis=-1)
    reproj = np.where(in_src & src_depth_ok & np.isfinite(reproj), reproj, np.inf)

    with np.errstate(invalid="ignore"):
        agree = np.abs(src_z - src_depth) <= policy.depth_agreement_tolerance * src_z
        near_min = nearest_sample(_min_filter_depth(source, policy.occlusion_radius), src_uv)
        # on a pixel center the depth sample is that pixel's own value, so no edge is straddled
        off = np.abs(src_uv - np.floor(src_uv) - 0.5).max(axis=-1)
        unoccluded = (near_min >= src_z * (1.0 - policy.occlusion_margin)) | (off <= CENTER_TOL)

    valid = in_src & src_depth_ok & in_tgt & agree & unoccluded & (reproj <= policy.max_reprojection_error)
    source_uv = np.where(in_src[..., None], src_uv, np.nan)
    return CorrespondenceMap(target.id, source.id, source_uv,
                             np.where(in_src, src_z, np.nan), reproj, valid)


def transfer_colors(cmap, source_image):
    """Gather source colors into the target grid; black and unmasked where invalid."""
    out = np.zeros(cmap.shape + (3,))
    mask = cmap.valid.copy()
    if mask.any():
        out[mask] = bilinear_sample(source_image, cmap.source_uv[mask])
    return out, mask


def identity_correspondences(view):
    H, W = view.shape
    u, v = _pixel_grid(H, W)
    uv = np.stack([u + 0.5, v + 0.5], axis=-1).astype(np.float64)
    ok = view.depth_valid
    return CorrespondenceMap(view.id, view.id, np.where(ok[..., None], uv, np.nan),
                             view.depth.copy(), np.where(ok, 0.0, np.inf), ok.copy())


# --------------------------------------------------------------------------
# mask propagation


def _gather_mask(cmap, source_mask):
    out = np.zeros(cmap.shape, dtype=bool)
    if cmap.valid.any():
        out[cmap.valid] = nearest_sample(source_mask, cmap.source_uv[cmap.valid])
    return out, cmap.valid


def _scatter_mask(cmap, source_mask, target_shape):
    """Splat masked source pixels (with valid source->target correspondences) into the target."""
    out = np.zeros(target_shape, dtype=bool)
    sel = cmap.valid & source_mask
    if sel.any():
        uv = cmap.source_uv[sel]
        H, W = target_shape
        x = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, W - 1)
        y = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, H - 1)
        out[y, x] = True
    return out


def _iou(a, b):
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def propagate_mask(seed_view, seed_mask, all_views, overlap_threshold=0.5, policy=None):
    """Carry a binary mask from ``seed_view`` to the other views, nearest first.

    A candidate view pulls its mask from the accepted views (gather); each
    pixel takes its value from the first accepted view that sees it, seed
    first, so boundary error does not compound. The accepted masks are also
    pushed the other way (scatter). The view is accepted when gather and
    scatter agree with IoU at least ``overlap_threshold``.
    """
    policy = policy or FilterPolicy()
    seed_mask = np.asarray(seed_mask, dtype=bool)
    if seed_mask.shape != seed_view.shape:
        raise ValueError(f"seed mask shape {seed_mask.shape} != view shape {seed_view.shape}")
    if not seed_mask.any():
        raise ValueError("seed mask is empty")

    masks = {seed_view.id: seed_mask.copy()}
    accepted = [seed_view]
    order = sorted((v for v in all_views if v.id != seed_view.id),
                   key=lambda v: (np.linalg.norm(v.pose.translation - seed_view.pose.translation), v.id))
    for view in order:
        gathered = np.zeros(view.shape, dtype=bool)
        covered = np.zeros(view.shape, dtype=bool)
        scattered = np.zeros(view.shape, dtype=bool)
        for a in accepted:
            g, seen = _gather_mask(build_correspondences(view, a, policy), masks[a.id])
            fresh = seen & ~covered
            gathered[fresh] = g[fresh]
            covered |= seen
            scattered |= _scatter_mask(build_correspondences(a, view, policy), masks[a.id], view.shape)
        overlap = _iou(gathered, scattered)
        logger.debug("mask propagation: view %d overlap %.4f", view.id, overlap)
        if gathered.any() and overlap >= overlap_threshold:
            masks[view.id] = gathered
            accepted.append(view)
    return {v.id: masks[v.id] for v in accepted}


# --------------------------------------------------------------------------
# debug dump

_HEADER = struct.Struct("<4sIIII")
_RECORD = np.dtype([("u", "<f4"), ("v", "<f4"), ("error", "<f4"), ("valid", "u1")])


def dump_correspondences(cmap, path):
    """Flat little-endian file: magic, target id, source id, width, height, then one record per pixel."""
    H, W = cmap.shape
    rec = np.zeros(H * W, dtype=_RECORD)
    rec["u"] = cmap.source_uv[..., 0].reshape(-1)
    rec["v"] = cmap.source_uv[..., 1].reshape(-1)
    rec["error"] = cmap.reprojection_error.reshape(-1)
    rec["valid"] = cmap.valid.reshape(-1)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(b"VPCM", cmap.target_view_id, cmap.source_view_id, W, H))
        f.write(rec.tobytes())


def load_correspondences(path):
    with open(path, "rb") as f:
        magic, tid, sid, W, H = _HEADER.unpack(f.read(_HEADER.size))
        if magic != b"VPCM":
            raise ValueError(f"{path} is not a correspondence dump")
        rec = np.frombuffer(f.read(), dtype=_RECORD, count=W * H).reshape(H, W)
    uv = np.stack([rec["u"], rec["v"]], axis=-1).astype(np.float64)
    return CorrespondenceMap(tid, sid, uv, np.full((H, W), np.nan),
                             rec["error"].astype(np.float64), rec["valid"].astype(bool))
