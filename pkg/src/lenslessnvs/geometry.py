"""Pinhole cameras, rays, and multi-view bookkeeping.

Internal convention: right-handed, camera looks down -z, x right, y up,
world-from-camera pose (R, t). LLFF's [down, right, backwards] axis order is
converted at the file boundary and nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imgcore import Image


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (-self.width <= self.cx <= 2 * self.width
                and -self.height <= self.cy <= 2 * self.height):
            raise GeometryError("principal point implausibly far outside the image")


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform: x_world = R @ x_cam + t."""

    rotation: np.ndarray   # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise GeometryError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        """World-space viewing direction (camera -z axis)."""
        return -self.rotation[:, 2]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraView:
    """A posed view: image (ground truth or Wiener coarse estimate), pose,
    intrinsics, and optionally extracted feature maps."""

    image: Image
    pose: Pose
    intrinsics: Intrinsics
    features: list | None = None

    def __post_init__(self):
        if (self.image.height != self.intrinsics.height
                or self.image.width != self.intrinsics.width):
            raise GeometryError("image dimensions disagree with intrinsics")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise GeometryError("need 0 < near < far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RaySamples:
    t_values: np.ndarray   # (K,) ascending
    positions: np.ndarray  # (K, 3)


def pixel_direction_cam(intr: Intrinsics, px: float, py: float) -> np.ndarray:
    """Camera-space direction through a pixel center (not normalized)."""
    return np.array([(px - intr.cx) / intr.fx,
                     -(py - intr.cy) / intr.fy,
                     -1.0])


def ray_for_pixel(view: CameraView, px: float, py: float,
                  near: float, far: float) -> Ray:
    intr = view.intrinsics
    if not (0 <= px < intr.width and 0 <= py < intr.height):
        raise GeometryError(f"pixel ({px}, {py}) outside {intr.width}x{intr.height}")
    d = view.pose.rotation @ pixel_direction_cam(intr, px, py)
    d = d / np.linalg.norm(d)
    return Ray(view.pose.center, d, near, far)


def rays_for_pixels(view: CameraView, pixels: np.ndarray,
                    near: float, far: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray origins/directions for an (M, 2) array of (px, py)."""
    intr = view.intrinsics
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack([(pixels[:, 0] - intr.cx) / intr.fx,
                      -(pixels[:, 1] - intr.cy) / intr.fy,
                      -np.ones(len(pixels))], axis=-1)
    d = d_cam @ view.pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(view.pose.center, d.shape)
    return o.copy(), d


def sample_stratified(ray: Ray, k: int, mode: str = "uniform-disparity",
                      jitter_seed: int | None = None) -> RaySamples:
    """K stratified samples in [near, far]; bin centers unless jittered.

    uniform-disparity strata are equal in 1/t, putting more samples near the
    near plane (the right bias for forward-facing scenes).
    """
    if k < 2:
        raise GeometryError("need at least 2 samples per ray")
    edges = np.linspace(0.0, 1.0, k + 1)
    if jitter_seed is None:
        u = (edges[:-1] + edges[1:]) / 2.0
    else:
        rng = np.random.default_rng(jitter_seed)
        u = edges[:-1] + rng.random(k) * (edges[1:] - edges[:-1])
    if mode == "uniform-depth":
        t = ray.near + u * (ray.far - ray.near)
    elif mode == "uniform-disparity":
        t = 1.0 / (1.0 / ray.near + u * (1.0 / ray.far - 1.0 / ray.near))
    else:
        raise GeometryError(f"unknown sampling mode {mode!r}")
    t = np.sort(t)
    positions = ray.origin + t[:, None] * ray.direction
    return RaySamples(t, positions)


def project(points: np.ndarray, view: CameraView):
    """Project world points into a view.

    Returns (pixels (..., 2), depth (...,), valid (...,)): valid is False
    behind the camera (depth <= 0); such pixels are NaN.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cam = view.pose.world_to_camera(pts)
    depth = -cam[..., 2]
    valid = depth > 0
    intr = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intr.cx + intr.fx * cam[..., 0] / depth
        py = intr.cy - intr.fy * cam[..., 1] / depth
    pix = np.stack([px, py], axis=-1)
    pix[~valid] = np.nan
    if single:
        return pix[0], float(depth[0]), bool(valid[0])
    return pix, depth, valid


def unproject(px: float, py: float, depth: float, view: CameraView) -> np.ndarray:
    if depth <= 0:
        raise GeometryError("unproject needs positive depth")
    intr = view.intrinsics
    cam = np.array([(px - intr.cx) / intr.fx * depth,
                    -(py - intr.cy) / intr.fy * depth,
                    -depth])
    return view.pose.camera_to_world(cam)


def select_source_views(target_pose: Pose, candidates: list[CameraView],
                        n: int) -> list[int]:
    """Indices of the n candidates nearest in viewing direction.

    Ties break by camera-center distance, then by input index; a candidate at
    exactly the target pose is excluded. Deterministic and stable under
    candidate shuffling (keys depend only on geometry and original index).
    """
    scored = []
    for i, cand in enumerate(candidates):
        same_pose = (np.allclose(cand.pose.rotation, target_pose.rotation)
                     and np.allclose(cand.pose.translation, target_pose.translation))
        if same_pose:
            continue
        cosang = float(np.clip(np.dot(cand.pose.forward, target_pose.forward), -1, 1))
        ang = float(np.arccos(cosang))
        dist = float(np.linalg.norm(cand.pose.center - target_pose.center))
        scored.append((ang, dist, i))
    if len(scored) < n:
        raise GeometryError(f"need {n} source views, only {len(scored)} candidates")
    scored.sort()
    return [i for _, _, i in scored[:n]]


def bilinear_sample(feature_map: np.ndarray, px: np.ndarray):
    """Bilinear interpolation of an (H, W, C) map at (..., 2) pixel coords.

    Coordinates outside [0, W-1] x [0, H-1] yield zeros with in_bounds False.
    Returns (values (..., C), in_bounds (...,)).
    """
    fm = np.asarray(feature_map)
    h, w = fm.shape[:2]
    p = np.asarray(px, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    finite = np.isfinite(x) & np.isfinite(y)
    inb = finite & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(inb, x, 0.0)
    ys = np.where(inb, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros_like(xs, int)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros_like(ys, int)
    fx = xs - x0
    fy = ys - y0
    v00 = fm[y0, x0]
    v01 = fm[y0, x0 + 1] if w > 1 else v00
    v10 = fm[y0 + 1, x0] if h > 1 else v00
    v11 = fm[y0 + 1, x0 + 1] if (h > 1 and w > 1) else v00
    fx = fx[..., None]
    fy = fy[..., None]
    out = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
           + v10 * (1 - fx) * fy + v11 * fx * fy)
    out = out * inb[..., None]
    return out, inb


# ---------------------------------------------------------------------------
# LLFF poses_bounds I/O
# ---------------------------------------------------------------------------

def llff_to_internal(mat3x5: np.ndarray) -> tuple[Pose, float]:
    """Convert one LLFF 3x5 row ([down right back | t] plus [h w f] column)
    to our [right up back] pose. Returns (pose, focal)."""
    m = np.asarray(mat3x5, dtype=np.float64).reshape(3, 5)
    down, right, back = m[:, 0], m[:, 1], m[:, 2]
    r = np.stack([right, -down, back], axis=1)
    # re-orthonormalize; file floats may carry rounding error
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return Pose(r, m[:, 3]), float(m[2, 4])


def internal_to_llff(pose: Pose, h: int, w: int, f: float) -> np.ndarray:
    r = pose.rotation
    m = np.zeros((3, 5))
    m[:, 0] = -r[:, 1]   # down = -up
    m[:, 1] = r[:, 0]    # right
    m[:, 2] = r[:, 2]    # back
    m[:, 3] = pose.translation
    m[:, 4] = [h, w, f]
    return m


def load_poses_bounds(path) -> tuple[list[tuple[Pose, float]], np.ndarray, tuple[int, int]]:
    """Read an LLFF poses_bounds NPY file (N x 17 float64).

    Returns ([(pose, focal)], bounds (N, 2), (height, width)).
    """
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 2 or arr.shape[1] != 17:
        raise GeometryError(f"poses_bounds must be N x 17, got {arr.shape}")
    if arr.dtype != np.float64:
        raise GeometryError(f"poses_bounds must be float64, got {arr.dtype}")
    poses = []
    hw = None
    for row in arr:
        m = row[:15].reshape(3, 5)
        pose, focal = llff_to_internal(m)
        poses.append((pose, focal))
        hw = (int(round(m[0, 4])), int(round(m[1, 4])))
    bounds = arr[:, 15:17]
    if np.any(bounds[:, 0] >= bounds[:, 1]) or np.any(bounds <= 0):
        raise GeometryError("invalid near/far bounds")
    return poses, bounds, hw


def save_poses_bounds(path, poses_focals, bounds, h: int, w: int):
    rows = []
    for (pose, focal), (near, far) in zip(poses_focals, np.asarray(bounds)):
        m = internal_to_llff(pose, h, w, focal)
        rows.append(np.concatenate([m.reshape(-1), [near, far]]))
    np.save(path, np.asarray(rows, dtype=np.float64))
