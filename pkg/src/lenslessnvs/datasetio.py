"""Scene ingestion and synthesis.

Three ways to get a Scene: load an LLFF-layout directory, generate a
procedural one (analytic plane textures, exact poses, noise-free ground
truth), or derive a lensless variant of an existing scene by simulating
captures and Wiener-recovering a coarse estimate per view.

Directory layout for synthesized scenes:
    scene/{gt,lensless,coarse}/NNN.pfm  +  poses_bounds.npy  +  manifest.txt
Captures and coarse estimates round through float32 (the PFM precision) at
synthesis time, so recomputing the coarse estimate from the stored capture
reproduces the stored file byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraView,
    GeometryError,
    Intrinsics,
    Pose,
    load_poses_bounds,
    rays_for_pixels,
    save_poses_bounds,
)
from .imgcore import Image, load_pfm, load_png, save_pfm
from .lensless import (
    DEFAULT_NSR,
    DEFAULT_SNR_DB,
    Psf,
    psf_to_grayscale,
    simulate_capture,
    wiener_deconvolve,
)


class DatasetError(ValueError):
    pass


@dataclass
class Scene:
    views: list[CameraView]
    bounds: tuple[float, float]
    name: str = "scene"
    layout: str = "procedural"
    captures: list[Image] | None = None
    coarse: list[Image] | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.views) < 2:
            raise DatasetError("a scene needs at least 2 views")
        near, far = self.bounds
        if not 0 < near < far:
            raise DatasetError("need 0 < near < far")

    def coarse_view(self, i: int) -> CameraView:
        """View i with the Wiener coarse estimate as its image (falls back to
        ground truth when the scene has no lensless derivation)."""
        v = self.views[i]
        if self.coarse is None:
            return v
        return CameraView(self.coarse[i], v.pose, v.intrinsics)


# ---------------------------------------------------------------------------
# Procedural scenes: textured fronto-parallel planes viewed from a camera ring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlaneSpec:
    depth: float                 # distance along -z from the ring plane
    half_extent: float           # half side length; inf for a backdrop
    texture: str                 # "checker" or "sine"
    scale: float = 0.25          # texture period in world units
    color_a: tuple = (0.9, 0.3, 0.2)
    color_b: tuple = (0.15, 0.5, 0.85)
    offset: tuple = (0.0, 0.0)   # plane center in x, y


def default_plane_layout(span: float = 1.0) -> list[PlaneSpec]:
    return [
        PlaneSpec(2.0, 0.45 * span, "checker", 0.18 * span,
                  (0.95, 0.55, 0.15), (0.1, 0.2, 0.6), (-0.25 * span, 0.1 * span)),
        PlaneSpec(3.0, 0.7 * span, "sine", 0.5 * span,
                  (0.2, 0.8, 0.4), (0.7, 0.1, 0.5), (0.3 * span, -0.2 * span)),
        PlaneSpec(5.0, float("inf"), "checker", 0.9 * span,
                  (0.75, 0.75, 0.7), (0.35, 0.3, 0.45)),
    ]


def _texture(spec: PlaneSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    ca = np.asarray(spec.color_a)
    cb = np.asarray(spec.color_b)
    if spec.texture == "checker":
        parity = (np.floor(u / spec.scale) + np.floor(v / spec.scale)) % 2
        return np.where(parity[..., None] > 0.5, cb, ca)
    if spec.texture == "sine":
        w = 0.5 + 0.5 * np.sin(2 * np.pi * u / spec.scale) * np.sin(2 * np.pi * v / spec.scale)
        return ca + (cb - ca) * w[..., None]
    raise DatasetError(f"unknown texture {spec.texture!r}")


def shade_points(planes: list[PlaneSpec], origins: np.ndarray,
                 dirs: np.ndarray) -> np.ndarray:
    """Exact color for rays o + t d: nearest plane hit, analytic texture."""
    n = len(origins)
    colors = np.zeros((n, 3))
    best_t = np.full(n, np.inf)
    for spec in planes:
        z0 = -spec.depth
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z0 - origins[:, 2]) / dz
        x = origins[:, 0] + t * dirs[:, 0] - spec.offset[0]
        y = origins[:, 1] + t * dirs[:, 1] - spec.offset[1]
        hit = (dz < 0) & (t > 0) & (t < best_t)
        if np.isfinite(spec.half_extent):
            hit &= (np.abs(x) <= spec.half_extent) & (np.abs(y) <= spec.half_extent)
        if not hit.any():
            continue
        colors[hit] = _texture(spec, x[hit], y[hit])
        best_t[hit] = t[hit]
    return colors


def look_at_pose(center: np.ndarray, target: np.ndarray,
                 up=(0.0, 1.0, 0.0)) -> Pose:
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    r = np.stack([right, true_up, -fwd], axis=1)
    u, _, vt = np.linalg.svd(r)
    return Pose(u @ vt, np.asarray(center, float))


def vignette_mask(size: int, margin: int) -> np.ndarray:
    """Raised-cosine falloff to zero over `margin` border pixels; exactly 1.0
    in the interior."""
    r = np.minimum(np.arange(size), np.arange(size)[::-1]).astype(float)
    w = np.clip(r / max(margin, 1), 0.0, 1.0)
    w = 0.5 - 0.5 * np.cos(np.pi * w)
    return w[:, None] * w[None, :]


def generate_procedural_scene(n_views: int = 16, image_size: int = 64,
                              ring_radius: float = 0.25, seed: int = 0,
                              planes: list[PlaneSpec] | None = None,
                              focal_factor: float = 1.2,
                              vignette_fraction: float = 0.16,
                              name: str = "proc") -> Scene:
    """Forward-facing camera ring around the z axis, looking down -z at a
    stack of textured planes. Every pixel is an exact analytic render, so
    poses and multi-view correspondences are noise-free in the interior.

    A raised-cosine vignette darkens the border (like the dark surround of a
    monitor-capture lensless rig); it keeps the zero-padded capture model
    consistent, so Wiener recovery is well posed. Multi-view color constancy
    holds exactly only inside the vignette-free interior."""
    if n_views < 2:
        raise DatasetError("need at least 2 views")
    if ring_radius <= 0:
        raise DatasetError("degenerate camera ring")
    if planes is None:
        planes = default_plane_layout()
    rng = np.random.default_rng(seed)
    depths = [p.depth for p in planes if np.isfinite(p.depth)]
    near = 0.5 * min(depths)
    far = 1.5 * max(p.depth for p in planes)
    target = np.array([0.0, 0.0, -float(np.mean(depths))])
    f = focal_factor * image_size
    intr = Intrinsics(f, f, image_size / 2.0, image_size / 2.0,
                      image_size, image_size)

    ys, xs = np.mgrid[0:image_size, 0:image_size]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    vig = vignette_mask(image_size, int(round(vignette_fraction * image_size)))[:, :, None]
    views = []
    phase = rng.uniform(0, 2 * np.pi)  # ring phase varies with seed
    for i in range(n_views):
        ang = phase + 2 * np.pi * i / n_views
        center = np.array([ring_radius * np.cos(ang),
                           ring_radius * np.sin(ang), 0.0])
        pose = look_at_pose(center, target)
        view = CameraView(Image(np.zeros((image_size, image_size, 3))), pose, intr)
        origins, dirs = rays_for_pixels(view, pixels, near, far)
        colors = shade_points(planes, origins, dirs)
        img = Image(colors.reshape(image_size, image_size, 3) * vig)
        views.append(CameraView(img, pose, intr))
    return Scene(views, (near, far), name=name, layout="procedural")


# ---------------------------------------------------------------------------
# Lensless derivation
# ---------------------------------------------------------------------------

def _f32(img: Image) -> Image:
    return Image(img.data.astype(np.float32).astype(np.float64))


def synthesize_lensless_dataset(scene: Scene, psf: Psf,
                                snr_db: float = DEFAULT_SNR_DB, seed: int = 0,
                                grayscale: bool = True,
                                k: float = DEFAULT_NSR) -> Scene:
    """Simulate a capture and a Wiener coarse estimate for every view.

    Per-view noise streams are independent (seed + view index). The grayscale
    flag is the default path; RGB PSF is the ablation path, deconvolving each
    channel with its own PSF plane.
    """
    if not psf.normalized:
        raise DatasetError("synthesize_lensless_dataset needs a normalized PSF")
    work_psf = psf_to_grayscale(psf) if grayscale else psf
    captures, coarse = [], []
    for i, view in enumerate(scene.views):
        cap = simulate_capture(view.image, work_psf, snr_db, seed + i)
        cap_img = _f32(cap.raster)
        cap = type(cap)(cap_img, cap.snr_db, cap.psf_id, cap.mode)
        if work_psf.channels == 1:
            est = wiener_deconvolve(cap, work_psf, k)
        else:
            planes = []
            for c in range(3):
                chan_psf = Psf(Image(work_psf.kernel.data[:, :, c]),
                               normalized=True, provenance=work_psf.provenance)
                chan_cap = type(cap)(Image(cap_img.data[:, :, c]),
                                     cap.snr_db, cap.psf_id, cap.mode)
                planes.append(wiener_deconvolve(chan_cap, chan_psf, k).plane())
            est = Image(np.stack(planes, axis=-1))
        captures.append(cap_img)
        coarse.append(_f32(est))
    manifest = {
        "source": scene.name,
        "psf_hash": work_psf.content_hash(),
        "snr_db": snr_db,
        "k": k,
        "seed": seed,
        "grayscale": grayscale,
    }
    return Scene(scene.views, scene.bounds, name=scene.name + "-lensless",
                 layout=scene.layout, captures=captures, coarse=coarse,
                 manifest=manifest)


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------

def save_scene(scene: Scene, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    subdirs = ["gt"]
    if scene.captures is not None:
        subdirs += ["lensless", "coarse"]
    for sub in subdirs:
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i, view in enumerate(scene.views):
        save_pfm(view.image, os.path.join(out_dir, "gt", f"{i:03d}.pfm"))
        if scene.captures is not None:
            save_pfm(scene.captures[i], os.path.join(out_dir, "lensless", f"{i:03d}.pfm"))
            save_pfm(scene.coarse[i], os.path.join(out_dir, "coarse", f"{i:03d}.pfm"))
    v0 = scene.views[0]
    poses_focals = [(v.pose, v.intrinsics.fx) for v in scene.views]
    bounds = [scene.bounds] * len(scene.views)
    save_poses_bounds(os.path.join(out_dir, "poses_bounds.npy"), poses_focals,
                      bounds, v0.intrinsics.height, v0.intrinsics.width)
    lines = [f"name={scene.name}", f"layout={scene.layout}"]
    lines += [f"{k}={v}" for k, v in scene.manifest.items()]
    tmp = os.path.join(out_dir, "manifest.txt.tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.txt"))


def _read_manifest(path) -> dict:
    out = {}
    if os.path.exists(path):
        for line in open(path):
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def load_scene(scene_dir) -> Scene:
    """Load a scene saved by save_scene."""
    gt_dir = os.path.join(scene_dir, "gt")
    if not os.path.isdir(gt_dir):
        raise DatasetError(f"{scene_dir} has no gt/ directory")
    names = sorted(f for f in os.listdir(gt_dir) if f.endswith(".pfm"))
    poses, bounds, (h, w) = load_poses_bounds(os.path.join(scene_dir, "poses_bounds.npy"))
    if len(names) != len(poses):
        raise DatasetError(f"{len(names)} images but {len(poses)} poses")
    views = []
    for fname, (pose, focal) in zip(names, poses):
        img = load_pfm(os.path.join(gt_dir, fname))
        intr = Intrinsics(focal, focal, w / 2.0, h / 2.0, w, h)
        views.append(CameraView(img, pose, intr))
    manifest = _read_manifest(os.path.join(scene_dir, "manifest.txt"))
    captures = coarse = None
    cap_dir = os.path.join(scene_dir, "lensless")
    if os.path.isdir(cap_dir):
        captures = [load_pfm(os.path.join(cap_dir, f)) for f in names]
        coarse = [load_pfm(os.path.join(scene_dir, "coarse", f)) for f in names]
    near = float(min(b[0] for b in bounds))
    far = float(max(b[1] for b in bounds))
    return Scene(views, (near, far), name=manifest.get("name", os.path.basename(str(scene_dir))),
                 layout=manifest.get("layout", "llff"), captures=captures,
                 coarse=coarse, manifest=manifest)


def load_llff_scene(scene_dir) -> Scene:
    """Load a standard LLFF directory: images/ with PNGs plus poses_bounds.npy."""
    img_dir = os.path.join(scene_dir, "images")
    if not os.path.isdir(img_dir):
        raise DatasetError(f"{scene_dir} has no images/ directory")
    names = sorted(f for f in os.listdir(img_dir)
                   if f.lower().endswith((".png",)))
    poses, bounds, (h, w) = load_poses_bounds(os.path.join(scene_dir, "poses_bounds.npy"))
    if len(names) != len(poses):
        raise DatasetError(f"image count {len(names)} != pose count {len(poses)}")
    views = []
    for fname, (pose, focal) in zip(names, poses):
        img = load_png(os.path.join(img_dir, fname))
        if img.height != h or img.width != w:
            raise DatasetError(f"{fname} is {img.height}x{img.width}, poses say {h}x{w}")
        intr = Intrinsics(focal, focal, w / 2.0, h / 2.0, w, h)
        views.append(CameraView(img, pose, intr))
    near = float(min(b[0] for b in bounds))
    far = float(max(b[1] for b in bounds))
    return Scene(views, (near, far), name=os.path.basename(str(scene_dir)),
                 layout="llff")
