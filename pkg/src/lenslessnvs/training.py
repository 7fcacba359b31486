"""Losses and the training loop.

Total loss = MSE + lambda * perceptual. The perceptual term keeps the
multi-level feature-difference structure but swaps the usual pretrained
extractor for a frozen, seeded filter bank so the repo stays hermetic; with
lambda = 0 the bank is never evaluated. When the perceptual term is active,
rays are sampled in square patches so the bank sees coherent image windows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nnmath as nn
from .geometry import rays_for_pixels, select_source_views
from .imgcore import Image, psnr, ssim
from .nnmath import ParamStore, Tensor
from .renderer import RendererConfig, extract_features, init_renderer_params, render_rays

PATCH = 16  # perceptual loss window; rays are sampled in PATCH x PATCH tiles


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.4
    lr: float = 5e-4
    total_steps: int = 1000
    rays_per_step: int = 576
    seed: int = 0
    snr_db: float = 40.0
    grayscale_psf: bool = True
    source_views_min: int = 8
    source_views_max: int = 12
    val_interval: int = 200
    renderer: RendererConfig = field(default_factory=RendererConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.rays_per_step < 1:
            raise ValueError("rays_per_step must be >= 1")


@dataclass(frozen=True)
class LossReport:
    mse: float
    perceptual: float
    total: float
    step: int


def mse_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over valid entries; mask is per-row (per ray)."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise TrainingError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(len(gt), dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("mse_loss over an empty mask")
    w = mask.astype(np.float64)[:, None]
    diff = pred - nn.constant(gt)
    sq = nn.mul(nn.power(diff, 2.0), nn.constant(w))
    return nn.mul(nn.tsum(sq), nn.constant(1.0 / (count * gt.shape[-1])))


class FilterBank:
    """Frozen 3-level random convolutional feature extractor.

    Level l maps to 8*2^l channels at 1/2^l resolution; kernels are seeded
    and never trained.
    """

    def __init__(self, seed: int = 7, levels: int = 3, base_channels: int = 8):
        rng = np.random.default_rng(seed)
        self.kernels = []
        cin = 3
        for lvl in range(levels):
            cout = base_channels * 2 ** lvl
            self.kernels.append(nn.constant(
                nn.xavier_uniform((cout, cin, 3, 3), rng, cin * 9, cout * 9)))
            cin = cout

    def features(self, x: Tensor) -> list[Tensor]:
        """x is (3, P, P); returns one Tensor per level."""
        outs = []
        h = x
        for lvl, k in enumerate(self.kernels):
            stride = 1 if lvl == 0 else 2
            h = nn.gelu(nn.conv2d(h, k, stride=stride, pad=1))
            outs.append(h)
        return outs


def perceptual_loss(pred_patch: Tensor, gt_patch: np.ndarray, bank: FilterBank,
                    level_weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Sum over levels of weighted mean squared feature differences.

    pred_patch is (P, P, 3) with P >= 16; gt_patch the matching ground truth.
    """
    p = pred_patch.shape[0]
    if p < PATCH or pred_patch.shape[1] < PATCH:
        raise TrainingError(f"perceptual loss needs patches >= {PATCH}x{PATCH}")
    xp = nn.transpose(pred_patch, (2, 0, 1))
    xg = nn.constant(np.asarray(gt_patch).transpose(2, 0, 1))
    fp = bank.features(xp)
    fg = bank.features(xg)
    total = nn.constant(0.0)
    for w, a, b in zip(level_weights, fp, fg):
        total = total + nn.mul(tmean_sq(a - b), nn.constant(float(w)))
    return total


def tmean_sq(x: Tensor) -> Tensor:
    return nn.tmean(nn.power(x, 2.0))


def _substream(root_seed: int, name: str) -> np.random.Generator:
    import zlib

    return np.random.default_rng([root_seed, zlib.crc32(name.encode())])


def _sample_pixels(rng: np.random.Generator, h: int, w: int, n_rays: int,
                   with_patches: bool):
    """Pixel coordinates for one step: 16x16 tiles for the perceptual term,
    the remainder independent random pixels."""
    patches = []
    pixels = []
    n_patches = n_rays // (PATCH * PATCH) if with_patches else 0
    for _ in range(n_patches):
        y0 = int(rng.integers(0, h - PATCH + 1))
        x0 = int(rng.integers(0, w - PATCH + 1))
        ys, xs = np.mgrid[y0:y0 + PATCH, x0:x0 + PATCH]
        patches.append((y0, x0))
        pixels.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    n_rand = n_rays - n_patches * PATCH * PATCH
    if n_rand > 0:
        xs = rng.integers(0, w, n_rand)
        ys = rng.integers(0, h, n_rand)
        pixels.append(np.stack([xs, ys], axis=-1))
    return np.concatenate(pixels, axis=0).astype(np.float64), patches


def _gt_colors(img: Image, pixels: np.ndarray) -> np.ndarray:
    data = img.data
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return data[pixels[:, 1].astype(int), pixels[:, 0].astype(int)]


def training_step(scene, target_idx: int, src_indices: list[int],
                  config: TrainConfig, store: ParamStore, bank, step: int,
                  rng: np.random.Generator) -> LossReport:
    """One optimization step on one target view of one scene."""
    target = scene.views[target_idx]
    sources = [scene.coarse_view(i) for i in src_indices]
    near, far = scene.bounds
    h, w = target.intrinsics.height, target.intrinsics.width
    with_patches = config.lam > 0 and h >= PATCH and w >= PATCH
    pixels, patches = _sample_pixels(rng, h, w, config.rays_per_step, with_patches)
    origins, dirs = rays_for_pixels(target, pixels, near, far)
    colors, valid = render_rays(origins, dirs, near, far, sources, store,
                                config.renderer, jitter_rng=rng)
    gt = _gt_colors(target.image, pixels)
    loss_mse = mse_loss(colors, gt, valid)

    loss_perc = nn.constant(0.0)
    if with_patches and patches:
        n_patch_rays = len(patches) * PATCH * PATCH
        pred_tiles = nn.reshape(
            nn.Tensor(colors.values[:n_patch_rays], parents=(colors,),
                      backward_fn=_head_grad(colors, n_patch_rays)),
            (len(patches), PATCH, PATCH, 3))
        used = 0
        for i in range(len(patches)):
            sl = slice(i * PATCH * PATCH, (i + 1) * PATCH * PATCH)
            if not valid[sl].all():
                continue  # patches with unseen rays stay out of the loss
            tile = nn.reshape(_slice_first(pred_tiles, i), (PATCH, PATCH, 3))
            gt_tile = _gt_colors(target.image, pixels[sl]).reshape(PATCH, PATCH, 3)
            loss_perc = loss_perc + perceptual_loss(tile, gt_tile, bank)
            used += 1
        if used:
            loss_perc = nn.mul(loss_perc, nn.constant(1.0 / used))

    total = loss_mse + nn.mul(loss_perc, nn.constant(config.lam))
    tv = float(total.values)
    if not math.isfinite(tv):
        raise TrainingError(f"non-finite loss at step {step}: "
                            f"mse={float(loss_mse.values)} perc={float(loss_perc.values)}")
    total.backward()
    nn.adam_step(store, nn.lr_at_step(config.lr, step, config.total_steps))
    return LossReport(float(loss_mse.values), float(loss_perc.values), tv, step)


def _head_grad(src: Tensor, n: int):
    def bw(g):
        if src.requires_grad:
            full = np.zeros_like(src.values)
            full[:n] = g
            src.accumulate(full)
    return bw


def _slice_first(x: Tensor, i: int) -> Tensor:
    vals = x.values[i]

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.values)
            full[i] = g
            x.accumulate(full)

    return Tensor(vals, parents=(x,), backward_fn=bw)


def validation_views(n_views: int) -> list[int]:
    """LLFF convention: every 8th view is held out."""
    val = list(range(0, n_views, 8))
    return val if len(val) < n_views else [0]


def evaluate_view(scene, view_idx: int, store: ParamStore,
                  config: TrainConfig) -> tuple[float, float]:
    """Render one held-out view from its nearest sources; (psnr, ssim) over
    valid rays."""
    from .renderer import render_image

    target = scene.views[view_idx]
    n_src = min(config.renderer.source_views, len(scene.views) - 1)
    candidates = [scene.coarse_view(i) for i in range(len(scene.views))
                  if i != view_idx]
    picked = select_source_views(target.pose, candidates, n_src)
    sources = [candidates[i] for i in picked]
    near, far = scene.bounds
    img, valid = render_image(target, sources, store, config.renderer, near, far)
    gt = target.image
    if valid.all():
        return psnr(gt, img), ssim(gt, img)
    sel = valid.ravel()
    a = Image(gt.data.reshape(-1, 3)[sel][:, None, :])
    b = Image(img.data.reshape(-1, 3)[sel][:, None, :])
    return psnr(a, b), float("nan")


def train(scenes: list, config: TrainConfig, store: ParamStore | None = None,
          log_path=None, quiet: bool = False) -> tuple[ParamStore, list[dict]]:
    """End-to-end optimization over synthetic lensless scenes.

    Per step: pick a scene and a non-validation target view, select 8-12
    nearby source views, cast a patch/random ray batch, total loss, backward,
    Adam. Returns the trained store and the metric log.
    """
    if not scenes:
        raise TrainingError("no scenes to train on")
    if store is None:
        store = init_renderer_params(config.renderer, config.seed)
    bank = FilterBank() if config.lam > 0 else None
    rng_pick = _substream(config.seed, "sampling")
    log = []
    rows = []
    for step in range(config.total_steps):
        scene = scenes[int(rng_pick.integers(0, len(scenes)))]
        val = set(validation_views(len(scene.views)))
        train_idx = [i for i in range(len(scene.views)) if i not in val]
        target_idx = train_idx[int(rng_pick.integers(0, len(train_idx)))]
        lo = min(config.source_views_min, len(scene.views) - 1)
        hi = min(config.source_views_max, len(scene.views) - 1)
        n_src = int(rng_pick.integers(lo, hi + 1))
        candidates = [scene.coarse_view(i) for i in range(len(scene.views))
                      if i != target_idx]
        picked = select_source_views(scene.views[target_idx].pose, candidates, n_src)
        src = [i for i in range(len(scene.views)) if i != target_idx]
        src_indices = [src[i] for i in picked]
        report = training_step(scene, target_idx, src_indices, config, store,
                               bank, step, rng_pick)
        row = {"step": step, "mse": report.mse, "perceptual": report.perceptual,
               "total": report.total, "val_psnr": "", "val_ssim": ""}
        if config.val_interval and (step + 1) % config.val_interval == 0:
            vscene = scenes[0]
            vidx = validation_views(len(vscene.views))[0]
            vp, vs = evaluate_view(vscene, vidx, store, config)
            row["val_psnr"], row["val_ssim"] = vp, vs
            if not quiet:
                print(f"step {step + 1}: total {report.total:.5f} "
                      f"val_psnr {vp:.2f} dB")
        log.append(report)
        rows.append(row)
    if log_path:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "mse", "perceptual",
                                                   "total", "val_psnr", "val_ssim"])
            writer.writeheader()
            writer.writerows(rows)
    return store, rows


def finetune(scene, store: ParamStore, steps: int, config: TrainConfig,
             log_path=None, quiet: bool = True):
    """Scene-specific continuation: same loop on one scene, lr scaled x0.1."""
    import dataclasses

    ft_config = dataclasses.replace(config, lr=config.lr * 0.1, total_steps=steps)
    if steps == 0:
        return store, []
    return train([scene], ft_config, store=store, log_path=log_path, quiet=quiet)
