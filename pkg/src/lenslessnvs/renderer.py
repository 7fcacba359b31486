"""Joint refine-and-render pipeline core.

Source views carry Wiener-deconvolved coarse images. A small convolutional
stack turns each into a feature pyramid; every 3-D sample point on a target
ray is projected into the sources, features are gathered along the epipolar
geometry, pooled across views with masked attention (permutation invariant by
construction), then pooled along the ray into a pixel color. There is no
separate refinement head: the network is supervised with clean RGB while fed
noisy coarse estimates, so refinement is learned inside the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nnmath as nn
from .geometry import CameraView, GeometryError, project
from .imgcore import Image
from .nnmath import ParamStore, Tensor


@dataclass(frozen=True)
class RendererConfig:
    feature_dim: int = 32       # channel width d of features and tokens
    pyramid_levels: int = 3
    heads: int = 1
    view_blocks: int = 2        # last block is the pooled-query attention
    ray_blocks: int = 2
    points_per_ray: int = 192
    source_views: int = 10
    dir_freqs: int = 4          # sinusoidal encoding of target/source angle
    t_freqs: int = 4            # sinusoidal encoding of normalized ray depth
    sample_mode: str = "uniform-disparity"

    def __post_init__(self):
        for f in ("feature_dim", "pyramid_levels", "heads", "view_blocks",
                  "ray_blocks", "points_per_ray", "source_views"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _block_names(prefix: str, n_self: int):
    for j in range(n_self):
        yield from (f"{prefix}.block{j}.{s}" for s in (
            "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
            "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"))


def init_renderer_params(config: RendererConfig, seed: int) -> ParamStore:
    """Deterministic Xavier-uniform initialization of all renderer weights."""
    rng = np.random.default_rng(seed)
    d = config.feature_dim
    store = ParamStore()

    def conv(name, o, c, k):
        fan_in, fan_out = c * k * k, o * k * k
        store.create(name + ".w", nn.xavier_uniform((o, c, k, k), rng, fan_in, fan_out))
        store.create(name + ".b", np.zeros(o))

    def lin(name, i, o, bias=True):
        store.create(name + ".w", nn.xavier_uniform((i, o), rng))
        if bias:
            store.create(name + ".b", np.zeros(o))

    def blocks(prefix, n_self):
        for j in range(n_self):
            p = f"{prefix}.block{j}"
            store.create(p + ".ln1.g", np.ones(d))
            store.create(p + ".ln1.b", np.zeros(d))
            for s in ("wq", "wk", "wv", "wo"):
                store.create(f"{p}.attn.{s}", nn.xavier_uniform((d, d), rng))
            store.create(p + ".ln2.g", np.ones(d))
            store.create(p + ".ln2.b", np.zeros(d))
            store.create(p + ".mlp.w1", nn.xavier_uniform((d, 2 * d), rng))
            store.create(p + ".mlp.b1", np.zeros(2 * d))
            store.create(p + ".mlp.w2", nn.xavier_uniform((2 * d, d), rng))
            store.create(p + ".mlp.b2", np.zeros(d))

    conv("feat.stem", d, 3, 3)
    conv("feat.refine", d, d, 3)
    for lvl in range(1, config.pyramid_levels):
        conv(f"feat.down{lvl}", d, d, 3)

    token_in = config.pyramid_levels * d + 2 * config.dir_freqs
    lin("view.inproj", token_in, d)
    blocks("view", config.view_blocks - 1)
    store.create("view.pool.q", nn.xavier_uniform((1, d), rng))
    store.create("view.pool.wk", nn.xavier_uniform((d, d), rng))
    store.create("view.pool.wv", nn.xavier_uniform((d, d), rng))

    lin("ray.inproj", d + 2 * config.t_freqs, d)
    blocks("ray", config.ray_blocks - 1)
    store.create("ray.pool.q", nn.xavier_uniform((1, d), rng))
    store.create("ray.pool.wk", nn.xavier_uniform((d, d), rng))
    store.create("ray.pool.wv", nn.xavier_uniform((d, d), rng))

    lin("head", d, 3)
    return store


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nn.transpose(nn.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nn.reshape(nn.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attention(q: Tensor, k: Tensor, v: Tensor, mask, heads: int) -> Tensor:
    """q (B, nq, d), k/v (B, nk, d), mask (B, nk) or None -> (B, nq, d)."""
    if heads == 1:
        return nn.softmax_attention(q, k, v, mask)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    m = None if mask is None else np.asarray(mask, bool)[:, None, :]
    return _merge_heads(nn.softmax_attention(qh, kh, vh, m))


def _self_block(x: Tensor, mask, params: ParamStore, prefix: str, heads: int) -> Tensor:
    h = nn.layernorm(x, params[prefix + ".ln1.g"], params[prefix + ".ln1.b"])
    a = _attention(h @ params[prefix + ".attn.wq"],
                   h @ params[prefix + ".attn.wk"],
                   h @ params[prefix + ".attn.wv"], mask, heads)
    x = x + (a @ params[prefix + ".attn.wo"])
    h = nn.layernorm(x, params[prefix + ".ln2.g"], params[prefix + ".ln2.b"])
    m = nn.linear(nn.gelu(nn.linear(h, params[prefix + ".mlp.w1"],
                                    params[prefix + ".mlp.b1"])),
                  params[prefix + ".mlp.w2"], params[prefix + ".mlp.b2"])
    return x + m


def _pooled_attention(x: Tensor, mask, params: ParamStore, prefix: str,
                      heads: int) -> Tensor:
    """Learnable-query attention pooling (B, n, d) -> (B, d)."""
    b = x.shape[0]
    q = nn.add(nn.constant(np.zeros((b, 1, x.shape[2]))),
               nn.reshape(params[prefix + ".q"], (1, 1, -1)))
    out = _attention(q, x @ params[prefix + ".wk"], x @ params[prefix + ".wv"],
                     mask, heads)
    return nn.reshape(out, (b, x.shape[2]))


def _sin_cos(angle: np.ndarray, freqs: int) -> np.ndarray:
    bands = 2.0 ** np.arange(freqs)
    a = angle[..., None] * bands
    return np.concatenate([np.sin(a), np.cos(a)], axis=-1)


def extract_features(image: Image, params: ParamStore,
                     config: RendererConfig) -> list[Tensor]:
    """Feature pyramid for one source view: full, 1/2, ... 1/2^(L-1) resolution,
    each (H_l, W_l, d). Deterministic given parameters."""
    data = image.data
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    x = nn.constant(data.transpose(2, 0, 1))

    def bias(name):
        return nn.reshape(params[name], (-1, 1, 1))

    h = nn.gelu(nn.conv2d(x, params["feat.stem.w"], pad=1) + bias("feat.stem.b"))
    h = nn.conv2d(h, params["feat.refine.w"], pad=1) + bias("feat.refine.b")
    pyramid = [h]
    for lvl in range(1, config.pyramid_levels):
        h = nn.gelu(nn.conv2d(h, params[f"feat.down{lvl}.w"], stride=2, pad=1)
                    + bias(f"feat.down{lvl}.b"))
        pyramid.append(h)
    return [nn.transpose(t, (1, 2, 0)) for t in pyramid]


def aggregate_points(positions: np.ndarray, ray_dirs: np.ndarray,
                     sources: list[CameraView], feats: list[list[Tensor]],
                     params: ParamStore, config: RendererConfig):
    """Epipolar view aggregation for a flat batch of M points.

    Returns (point features (M, d) Tensor, point_valid (M,) bool). A point is
    valid when at least one source sees it; invalid points get a placeholder
    attention support and must be masked downstream.
    """
    m = len(positions)
    tokens, masks = [], []
    for view, pyramid in zip(sources, feats):
        pix, depth, valid = project(positions, view)
        samples = []
        level_inb = None
        for lvl, fmap in enumerate(pyramid):
            hl, wl = fmap.shape[:2]
            coords = (pix + 0.5) / (2 ** lvl) - 0.5
            coords = np.where(valid[:, None], np.nan_to_num(coords), 0.0)
            inb = (valid & (coords[:, 0] >= 0) & (coords[:, 0] <= wl - 1)
                   & (coords[:, 1] >= 0) & (coords[:, 1] <= hl - 1))
            samples.append(nn.gather_bilinear(fmap, coords, inb))
            if lvl == 0:
                level_inb = inb
        to_point = positions - view.pose.center
        to_point /= np.maximum(np.linalg.norm(to_point, axis=-1, keepdims=True), 1e-12)
        ang = np.arccos(np.clip(np.sum(to_point * ray_dirs, axis=-1), -1.0, 1.0))
        samples.append(nn.constant(_sin_cos(ang, config.dir_freqs)))
        token = nn.linear(nn.concat(samples, axis=-1),
                          params["view.inproj.w"], params["view.inproj.b"])
        tokens.append(nn.reshape(token, (m, 1, config.feature_dim)))
        masks.append(level_inb)
    tok = nn.concat(tokens, axis=1)              # (M, N, d)
    mask = np.stack(masks, axis=1)               # (M, N)
    point_valid = mask.any(axis=1)
    mask_safe = mask.copy()
    mask_safe[~point_valid, 0] = True            # placeholder support, masked later
    for j in range(config.view_blocks - 1):
        tok = _self_block(tok, mask_safe, params, f"view.block{j}", config.heads)
    f = _pooled_attention(tok, mask_safe, params, "view.pool", config.heads)
    return f, point_valid


def view_aggregate(point: np.ndarray, ray_dir: np.ndarray,
                   sources: list[CameraView], params: ParamStore,
                   config: RendererConfig, feats=None):
    """Single-point convenience wrapper around aggregate_points."""
    if feats is None:
        feats = [extract_features(v.image, params, config) for v in sources]
    f, valid = aggregate_points(np.asarray(point)[None], np.asarray(ray_dir)[None],
                                sources, feats, params, config)
    if not valid[0]:
        raise GeometryError("point projects into no source view")
    return nn.reshape(f, (config.feature_dim,))


def point_aggregate(point_features: Tensor, t_values: np.ndarray,
                    near: float, far: float, params: ParamStore,
                    config: RendererConfig) -> Tensor:
    """Along-ray pooling: (R, K, d) features + depth encodings -> (R, 3) rgb
    in (0, 1)."""
    r, k, d = point_features.shape
    s = (np.asarray(t_values) - near) / (far - near)
    tenc = nn.constant(np.broadcast_to(_sin_cos(np.pi * s, config.t_freqs),
                                       (r, k, 2 * config.t_freqs)).copy())
    z = nn.linear(nn.concat([point_features, tenc], axis=-1),
                  params["ray.inproj.w"], params["ray.inproj.b"])
    for j in range(config.ray_blocks - 1):
        z = _self_block(z, None, params, f"ray.block{j}", config.heads)
    pooled = _pooled_attention(z, None, params, "ray.pool", config.heads)
    return nn.sigmoid(nn.linear(pooled, params["head.w"], params["head.b"]))


def stratified_t(r: int, k: int, near: float, far: float, mode: str,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """(R, K) ascending sample depths, bin centers unless an rng jitters."""
    edges = np.linspace(0.0, 1.0, k + 1)
    if rng is None:
        u = np.broadcast_to((edges[:-1] + edges[1:]) / 2.0, (r, k)).copy()
    else:
        u = edges[:-1] + rng.random((r, k)) * (edges[1:] - edges[:-1])
    if mode == "uniform-depth":
        t = near + u * (far - near)
    elif mode == "uniform-disparity":
        t = 1.0 / (1.0 / near + u * (1.0 / far - 1.0 / near))
    else:
        raise GeometryError(f"unknown sampling mode {mode!r}")
    return np.sort(t, axis=-1)


def render_rays(origins: np.ndarray, dirs: np.ndarray, near: float, far: float,
                sources: list[CameraView], params: ParamStore,
                config: RendererConfig, jitter_rng=None, feats=None):
    """Render a flat batch of rays.

    Returns (colors Tensor (R, 3), ray_valid (R,) bool). A ray is valid only
    when every sample point is seen by at least one source; invalid rays carry
    placeholder colors and must stay out of any loss.
    """
    if not sources:
        raise GeometryError("render_rays needs at least one source view")
    if feats is None:
        feats = [extract_features(v.image, params, config) for v in sources]
    r = len(origins)
    k = config.points_per_ray
    t = stratified_t(r, k, near, far, config.sample_mode, jitter_rng)
    positions = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat_pos = positions.reshape(r * k, 3)
    flat_dirs = np.repeat(dirs, k, axis=0)
    f, point_valid = aggregate_points(flat_pos, flat_dirs, sources, feats,
                                      params, config)
    f = nn.mul(f, nn.constant(point_valid[:, None].astype(np.float64)))
    f3 = nn.reshape(f, (r, k, config.feature_dim))
    colors = point_aggregate(f3, t, near, far, params, config)
    ray_valid = point_valid.reshape(r, k).all(axis=1)
    return colors, ray_valid


def render_image(target: CameraView, sources: list[CameraView],
                 params: ParamStore, config: RendererConfig,
                 near: float, far: float, batch: int = 1024):
    """Full-image render in ray batches. Returns (Image, valid mask (H, W))."""
    from .geometry import rays_for_pixels

    intr = target.intrinsics
    ys, xs = np.mgrid[0:intr.height, 0:intr.width]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    origins, dirs = rays_for_pixels(target, pixels, near, far)
    feats = [extract_features(v.image, params, config) for v in sources]
    out = np.zeros((len(pixels), 3))
    valid = np.zeros(len(pixels), dtype=bool)
    for lo in range(0, len(pixels), batch):
        hi = min(lo + batch, len(pixels))
        colors, v = render_rays(origins[lo:hi], dirs[lo:hi], near, far,
                                sources, params, config, feats=feats)
        out[lo:hi] = colors.values
        valid[lo:hi] = v
    img = Image(out.reshape(intr.height, intr.width, 3))
    return img, valid.reshape(intr.height, intr.width)
