"""Self-contained correctness checks: finite-difference gradient validation
for every differentiable op and a battery of pipeline invariants. The CLI
`selfcheck` subcommand runs everything here; the test suite reuses the same
functions with tighter scopes.
"""

from __future__ import annotations

import numpy as np

from . import nnmath as nn
from .nnmath import Tensor


def numeric_gradient(build, tensor: Tensor, idx, eps: float = 1e-4) -> float:
    """Central finite difference of the scalar build() w.r.t. one element."""
    orig = tensor.values[idx]
    tensor.values[idx] = orig + eps
    hi = float(build().values)
    tensor.values[idx] = orig - eps
    lo = float(build().values)
    tensor.values[idx] = orig
    return (hi - lo) / (2 * eps)


def gradcheck(build, tensors: list[Tensor], eps: float = 1e-4,
              max_entries: int = 8, rng=None) -> float:
    """Max relative error between analytic and numeric gradients over sampled
    entries of each tensor. build() must rerun the forward pass from the
    tensors' current values and return a scalar Tensor."""
    if rng is None:
        rng = np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    loss = build()
    loss.backward()
    worst = 0.0
    for t in tensors:
        grad = np.zeros_like(t.values) if t.grad is None else t.grad
        flat_idx = np.arange(t.values.size)
        if t.values.size > max_entries:
            flat_idx = rng.choice(t.values.size, size=max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.values.shape)
            num = numeric_gradient(build, t, idx, eps)
            ana = float(grad[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-3)
            worst = max(worst, rel)
    for t in tensors:
        t.zero_grad()
    return worst


def check_all_ops(seed: int = 0) -> dict[str, float]:
    """Gradient-check every registered differentiable op. Returns the max
    relative error per op; all should be < 1e-4."""
    rng = np.random.default_rng(seed)
    results = {}

    def p(*shape):
        return nn.parameter(rng.normal(0, 1, shape))

    a, b = p(4, 5), p(4, 5)
    results["add"] = gradcheck(lambda: nn.tsum(nn.add(a, b)), [a, b])
    results["mul"] = gradcheck(lambda: nn.tsum(nn.mul(a, b)), [a, b])
    results["power"] = gradcheck(lambda: nn.tsum(nn.power(nn.mul(a, a), 1.5)), [a])
    w = p(5, 3)
    results["matmul"] = gradcheck(lambda: nn.tsum(nn.matmul(a, w)), [a, w])
    bb = p(3)
    results["linear"] = gradcheck(lambda: nn.tsum(nn.linear(a, w, bb)), [a, w, bb])
    results["reshape"] = gradcheck(lambda: nn.tsum(nn.reshape(a, (2, 10))), [a])
    results["transpose"] = gradcheck(lambda: nn.tsum(nn.mul(nn.transpose(a, (1, 0)),
                                                            nn.transpose(b, (1, 0)))), [a])
    results["concat"] = gradcheck(lambda: nn.tsum(nn.power(nn.concat([a, b], axis=1), 2.0)),
                                  [a, b])
    results["mean"] = gradcheck(lambda: nn.tmean(nn.mul(a, a)), [a])
    results["exp"] = gradcheck(lambda: nn.tsum(nn.exp(nn.mul(a, nn.constant(0.3)))), [a])
    results["tanh"] = gradcheck(lambda: nn.tsum(nn.tanh(a)), [a])
    results["sigmoid"] = gradcheck(lambda: nn.tsum(nn.sigmoid(a)), [a])
    results["gelu"] = gradcheck(lambda: nn.tsum(nn.gelu(a)), [a])

    g, beta = p(5), p(5)
    results["layernorm"] = gradcheck(lambda: nn.tsum(nn.power(nn.layernorm(a, g, beta), 2.0)),
                                     [a, g, beta])

    z = p(3, 4)
    mask = np.array([[True, True, False, True]] * 3)
    results["masked_softmax"] = gradcheck(
        lambda: nn.tsum(nn.power(nn.masked_softmax(z, mask), 2.0)), [z])

    q, k, v = p(2, 3, 6), p(2, 4, 6), p(2, 4, 6)
    amask = np.array([[True, True, True, False], [True, False, True, True]])
    results["softmax_attention"] = gradcheck(
        lambda: nn.tsum(nn.power(nn.softmax_attention(q, k, v, amask), 2.0)), [q, k, v])

    x = p(2, 6, 6)
    kern = p(3, 2, 3, 3)
    results["conv2d"] = gradcheck(
        lambda: nn.tsum(nn.power(nn.conv2d(x, kern, stride=1, pad=1), 2.0)), [x, kern])
    results["conv2d_stride2"] = gradcheck(
        lambda: nn.tsum(nn.power(nn.conv2d(x, kern, stride=2, pad=1), 2.0)), [x, kern])

    fmap = p(5, 5, 3)
    coords = rng.uniform(0.3, 3.7, (7, 2))
    inb = np.ones(7, dtype=bool)
    results["gather_bilinear"] = gradcheck(
        lambda: nn.tsum(nn.power(nn.gather_bilinear(fmap, coords, inb), 2.0)), [fmap])
    return results


def tiny_setup(seed: int = 3, d: int = 8, k: int = 4, n_sources: int = 2,
               image_size: int = 16, n_views: int = 6):
    """A miniature scene + renderer configuration for composed-pipeline
    checks (gradients, permutation invariance)."""
    from .datasetio import generate_procedural_scene
    from .renderer import RendererConfig, init_renderer_params

    config = RendererConfig(feature_dim=d, pyramid_levels=2, heads=1,
                            view_blocks=2, ray_blocks=2, points_per_ray=k,
                            source_views=n_sources, dir_freqs=2, t_freqs=2)
    scene = generate_procedural_scene(n_views=n_views, image_size=image_size,
                                      seed=seed)
    store = init_renderer_params(config, seed)
    return scene, config, store


def check_composed_renderer(seed: int = 3, entries_per_param: int = 2) -> float:
    """Finite-difference check of mean rendered color through the whole
    renderer on a tiny configuration. Returns max relative error."""
    from .geometry import rays_for_pixels
    from .renderer import render_rays

    scene, config, store = tiny_setup(seed)
    target = scene.views[0]
    sources = [scene.views[i] for i in (1, 2)]
    near, far = scene.bounds
    rng = np.random.default_rng(seed)
    pixels = np.stack([rng.uniform(2, 13, 3), rng.uniform(2, 13, 3)], axis=-1)
    origins, dirs = rays_for_pixels(target, pixels, near, far)

    def build():
        colors, valid = render_rays(origins, dirs, near, far, sources, store, config)
        return nn.tmean(colors)

    return gradcheck(build, list(store.params.values()), eps=1e-4,
                     max_entries=entries_per_param, rng=rng)


def check_permutation_invariance(n_perms: int = 10, seed: int = 5) -> float:
    """Max output drift when source views are permuted."""
    from .geometry import rays_for_pixels
    from .renderer import render_rays

    scene, config, store = tiny_setup(seed, n_sources=4)
    target = scene.views[0]
    sources = [scene.views[i] for i in (1, 2, 3, 4)]
    near, far = scene.bounds
    pixels = np.array([[8.0, 8.0], [4.0, 11.0]])
    origins, dirs = rays_for_pixels(target, pixels, near, far)
    base, _ = render_rays(origins, dirs, near, far, sources, store, config)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_perms):
        perm = rng.permutation(len(sources))
        out, _ = render_rays(origins, dirs, near, far,
                             [sources[i] for i in perm], store, config)
        worst = max(worst, float(np.max(np.abs(out.values - base.values))))
    return worst


def run_selfcheck(verbose: bool = True) -> bool:
    """Full battery; prints one line per check, returns overall pass."""
    from .datasetio import generate_procedural_scene
    from .geometry import project, unproject
    from .imgcore import Image, convolve_direct, convolve_fft, psnr
    from .lensless import make_caustic_psf, simulate_capture, wiener_deconvolve

    checks = []
    rng = np.random.default_rng(11)

    # convolution oracle
    worst = 0.0
    for _ in range(20):
        img = Image(rng.random((rng.integers(4, 12), rng.integers(4, 12), 3)))
        kern = Image(rng.random((3, 3)))
        d = np.max(np.abs(convolve_fft(img, kern).data - convolve_direct(img, kern).data))
        worst = max(worst, d)
    checks.append(("convolve_fft_vs_direct", worst < 1e-6, f"max_err={worst:.2e}"))

    # Wiener round trip, circular noiseless
    gt = Image(rng.random((32, 32, 3)))
    psf = make_caustic_psf(15, seed=2)
    cap = simulate_capture(gt, psf, snr_db=np.inf, seed=0, mode="circular")
    rec = wiener_deconvolve(cap, psf, k=1e-12)
    p = psnr(gt, rec)
    checks.append(("wiener_round_trip", p > 60.0, f"psnr={p:.1f}dB"))

    # projection round trip
    scene = generate_procedural_scene(n_views=4, image_size=16, seed=1)
    view = scene.views[1]
    pt = unproject(5.3, 7.1, 2.4, view)
    pix, depth, ok = project(pt, view)
    err = abs(pix[0] - 5.3) + abs(pix[1] - 7.1) + abs(depth - 2.4)
    checks.append(("project_unproject", ok and err < 1e-9, f"err={err:.2e}"))

    # per-op gradients
    op_errs = check_all_ops()
    worst_op = max(op_errs, key=op_errs.get)
    checks.append(("op_gradients", max(op_errs.values()) < 1e-4,
                   f"worst={worst_op}:{op_errs[worst_op]:.2e}"))

    # composed renderer gradient
    e = check_composed_renderer(entries_per_param=1)
    checks.append(("composed_gradient", e < 1e-3, f"rel_err={e:.2e}"))

    # permutation invariance
    drift = check_permutation_invariance(n_perms=5)
    checks.append(("permutation_invariance", drift < 1e-9, f"drift={drift:.2e}"))

    all_ok = True
    for name, ok, detail in checks:
        all_ok &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name:26s} {detail}")
    return all_ok
