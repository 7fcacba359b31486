import numpy as np
import pytest

from lenslessnvs import nnmath as nn
from lenslessnvs.datasetio import generate_procedural_scene, look_at_pose
from lenslessnvs.geometry import CameraView, GeometryError, rays_for_pixels
from lenslessnvs.imgcore import Image
from lenslessnvs.renderer import (
    RendererConfig,
    aggregate_points,
    extract_features,
    init_renderer_params,
    point_aggregate,
    render_image,
    render_rays,
    stratified_t,
    view_aggregate,
)
from lenslessnvs.verify import tiny_setup


@pytest.fixture(scope="module")
def tiny():
    scene, config, store = tiny_setup(seed=3, n_sources=3)
    return scene, config, store


class TestConfig:
    def test_paper_defaults(self):
        c = RendererConfig()
        assert c.points_per_ray == 192
        assert c.source_views == 10

    def test_validation(self):
        with pytest.raises(ValueError):
            RendererConfig(points_per_ray=0)
        with pytest.raises(ValueError):
            RendererConfig(feature_dim=10, heads=3)

    def test_dict_round_trip(self):
        c = RendererConfig(feature_dim=16, pyramid_levels=2)
        assert RendererConfig.from_dict(c.to_dict()) == c


class TestFeatures:
    def test_pyramid_shapes(self, tiny):
        scene, config, store = tiny
        pyr = extract_features(scene.views[0].image, store, config)
        h = scene.views[0].intrinsics.height
        assert len(pyr) == config.pyramid_levels
        for lvl, fmap in enumerate(pyr):
            expect = -(-h // (2 ** lvl))  # ceil division
            assert fmap.shape == (expect, expect, config.feature_dim)

    def test_deterministic(self, tiny):
        scene, config, store = tiny
        a = extract_features(scene.views[0].image, store, config)
        b = extract_features(scene.views[0].image, store, config)
        for x, y in zip(a, b):
            assert np.array_equal(x.values, y.values)

    def test_shift_equivariance_interior(self, tiny):
        scene, config, store = tiny
        img = scene.views[0].image
        shift = 3
        shifted = np.zeros_like(img.data)
        shifted[:, shift:] = img.data[:, :-shift]
        a = extract_features(img, store, config)[0].values
        b = extract_features(Image(shifted), store, config)[0].values
        # compare interior columns only (stride-1 stem is shift-equivariant
        # away from the zero-filled border)
        interior_a = a[4:-4, 4:-4 - shift]
        interior_b = b[4:-4, 4 + shift:-4]
        assert np.max(np.abs(interior_a - interior_b)) < 1e-5

    def test_grayscale_input_accepted(self, tiny):
        scene, config, store = tiny
        gray = Image(scene.views[0].image.data.mean(axis=2))
        pyr = extract_features(gray, store, config)
        assert pyr[0].shape[-1] == config.feature_dim


class TestViewAggregate:
    def test_permutation_invariant(self, tiny):
        scene, config, store = tiny
        sources = [scene.views[i] for i in (1, 2, 3)]
        point = np.array([0.02, -0.03, -2.1])
        raydir = np.array([0.0, 0.0, -1.0])
        base = view_aggregate(point, raydir, sources, store, config).values
        rng = np.random.default_rng(0)
        for _ in range(5):
            perm = rng.permutation(3)
            out = view_aggregate(point, raydir, [sources[i] for i in perm],
                                 store, config).values
            assert np.max(np.abs(out - base)) < 1e-9

    def test_invisible_point_rejected(self, tiny):
        scene, config, store = tiny
        sources = [scene.views[1]]
        behind = np.array([0.0, 0.0, 5.0])  # behind every ring camera
        with pytest.raises(GeometryError):
            view_aggregate(behind, np.array([0.0, 0.0, -1.0]), sources, store, config)

    def test_batch_matches_single(self, tiny):
        scene, config, store = tiny
        sources = [scene.views[i] for i in (1, 2)]
        feats = [extract_features(v.image, store, config) for v in sources]
        pts = np.array([[0.0, 0.0, -2.0], [0.05, 0.02, -2.5]])
        dirs = np.tile([0.0, 0.0, -1.0], (2, 1))
        batch, valid = aggregate_points(pts, dirs, sources, feats, store, config)
        assert valid.all()
        for i in range(2):
            single = view_aggregate(pts[i], dirs[i], sources, store, config, feats)
            assert np.max(np.abs(batch.values[i] - single.values)) < 1e-12


class TestPointAggregate:
    def test_output_in_unit_interval(self, tiny, rng):
        _, config, store = tiny
        feats = nn.constant(rng.normal(0, 1, (4, config.points_per_ray,
                                               config.feature_dim)))
        t = np.linspace(1.1, 6.9, config.points_per_ray)
        rgb = point_aggregate(feats, t, 1.0, 7.0, store, config).values
        assert rgb.shape == (4, 3)
        assert np.all(rgb > 0) and np.all(rgb < 1)

    def test_duplication_invariance(self, tiny, rng):
        _, config, store = tiny
        k = config.points_per_ray
        base_feat = rng.normal(0, 1, (1, k, config.feature_dim))
        t = np.linspace(1.5, 6.5, k)
        a = point_aggregate(nn.constant(base_feat), t, 1.0, 7.0, store, config).values
        doubled = np.concatenate([base_feat, base_feat], axis=1)
        t2 = np.concatenate([t, t])
        b = point_aggregate(nn.constant(doubled), t2, 1.0, 7.0, store, config).values
        assert np.max(np.abs(a - b)) < 1e-9

    def test_k1_single_token(self, tiny, rng):
        _, config, store = tiny
        feats = nn.constant(rng.normal(0, 1, (1, 1, config.feature_dim)))
        rgb = point_aggregate(feats, np.array([2.0]), 1.0, 7.0, store, config)
        assert rgb.shape == (1, 3)


class TestRenderRays:
    def _rays(self, scene, n=6):
        near, far = scene.bounds
        rng = np.random.default_rng(1)
        pixels = rng.uniform(3, 12, (n, 2))
        return rays_for_pixels(scene.views[0], pixels, near, far) + (near, far)

    def test_batch_order_independent(self, tiny):
        scene, config, store = tiny
        sources = [scene.views[i] for i in (1, 2)]
        origins, dirs, near, far = self._rays(scene)
        base, _ = render_rays(origins, dirs, near, far, sources, store, config)
        perm = np.random.default_rng(2).permutation(len(origins))
        out, _ = render_rays(origins[perm], dirs[perm], near, far, sources,
                             store, config)
        assert np.max(np.abs(out.values - base.values[perm])) < 1e-12

    def test_partition_equals_full(self, tiny):
        scene, config, store = tiny
        sources = [scene.views[i] for i in (1, 2)]
        feats = [extract_features(v.image, store, config) for v in sources]
        origins, dirs, near, far = self._rays(scene)
        full, _ = render_rays(origins, dirs, near, far, sources, store, config,
                              feats=feats)
        parts = []
        for sl in (slice(0, 2), slice(2, 6)):
            c, _ = render_rays(origins[sl], dirs[sl], near, far, sources, store,
                               config, feats=feats)
            parts.append(c.values)
        assert np.array_equal(np.concatenate(parts), full.values)

    def test_irrelevant_source_ignored(self, tiny):
        # a source looking away from the scene sees no sample point and must
        # not change any output color
        scene, config, store = tiny
        sources = [scene.views[i] for i in (1, 2)]
        origins, dirs, near, far = self._rays(scene)
        base, _ = render_rays(origins, dirs, near, far, sources, store, config)
        v0 = scene.views[0]
        away = look_at_pose(np.array([0.0, 0.0, -10.0]), np.array([0.0, 0.0, -20.0]))
        blind = CameraView(v0.image, away, v0.intrinsics)
        out, _ = render_rays(origins, dirs, near, far, sources + [blind],
                             store, config)
        assert np.max(np.abs(out.values - base.values)) < 1e-9

    def test_no_sources_rejected(self, tiny):
        scene, config, store = tiny
        origins, dirs, near, far = self._rays(scene)
        with pytest.raises(GeometryError):
            render_rays(origins, dirs, near, far, [], store, config)

    def test_render_image_shapes(self, tiny):
        scene, config, store = tiny
        sources = [scene.views[i] for i in (1, 2)]
        near, far = scene.bounds
        img, valid = render_image(scene.views[0], sources, store, config, near, far)
        assert img.shape == (16, 16, 3)
        assert valid.shape == (16, 16)


class TestStratifiedT:
    def test_modes_and_shape(self):
        t = stratified_t(3, 8, 1.0, 5.0, "uniform-depth")
        assert t.shape == (3, 8)
        assert np.all(np.diff(t, axis=-1) > 0)
        td = stratified_t(3, 64, 1.0, 10.0, "uniform-disparity")
        assert np.median(td) < 5.5

    def test_unknown_mode(self):
        with pytest.raises(GeometryError):
            stratified_t(1, 4, 1.0, 5.0, "bogus")


class TestInit:
    def test_deterministic_init(self):
        config = RendererConfig(feature_dim=8, pyramid_levels=2)
        a = init_renderer_params(config, 5)
        b = init_renderer_params(config, 5)
        assert sorted(a.params) == sorted(b.params)
        for name in a.params:
            assert np.array_equal(a.params[name].values, b.params[name].values)

    def test_different_seed_different_weights(self):
        config = RendererConfig(feature_dim=8, pyramid_levels=2)
        a = init_renderer_params(config, 5)
        b = init_renderer_params(config, 6)
        assert not np.array_equal(a.params["head.w"].values, b.params["head.w"].values)
