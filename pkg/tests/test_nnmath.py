import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lenslessnvs import nnmath as nn
from lenslessnvs.nnmath import AutodiffError, ParamStore, Tensor
from lenslessnvs.verify import check_all_ops, gradcheck


class TestBackward:
    def test_linear_gradient(self, rng):
        x = rng.random((4, 3))
        w = nn.parameter(rng.random((4, 3)))
        loss = nn.tsum(nn.mul(w, nn.constant(x)))
        loss.backward()
        assert np.allclose(w.grad, x)

    def test_non_scalar_loss_rejected(self, rng):
        t = nn.parameter(rng.random((3, 3)))
        with pytest.raises(AutodiffError):
            nn.mul(t, t).backward()

    def test_disconnected_param_untouched(self, rng):
        a = nn.parameter(rng.random(4))
        b = nn.parameter(rng.random(4))
        nn.tsum(nn.mul(a, a)).backward()
        assert b.grad is None

    def test_grad_accumulates_across_uses(self):
        a = nn.parameter(np.array([2.0]))
        loss = nn.tsum(nn.add(a, a))
        loss.backward()
        assert a.grad[0] == pytest.approx(2.0)

    def test_all_ops_match_finite_differences(self):
        errs = check_all_ops(seed=0)
        worst = max(errs.values())
        assert worst < 1e-4, f"worst op gradient error {worst}"

    def test_operator_sugar(self, rng):
        a = nn.parameter(rng.random((2, 2)))
        out = (a + 1.0) * 2.0 - a / 2.0
        expected = (a.values + 1.0) * 2.0 - a.values / 2.0
        assert np.allclose(out.values, expected)


class TestSoftmaxAttention:
    def test_rows_sum_to_one(self, rng):
        z = nn.constant(rng.normal(0, 2, (5, 7)))
        s = nn.masked_softmax(z)
        assert np.allclose(s.values.sum(axis=-1), 1.0, atol=1e-9)

    def test_singleton_key_returns_value(self, rng):
        q = nn.constant(rng.normal(0, 1, (2, 3, 4)))
        k = nn.constant(rng.normal(0, 1, (2, 1, 4)))
        v = nn.constant(rng.normal(0, 1, (2, 1, 4)))
        out = nn.softmax_attention(q, k, v, None)
        assert np.allclose(out.values, np.broadcast_to(v.values, out.shape))

    def test_identical_keys_mean_of_values(self, rng):
        q = nn.constant(rng.normal(0, 1, (1, 2, 4)))
        k = nn.constant(np.tile(rng.normal(0, 1, (1, 1, 4)), (1, 6, 1)))
        v = nn.constant(rng.normal(0, 1, (1, 6, 4)))
        out = nn.softmax_attention(q, k, v, None)
        assert np.allclose(out.values, v.values.mean(axis=1, keepdims=True))

    def test_matches_brute_force(self, rng):
        q = rng.normal(0, 1, (3, 5))
        k = rng.normal(0, 1, (4, 5))
        v = rng.normal(0, 1, (4, 6))
        out = nn.softmax_attention(nn.constant(q), nn.constant(k), nn.constant(v), None)
        logits = q @ k.T / np.sqrt(5)
        w = np.exp(logits - logits.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        assert np.max(np.abs(out.values - w @ v)) < 1e-9

    def test_all_masked_rejected(self, rng):
        z = nn.constant(rng.normal(0, 1, (2, 3)))
        mask = np.zeros((2, 3), dtype=bool)
        with pytest.raises(AutodiffError):
            nn.masked_softmax(z, mask)

    def test_convex_combination_when_unmasked(self, rng):
        q = nn.constant(rng.normal(0, 1, (1, 3, 4)))
        k = nn.constant(rng.normal(0, 1, (1, 5, 4)))
        vv = rng.normal(0, 1, (1, 5, 4))
        out = nn.softmax_attention(q, k, nn.constant(vv), None).values
        assert np.all(out <= vv.max(axis=1, keepdims=True) + 1e-12)
        assert np.all(out >= vv.min(axis=1, keepdims=True) - 1e-12)

    def test_key_permutation_invariance_single_query(self, rng):
        q = nn.constant(rng.normal(0, 1, (1, 1, 4)))
        k = rng.normal(0, 1, (1, 6, 4))
        v = rng.normal(0, 1, (1, 6, 4))
        base = nn.softmax_attention(q, nn.constant(k), nn.constant(v), None).values
        perm = rng.permutation(6)
        out = nn.softmax_attention(q, nn.constant(k[:, perm]),
                                   nn.constant(v[:, perm]), None).values
        assert np.max(np.abs(out - base)) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 31))
    def test_masked_rows_get_zero_weight(self, seed):
        r = np.random.default_rng(seed)
        z = nn.constant(r.normal(0, 1, (3, 5)))
        mask = np.ones((3, 5), dtype=bool)
        mask[:, 2] = False
        s = nn.masked_softmax(z, mask)
        assert np.all(s.values[:, 2] == 0)
        assert np.allclose(s.values.sum(axis=-1), 1.0)


class TestAdam:
    def test_first_step_closed_form(self):
        store = ParamStore()
        p = store.create("w", np.array([1.0]))
        p.accumulate(np.array([1.0]))
        nn.adam_step(store, lr=0.01)
        # bias-corrected first step moves by ~lr against a unit gradient
        assert p.values[0] == pytest.approx(1.0 - 0.01, abs=1e-6)

    def test_zero_gradient_no_move(self):
        store = ParamStore()
        p = store.create("w", np.array([1.0, 2.0]))
        p.accumulate(np.zeros(2))
        nn.adam_step(store, lr=0.1)
        assert np.array_equal(p.values, [1.0, 2.0])

    def test_no_gradient_no_move(self):
        store = ParamStore()
        p = store.create("w", np.array([3.0]))
        nn.adam_step(store, lr=0.1)
        assert p.values[0] == 3.0

    def test_nan_gradient_names_parameter(self):
        store = ParamStore()
        p = store.create("layer.weight", np.array([1.0]))
        p.accumulate(np.array([np.nan]))
        with pytest.raises(AutodiffError, match="layer.weight"):
            nn.adam_step(store, lr=0.1)

    def test_grads_zeroed_after_step(self):
        store = ParamStore()
        p = store.create("w", np.array([1.0]))
        p.accumulate(np.array([1.0]))
        nn.adam_step(store, lr=0.01)
        assert p.grad is None

    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.create("w", np.zeros(2))
        with pytest.raises(AutodiffError):
            store.create("w", np.zeros(2))


class TestLrSchedule:
    def test_endpoints(self):
        assert nn.lr_at_step(5e-4, 0, 100) == pytest.approx(5e-4)
        assert nn.lr_at_step(5e-4, 99, 100) == pytest.approx(5e-5)

    def test_monotone_decay(self):
        lrs = [nn.lr_at_step(1.0, s, 50) for s in range(50)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_degenerate_total(self):
        assert nn.lr_at_step(1.0, 0, 1) == 1.0


class TestCheckpoint:
    def _store(self, rng):
        store = ParamStore()
        store.create("b.weight", rng.normal(0, 1, (3, 4)))
        store.create("a.bias", rng.normal(0, 1, 4))
        return store

    def test_round_trip_fresh(self, tmp_path, rng):
        store = self._store(rng)
        store.step_count = 17
        path = tmp_path / "ck.bin"
        nn.save_checkpoint(path, store, global_step=42)
        loaded, step = nn.load_checkpoint(path)
        assert step == 42 and loaded.step_count == 17
        for name in store.params:
            expect = store.params[name].values.astype(np.float32).astype(np.float64)
            assert np.array_equal(loaded.params[name].values, expect)

    def test_load_into_existing_store(self, tmp_path, rng):
        store = self._store(rng)
        path = tmp_path / "ck.bin"
        nn.save_checkpoint(path, store)
        other = self._store(np.random.default_rng(99))
        other, _ = nn.load_checkpoint(path, other)
        expect = store.params["b.weight"].values.astype(np.float32).astype(np.float64)
        assert np.array_equal(other.params["b.weight"].values, expect)

    def test_float32_storage_is_idempotent(self, tmp_path, rng):
        store = self._store(rng)
        p1 = tmp_path / "1.bin"
        p2 = tmp_path / "2.bin"
        nn.save_checkpoint(p1, store)
        loaded, _ = nn.load_checkpoint(p1)
        nn.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_shape_mismatch_rejected(self, tmp_path, rng):
        store = self._store(rng)
        path = tmp_path / "ck.bin"
        nn.save_checkpoint(path, store)
        other = ParamStore()
        other.create("b.weight", np.zeros((4, 4)))
        other.create("a.bias", np.zeros(4))
        with pytest.raises(AutodiffError):
            nn.load_checkpoint(path, other)

    def test_unknown_name_rejected(self, tmp_path, rng):
        store = self._store(rng)
        path = tmp_path / "ck.bin"
        nn.save_checkpoint(path, store)
        other = ParamStore()
        other.create("something.else", np.zeros((3, 4)))
        with pytest.raises(AutodiffError):
            nn.load_checkpoint(path, other)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPTxxxxxxxx")
        with pytest.raises(AutodiffError):
            nn.load_checkpoint(path)


class TestMisc:
    def test_xavier_bounds(self, rng):
        vals = nn.xavier_uniform((50, 60), rng)
        bound = np.sqrt(6.0 / 110)
        assert np.all(np.abs(vals) <= bound)

    def test_gather_bilinear_matches_geometry(self, rng):
        from lenslessnvs.geometry import bilinear_sample
        fm = rng.random((6, 6, 3))
        coords = rng.uniform(0, 5, (10, 2))
        inb = np.ones(10, dtype=bool)
        t = nn.gather_bilinear(nn.constant(fm), coords, inb)
        ref, _ = bilinear_sample(fm, coords)
        assert np.max(np.abs(t.values - ref)) < 1e-12

    def test_conv2d_shape_contract(self, rng):
        x = nn.constant(rng.random((2, 9, 9)))
        k = nn.constant(rng.random((4, 2, 3, 3)))
        assert nn.conv2d(x, k, stride=1, pad=1).shape == (4, 9, 9)
        assert nn.conv2d(x, k, stride=2, pad=1).shape == (4, 5, 5)

    def test_forward_determinism(self, rng):
        x = rng.random((3, 8, 8))
        k = rng.random((4, 3, 3, 3))
        a = nn.conv2d(nn.constant(x), nn.constant(k), pad=1).values
        b = nn.conv2d(nn.constant(x), nn.constant(k), pad=1).values
        assert np.array_equal(a, b)

    def test_gradcheck_utility_catches_errors(self, rng):
        # deliberately wrong gradient must be flagged by the checker
        a = nn.parameter(rng.random((3, 3)))

        def build():
            out = nn.power(a, 2.0)
            bad = Tensor(out.values, parents=(a,),
                         backward_fn=lambda g: a.accumulate(g))  # wrong: d(a^2)=2a
            return nn.tsum(bad)

        assert gradcheck(build, [a]) > 1e-2
