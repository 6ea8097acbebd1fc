"""Force-field representations: queries, warm starting, regularizers,
parameter flattening, differentiability, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from forcelens import forcefield as ff
from forcelens.errors import FieldError, QueryError, ShapeMismatchError
from forcelens.scene import GridSpec, GroundTruthFieldSpec


@pytest.fixture
def grid():
    return GridSpec(origin=np.zeros(3), cell_size=0.025, dims=(16, 16, 16))


def make_triplane(grid, n_frames=3, seed=0, **kw):
    field = ff.make_field("triplane", grid, 27, n_frames, 1 / 30, seed=seed, **kw)
    for k in range(n_frames):
        field.warm_start(k)
    return field


class TestTriPlaneQuery:
    def test_zero_init_field_is_zero(self, grid):
        field = make_triplane(grid)
        rng = np.random.default_rng(0)
        xs = 0.4 * rng.random((10, 3))
        out = field.query_batch(xs, 0.01, 0)
        assert np.array_equal(out, np.zeros((10, 3)))

    def test_purity(self, grid):
        field = make_triplane(grid)
        field.set_params(0.1 * np.random.default_rng(1).standard_normal(field.n_params))
        xs = np.array([[0.2, 0.2, 0.2]])
        a = field.query_batch(xs, 0.02, 1)
        b = field.query_batch(xs, 0.02, 1)
        assert np.array_equal(a, b)

    def test_missing_snapshot(self, grid):
        field = ff.make_field("triplane", grid, 27, 3, 1 / 30)
        with pytest.raises(QueryError, match="frame 2"):
            field.query_batch(np.zeros((1, 3)), 0.08, 2)

    def test_linear_decoder_constant_planes_closed_form(self, grid):
        # F=1, no hidden decoder layers: out = W (c_xy + c_yz + c_xz + phi) + b
        field = ff.make_field(
            "triplane", grid, 27, 1, 1 / 30, seed=3,
            resolution=4, features=1, dec_hidden=(), enc_hidden=4, n_freqs=1,
        )
        field.warm_start(0)
        field.planes[0][:] = 0.3
        field.planes[1][:] = -0.1
        field.planes[2][:] = 0.25
        W = np.array([[1.0, 2.0, -0.5]])
        b = np.array([0.05, 0.0, -0.1])
        field.decoder[-1] = (W, b)
        t = 0.01
        phi, _ = ff._mlp_forward(field.snapshots[0], field._encode_time(0))
        expected = (0.3 - 0.1 + 0.25 + phi[0, 0]) * W[0] + b
        rng = np.random.default_rng(2)
        xs = 0.05 + 0.3 * rng.random((8, 3))
        out = field.query_batch(xs, t, 0)
        assert np.allclose(out, expected[None, :], atol=1e-12)
        # constant over space
        assert np.abs(out - out[0]).max() < 1e-12

    def test_bilinear_exact_at_texel_centers(self, grid):
        field = make_triplane(grid, resolution=5, features=2)
        rng = np.random.default_rng(4)
        field.planes = rng.standard_normal(field.planes.shape)
        R = field.config.resolution
        # texel (i, j) of the xy plane sits at normalized coords (i, j)/(R-1)
        i, j = 2, 3
        u = np.array([i / (R - 1)])
        v = np.array([j / (R - 1)])
        feat, _ = ff._plane_sample(field.planes[0], u, v)
        assert np.abs(feat[0] - field.planes[0][i, j]).max() <= 1e-12

    def test_spatial_continuity(self, grid):
        field = make_triplane(grid)
        rng = np.random.default_rng(5)
        field.set_params(0.5 * rng.standard_normal(field.n_params))
        x = np.array([[0.21, 0.19, 0.23]])
        u = np.array([0.3, -0.5, 0.8])
        u /= np.linalg.norm(u)
        base = field.query_batch(x, 0.01, 0)
        diffs = []
        for k in range(1, 7):
            eps = 1e-3 / 2**k
            diffs.append(np.abs(field.query_batch(x + eps * u, 0.01, 0) - base).max())
        assert all(b <= a * 0.75 + 1e-14 for a, b in zip(diffs, diffs[1:]))


class TestWarmStart:
    def test_copy_bitwise(self, grid):
        field = ff.make_field("triplane", grid, 3, 3, 1 / 30, seed=1)
        field.warm_start(0)
        rng = np.random.default_rng(0)
        field.set_params(0.2 * rng.standard_normal(field.n_params))
        field.warm_start(1)
        assert np.array_equal(field.snapshot_params(1), field.snapshot_params(0))

    def test_seeded_init_deterministic(self, grid):
        a = ff.make_field("triplane", grid, 3, 2, 1 / 30, seed=9)
        b = ff.make_field("triplane", grid, 3, 2, 1 / 30, seed=9)
        a.warm_start(0)
        b.warm_start(0)
        assert np.array_equal(a.snapshot_params(0), b.snapshot_params(0))
        a.warm_start(0)  # idempotent re-init
        assert np.array_equal(a.snapshot_params(0), b.snapshot_params(0))

    def test_missing_previous(self, grid):
        field = ff.make_field("triplane", grid, 3, 3, 1 / 30)
        field.warm_start(0)
        with pytest.raises(QueryError):
            field.warm_start(2)

    def test_query_equals_previous_encoder_after_warm_start(self, grid):
        field = make_triplane(grid, n_frames=2)
        rng = np.random.default_rng(1)
        field.set_params(0.3 * rng.standard_normal(field.n_params))
        field.warm_start(1)  # re-copy after the perturbation
        xs = np.array([[0.2, 0.2, 0.2], [0.25, 0.18, 0.22]])
        t1 = 1.2 / 30
        out1 = field.query_batch(xs, t1, 1)
        # frame 0's encoder weights applied to frame 1's time input agree
        # bitwise with the warm-started snapshot
        feat, _ = field._spatial_features(xs)
        phi, _ = ff._mlp_forward(field.snapshots[0], field._encode_time(1))
        expected, _ = ff._mlp_forward(field.decoder, feat + phi)
        assert np.array_equal(out1, expected)


class TestRegularizers:
    def test_tv_zero_for_constant_planes(self, grid):
        field = make_triplane(grid)
        field.planes[:] = 0.7
        assert ff.tv_loss(field) == 0.0

    def test_tv_brute_force(self, grid):
        field = ff.make_field("triplane", grid, 3, 1, 1 / 30, resolution=2, features=1)
        field.warm_start(0)
        field.planes[:] = 0.0
        field.planes[0][:, :, 0] = np.array([[0.0, 1.0], [0.0, 1.0]])
        # adjacent pairs: axis0 (2 pairs, diffs 0,0), axis1 (2 pairs, diffs 1,1)
        expected = (0.0**2 + 0.0**2) / 2 + (1.0**2 + 1.0**2) / 2
        assert ff.tv_loss(field) == pytest.approx(expected)

    def test_tv_quadratic_scaling(self, grid):
        field = make_triplane(grid)
        rng = np.random.default_rng(2)
        field.planes = rng.standard_normal(field.planes.shape)
        base = ff.tv_loss(field)
        field.planes *= 3.0
        assert ff.tv_loss(field) == pytest.approx(9.0 * base, rel=1e-12)

    def test_tv_not_applicable_for_point(self):
        field = ff.PointForceField(ff.PointForceConfig(n_particles=4, n_frames=2))
        with pytest.raises(FieldError, match="not applicable"):
            ff.tv_loss(field)

    def test_tv_grad_fd(self, grid):
        field = make_triplane(grid, resolution=4, features=2)
        rng = np.random.default_rng(3)
        field.planes = 0.3 * rng.standard_normal(field.planes.shape)
        grad = np.zeros(field.n_params)
        ff.tv_loss_grad(field, grad)
        eps = 1e-6
        base = field.params()
        for i in rng.choice(field.planes.size, 12, replace=False):
            up = base.copy(); up[i] += eps
            dn = base.copy(); dn[i] -= eps
            field.set_params(up); lu = ff.tv_loss(field)
            field.set_params(dn); ld = ff.tv_loss(field)
            field.set_params(base)
            assert grad[i] == pytest.approx((lu - ld) / (2 * eps), rel=1e-5, abs=1e-10)

    def test_time_smooth_zero_after_warm_start(self, grid):
        field = make_triplane(grid)
        assert ff.time_smooth_loss(field, 1) == 0.0
        assert ff.time_smooth_loss(field, 0) == 0.0

    def test_time_smooth_single_perturbation(self, grid):
        field = make_triplane(grid)
        snap = field.snapshots[1]
        n_params = field._n_enc
        snap[0][0][0, 0] += 0.5
        assert ff.time_smooth_loss(field, 1) == pytest.approx(0.5 / n_params)
        # symmetric under swapping snapshots
        a = ff.time_smooth_loss(field, 1)
        field.snapshots[0], field.snapshots[1] = field.snapshots[1], field.snapshots[0]
        assert ff.time_smooth_loss(field, 1) == pytest.approx(a)


class TestParamsAndScatter:
    def test_param_count_formula(self, grid):
        field = ff.make_field(
            "triplane", grid, 27, 2, 1 / 30,
            resolution=32, features=16, dec_hidden=(64, 64), enc_hidden=32, n_freqs=4,
        )
        field.warm_start(0)
        field.warm_start(1)
        planes = 3 * 32 * 32 * 16
        decoder = (16 * 64 + 64) + (64 * 64 + 64) + (64 * 3 + 3)
        encoder = (8 * 32 + 32) + (32 * 16 + 16)
        assert field.n_params == planes + decoder + 2 * encoder
        assert field.params().shape == (field.n_params,)

    def test_zero_scatter_is_identity(self, grid):
        field = make_triplane(grid)
        rng = np.random.default_rng(0)
        field.set_params(rng.standard_normal(field.n_params))
        before = field.params()
        ff.scatter(field, np.zeros(field.n_params))
        assert np.array_equal(field.params(), before)

    def test_scatter_shape_error(self, grid):
        field = make_triplane(grid)
        with pytest.raises(ShapeMismatchError):
            ff.scatter(field, np.zeros(field.n_params + 1))

    def test_read_modify_write_preserves_untouched(self, grid):
        field = make_triplane(grid)
        rng = np.random.default_rng(7)
        field.set_params(rng.standard_normal(field.n_params))
        before = field.params()
        delta = np.zeros(field.n_params)
        delta[5] = 1.25
        ff.scatter(field, delta)
        after = field.params()
        assert after[5] == before[5] + 1.25
        mask = np.ones(field.n_params, dtype=bool)
        mask[5] = False
        assert np.array_equal(after[mask], before[mask])


class TestQueryGradients:
    @pytest.mark.parametrize("kind", ["triplane", "kplanes"])
    def test_param_gradients_match_fd(self, grid, kind):
        field = ff.make_field(
            kind, grid, 27, 2, 1 / 30, seed=11, resolution=4, features=2, dec_hidden=(8,),
            **({"enc_hidden": 8, "n_freqs": 2} if kind == "triplane" else {}),
        )
        if kind == "triplane":
            field.warm_start(0)
            field.warm_start(1)
        rng = np.random.default_rng(8)
        field.set_params(field.params() + 0.1 * rng.standard_normal(field.n_params))
        xs = 0.05 + 0.3 * rng.random((9, 3))
        w = rng.standard_normal((9, 3))
        t, frame = 0.04, 1
        grad = np.zeros(field.n_params)
        xbar = field.query_vjp(xs, t, frame, w, grad)
        base = field.params()
        eps = 1e-5
        for i in rng.choice(field.n_params, 40, replace=False):
            up = base.copy(); up[i] += eps
            dn = base.copy(); dn[i] -= eps
            field.set_params(up)
            lu = float((field.query_batch(xs, t, frame) * w).sum())
            field.set_params(dn)
            ld = float((field.query_batch(xs, t, frame) * w).sum())
            field.set_params(base)
            fd = (lu - ld) / (2 * eps)
            denom = max(abs(fd), abs(grad[i]), 1e-10)
            assert abs(fd - grad[i]) / denom <= 1e-4
        # spatial gradient
        for n in range(3):
            for a in range(3):
                xp = xs.copy(); xp[n, a] += eps
                xm = xs.copy(); xm[n, a] -= eps
                fd = (
                    float((field.query_batch(xp, t, frame) * w).sum())
                    - float((field.query_batch(xm, t, frame) * w).sum())
                ) / (2 * eps)
                denom = max(abs(fd), abs(xbar[n, a]), 1e-10)
                assert abs(fd - xbar[n, a]) / denom <= 1e-4

    def test_point_gradient_is_indicator(self):
        field = ff.PointForceField(ff.PointForceConfig(n_particles=5, n_frames=3))
        rng = np.random.default_rng(0)
        field.set_params(rng.standard_normal(field.n_params))
        xs = rng.random((5, 3))
        w = rng.standard_normal((5, 3))
        grad = np.zeros(field.n_params)
        out = field.query_vjp(xs, 0.04, 1, w, grad)
        assert out is None
        expected = np.zeros((3, 5, 3))
        expected[1] = w
        assert np.array_equal(grad, expected.ravel())


class TestPointField:
    def test_lookup_and_zero_outside(self):
        field = ff.PointForceField(ff.PointForceConfig(n_particles=3, n_frames=2))
        field.values[1, 2] = [1.0, 2.0, 3.0]
        out = ff.query(field, [0.0, 0.0, 0.0], 0.04, particle_index=2)
        assert np.array_equal(out, [1.0, 2.0, 3.0])
        assert np.array_equal(ff.query(field, [0.0, 0.0, 0.0], 0.04), np.zeros(3))

    def test_missing_frame(self):
        field = ff.PointForceField(ff.PointForceConfig(n_particles=3, n_frames=2))
        with pytest.raises(QueryError):
            field.query_batch(np.zeros((3, 3)), 0.0, 5)

    def test_warm_start_copies_previous(self):
        field = ff.PointForceField(ff.PointForceConfig(n_particles=2, n_frames=2))
        field.values[0] = [[1, 2, 3], [4, 5, 6]]
        field.warm_start(1)
        assert np.array_equal(field.values[1], field.values[0])


class TestAnalyticField:
    def test_sinusoid_time_dependence(self):
        spec = GroundTruthFieldSpec(
            kind="sinusoid", amplitude=2.0, axis=np.array([1.0, 0, 0]), frequency=0.5
        )
        field = ff.AnalyticField(spec, 1 / 30)
        xs = np.zeros((1, 3))
        out = field.query_batch(xs, 0.5, 0)
        assert out[0, 0] == pytest.approx(2.0 * np.sin(np.pi * 0.5))

    def test_vortex_tangential_and_decay(self):
        spec = GroundTruthFieldSpec(
            kind="vortex", center=np.zeros(3), axis=np.array([0, 0, 1.0]),
            strength=1.0, falloff=2.0,
        )
        field = ff.AnalyticField(spec, 1 / 30)
        xs = np.array([[0.1, 0.0, 0.3], [0.2, 0.0, -0.1]])
        out = field.query_batch(xs, 0.0, 0)
        # tangential: orthogonal to both axis and radial direction
        assert abs(out[0] @ np.array([0, 0, 1.0])) < 1e-12
        assert abs(out[0] @ np.array([1.0, 0, 0])) < 1e-12
        assert np.linalg.norm(out[0]) == pytest.approx(np.exp(-0.2))
        assert np.linalg.norm(out[1]) == pytest.approx(np.exp(-0.4))

    def test_point_impulse_window(self):
        spec = GroundTruthFieldSpec(
            kind="point_impulse", a=np.array([1.0, 0, 0]), indices=(1,), window=(2, 4)
        )
        field = ff.AnalyticField(spec, 1 / 30)
        xs = np.zeros((3, 3))
        assert np.array_equal(field.query_batch(xs, 0.0, 1), np.zeros((3, 3)))
        out = field.query_batch(xs, 0.0, 2)
        assert np.array_equal(out[1], [1.0, 0, 0])
        assert np.array_equal(out[0], np.zeros(3))


class TestCheckpointIO:
    @pytest.mark.parametrize("kind", ["triplane", "kplanes", "point"])
    def test_round_trip_exact(self, grid, kind, tmp_path):
        field = ff.make_field(kind, grid, 27, 3, 1 / 30, seed=2)
        if kind == "triplane":
            for k in range(3):
                field.warm_start(k)
        rng = np.random.default_rng(6)
        field.set_params(rng.standard_normal(field.n_params))
        path = tmp_path / "field.json"
        ff.save_field(field, path)
        loaded = ff.load_field(path)
        assert loaded.kind == kind
        assert np.array_equal(loaded.params(), field.params())
        xs = 0.1 + 0.2 * rng.random((5, 3))
        idx = np.arange(5) if kind == "point" else None
        a = field.query_batch(xs, 0.05, 1, indices=idx)
        b = loaded.query_batch(xs, 0.05, 1, indices=idx)
        assert np.array_equal(a, b)

    def test_version_rejected(self, grid, tmp_path):
        field = make_triplane(grid, n_frames=1)
        path = tmp_path / "field.json"
        ff.save_field(field, path)
        import json

        doc = json.loads(path.read_text())
        doc["version"] = "0"
        path.write_text(json.dumps(doc))
        with pytest.raises(FieldError):
            ff.load_field(path)
