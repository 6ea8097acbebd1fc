"""Adjoint correctness: tape invariants, finite-difference agreement,
causality, clipping semantics, determinism."""

from __future__ import annotations

import numpy as np
import pytest

from forcelens import forcefield as ff
from forcelens import mpm
from forcelens.adjoint import (
    GradCheckConfig,
    backprop,
    finite_diff_grad,
    gradient_check,
    rollout_with_tape,
)
from forcelens.errors import InvariantViolation

from conftest import constant_field


def point_field_for(scene, frames):
    return ff.PointForceField(
        ff.PointForceConfig(
            n_particles=len(scene.particles), n_frames=frames, frame_dt=scene.frame_dt
        )
    )


class TestTape:
    def test_taped_equals_untaped_bitwise(self, small_scene):
        field = constant_field([0.8, 0.2, 0.4])
        state = mpm.SimState.from_scene(small_scene)
        taped, tape = rollout_with_tape(state, field, small_scene, 2)
        untaped = mpm.rollout(small_scene, field, 2)
        assert np.array_equal(taped.positions, untaped.positions)
        assert np.array_equal(taped.velocities, untaped.velocities)

    def test_checkpoint_count(self, small_scene, zero_field):
        state = mpm.SimState.from_scene(small_scene)
        _, tape = rollout_with_tape(state, zero_field, small_scene, 2)
        assert tape.n_checkpoints == tape.n_substeps + 1
        assert tape.n_substeps == 2 * small_scene.substeps_per_frame

    def test_replay_bitwise(self, small_scene):
        field = constant_field([0.5, -0.2, 0.3])
        state = mpm.SimState.from_scene(small_scene)
        _, tape = rollout_with_tape(state, field, small_scene, 1)
        for k in (0, 7, tape.n_substeps - 1):
            replayed = tape.replay_substep(k)
            chk = tape.checkpoint(k + 1)
            assert all(np.array_equal(a, b) for a, b in zip(replayed, chk))

    def test_zero_frames(self, small_scene, zero_field):
        state = mpm.SimState.from_scene(small_scene)
        traj, tape = rollout_with_tape(state, zero_field, small_scene, 0)
        assert tape.n_substeps == 0
        assert traj.positions.shape[0] == 1
        assert np.array_equal(traj.positions[0], small_scene.particles.x)

    def test_memory_budget(self, small_scene, zero_field):
        from forcelens.adjoint import MemoryBudgetError

        state = mpm.SimState.from_scene(small_scene)
        with pytest.raises(MemoryBudgetError, match="budget"):
            rollout_with_tape(state, zero_field, small_scene, 2, max_tape_bytes=1000)


class TestBackprop:
    def test_zero_cotangents(self, small_scene):
        field = point_field_for(small_scene, 2)
        state = mpm.SimState.from_scene(small_scene)
        traj, tape = rollout_with_tape(state, field, small_scene, 2)
        rep = backprop(tape, np.zeros_like(traj.positions))
        assert np.array_equal(rep.gradient, np.zeros(field.n_params))

    def test_ballistic_hand_derived(self, ballistic_scene):
        # loss = final x-coordinate; force = per-frame point entries.
        # A kick at global substep j persists through the remaining M - j
        # advections, so d loss / d a_x[frame f] = sum_{j in f} dt^2 (M - j).
        frames = 3
        field = point_field_for(ballistic_scene, frames)
        field.values[:] = np.array([0.4, 0.1, 0.2])  # constant across frames
        state = mpm.SimState.from_scene(ballistic_scene)
        traj, tape = rollout_with_tape(state, field, ballistic_scene, frames)
        cot = np.zeros_like(traj.positions)
        cot[frames, 0, 0] = 1.0
        rep = backprop(tape, cot)
        grad = rep.gradient.reshape(frames, 1, 3)
        dt = ballistic_scene.substep_dt
        S = ballistic_scene.substeps_per_frame
        M = frames * S
        for f in range(frames):
            expected = sum(dt * dt * (M - j) for j in range(f * S, (f + 1) * S))
            assert grad[f, 0, 0] == pytest.approx(expected, rel=1e-5)
            assert grad[f, 0, 1] == pytest.approx(0.0, abs=1e-18)

    def test_causality(self, small_scene):
        # loss on frame 1 has exactly zero gradient wrt frame-2 forces
        frames = 3
        field = point_field_for(small_scene, frames)
        field.values[:] = np.array([0.3, 0.1, 0.2])
        state = mpm.SimState.from_scene(small_scene)
        traj, tape = rollout_with_tape(state, field, small_scene, frames)
        cot = np.zeros_like(traj.positions)
        cot[1] = 1.0
        rep = backprop(tape, cot)
        grad = rep.gradient.reshape(frames, -1)
        assert np.abs(grad[0]).max() > 0
        assert np.array_equal(grad[1], np.zeros_like(grad[1]))
        assert np.array_equal(grad[2], np.zeros_like(grad[2]))

    def test_triplane_causality_snapshots(self, small_scene):
        frames = 3
        field = ff.make_field(
            "triplane", small_scene.grid, 27, frames, small_scene.frame_dt,
            seed=4, resolution=4, features=2, dec_hidden=(8,), enc_hidden=8, n_freqs=2,
        )
        for k in range(frames):
            field.warm_start(k)
        rng = np.random.default_rng(2)
        field.set_params(field.params() + 0.05 * rng.standard_normal(field.n_params))
        state = mpm.SimState.from_scene(small_scene)
        traj, tape = rollout_with_tape(state, field, small_scene, frames)
        cot = np.zeros_like(traj.positions)
        cot[1] = rng.standard_normal(cot[1].shape)
        rep = backprop(tape, cot)
        lo1 = field._snapshot_offset(1)
        lo2 = field._snapshot_offset(2)
        n = field._n_enc
        assert np.array_equal(rep.gradient[lo1 : lo1 + n], np.zeros(n))
        assert np.array_equal(rep.gradient[lo2 : lo2 + n], np.zeros(n))

    def test_determinism(self, small_scene):
        field = point_field_for(small_scene, 2)
        field.values[:] = 0.2
        state = mpm.SimState.from_scene(small_scene)
        traj, tape = rollout_with_tape(state, field, small_scene, 2)
        rng = np.random.default_rng(0)
        cot = rng.standard_normal(traj.positions.shape)
        g1 = backprop(tape, cot)
        g2 = backprop(tape, cot)
        assert np.array_equal(g1.gradient, g2.gradient)

    def test_clipping_rescales_only(self, small_scene):
        from forcelens.adjoint import _clip_state

        rng = np.random.default_rng(1)
        xb = rng.standard_normal((27, 3))
        vb = rng.standard_normal((27, 3))
        Cb = rng.standard_normal((27, 3, 3))
        Db = rng.standard_normal((27, 3, 3))
        norm = np.sqrt((xb**2).sum() + (vb**2).sum() + (Cb**2).sum() + (Db**2).sum())
        x2, v2, C2, D2, s = _clip_state(xb, vb, Cb, Db, norm / 3)
        assert 0 < s < 1
        assert np.allclose(x2, s * xb) and np.allclose(D2, s * Db)
        # below threshold: untouched, scale exactly 1
        x3, _, _, _, s3 = _clip_state(xb, vb, Cb, Db, norm * 2)
        assert s3 == 1.0 and np.array_equal(x3, xb)

    def test_clip_events_counted(self, small_scene):
        field = point_field_for(small_scene, 1)
        state = mpm.SimState.from_scene(small_scene)
        traj, tape = rollout_with_tape(state, field, small_scene, 1)
        rng = np.random.default_rng(1)
        cot = np.zeros_like(traj.positions)
        cot[1] = rng.standard_normal(cot[1].shape)
        free = backprop(tape, cot, clip_threshold=1e12)
        clipped = backprop(tape, cot, clip_threshold=1e-6)
        assert free.clip_events == 0
        assert clipped.clip_events == tape.n_substeps


class TestFiniteDiff:
    def test_quadratic_loss_exact(self, small_scene):
        # bypass the simulator: loss depends on parameters only
        field = point_field_for(small_scene, 1)
        rng = np.random.default_rng(3)
        field.set_params(rng.standard_normal(field.n_params))
        w = rng.standard_normal(field.n_params)

        def loss_fn(_traj, probe):
            p = probe.params()
            return float(0.5 * (w * p * p).sum())

        base = field.params()
        idx = rng.choice(field.n_params, 8, replace=False)
        fd = finite_diff_grad(
            mpm.SimState.from_scene(small_scene), field, small_scene, 0,
            loss_fn, idx, 1e-6,
        )
        assert np.allclose(fd, w[idx] * base[idx], rtol=1e-6, atol=1e-9)

    def test_eps_zero_rejected(self, small_scene, zero_field):
        with pytest.raises(InvariantViolation):
            finite_diff_grad(
                mpm.SimState.from_scene(small_scene), zero_field, small_scene, 1,
                lambda t, f=None: 0.0, [0], 0.0,
            )

    def test_worker_count_invariance(self, small_scene):
        frames = 1
        field = point_field_for(small_scene, frames)
        field.values[:] = 0.1
        state = mpm.SimState.from_scene(small_scene)

        def loss_fn(traj, _field=None):
            return float(traj.positions[-1].sum())

        idx = np.arange(6)
        g1 = finite_diff_grad(state, field, small_scene, frames, loss_fn, idx, 1e-6, workers=1)
        g4 = finite_diff_grad(state, field, small_scene, frames, loss_fn, idx, 1e-6, workers=4)
        assert np.array_equal(g1, g4)


class TestGradientCheck:
    def test_default_config_passes(self):
        rep = gradient_check(GradCheckConfig(n_indices=48, seed=12))
        assert rep.passed
        assert rep.fraction_ok >= 0.95

    def test_corrupted_adjoint_fails(self):
        rep = gradient_check(GradCheckConfig(n_indices=48, seed=12, corrupt_sign=True))
        assert not rep.passed

    def test_empty_index_set_vacuous(self):
        rep = gradient_check(GradCheckConfig(n_indices=0, seed=1))
        assert rep.passed and rep.vacuous

    def test_rejects_oversized_config(self):
        with pytest.raises(InvariantViolation):
            gradient_check(GradCheckConfig(particles_per_axis=10))
