"""Reverse-mode differentiation of frame rollouts.

`rollout_with_tape` records every substep (full state checkpoints plus the
intermediates the reverse pass consumes); `backprop` walks the tape backwards,
clipping the adjoint-state norm per substep, and accumulates gradients of
position losses with respect to force-field parameters. `finite_diff_grad`
is the independent central-difference oracle; `gradient_check` compares the
two on a desk-scale instance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import mpm
from .errors import ForcelensError, InvariantViolation, SimulationError
from .scene import Scene, Trajectory

DEFAULT_CLIP_THRESHOLD = 1e3


class MemoryBudgetError(ForcelensError):
    """Tape would exceed the configured memory budget."""


@dataclass
class Tape:
    """Recorded rollout: one SubstepRecord per substep, in forward order.

    checkpoint(k) reassembles the state entering substep k (k = n gives the
    final state); replaying substep k from checkpoint k reproduces checkpoint
    k+1 bitwise because the forward pass is deterministic.
    """

    scene: Scene
    field: object
    records: list = dc_field(default_factory=list)
    final_state: tuple | None = None
    frames: int = 0
    mass: np.ndarray | None = None
    volume0: np.ndarray | None = None
    constrained: np.ndarray | None = None
    table: mpm.MaterialTable | None = None

    @property
    def n_substeps(self) -> int:
        return len(self.records)

    @property
    def n_checkpoints(self) -> int:
        return len(self.records) + 1

    def checkpoint(self, k: int) -> tuple:
        if k < self.n_substeps:
            r = self.records[k]
            return (r.x0, r.v0, r.C0, r.D0)
        if k == self.n_substeps:
            return self.final_state
        raise IndexError(f"tape has {self.n_checkpoints} checkpoints, asked for {k}")

    def replay_substep(self, k: int) -> tuple:
        """Re-run substep k from its checkpoint; bitwise equal to checkpoint k+1."""
        r = self.records[k]
        x, v, C, D, _ = mpm.substep_forward(
            r.x0, r.v0, r.C0, r.D0, self.mass, self.volume0, self.constrained,
            self.table, self.scene, self.field, r.t, r.frame, record=False,
        )
        return (x, v, C, D)


def estimate_tape_bytes(n_particles: int, grid_nodes: int, n_substeps: int) -> int:
    """Rough per-record footprint: particle blocks + three grid arrays."""
    per_particle = 8 * (3 * 6 + 9 * 8 + 3 * 2)  # vectors, matrices, spectra
    per_grid = 8 * (1 + 3 + 3 + 3)
    return n_substeps * (n_particles * per_particle + grid_nodes * per_grid)


def rollout_with_tape(
    state: mpm.SimState,
    field,
    scene: Scene,
    frames: int,
    max_tape_bytes: int = 4 << 30,
) -> tuple[Trajectory, Tape]:
    """Roll `frames` frames while recording a replayable tape.

    The recorded trajectory is bitwise identical to an untaped rollout: the
    record path only stores arrays, it never changes the arithmetic.
    """
    need = estimate_tape_bytes(
        len(state.particles), int(np.prod(scene.grid.dims)),
        frames * scene.substeps_per_frame,
    )
    if need > max_tape_bytes:
        raise MemoryBudgetError(
            f"tape needs ~{need} bytes, budget is {max_tape_bytes}"
        )
    st = state.copy()
    p = st.particles
    tape = Tape(
        scene=scene,
        field=field,
        frames=frames,
        mass=p.mass.copy(),
        volume0=p.volume0.copy(),
        constrained=p.constrained.copy(),
        table=mpm.MaterialTable.build(scene.materials, p.material_id),
    )
    positions = [p.x.copy()]
    velocities = [p.v.copy()]
    for _ in range(frames):
        st = mpm.step_frame(st, field, scene, records=tape.records)
        positions.append(st.particles.x.copy())
        velocities.append(st.particles.v.copy())
    tape.final_state = (st.particles.x, st.particles.v, st.C, st.particles.D)
    traj = Trajectory(positions=np.stack(positions), velocities=np.stack(velocities))
    return traj, tape


@dataclass
class GradReport:
    """Backprop output: flat gradient, its norm, and clip statistics."""

    gradient: np.ndarray
    gradient_norm: float
    clip_events: int
    n_substeps: int
    fd_table: list | None = None

    def to_json_dict(self, include_gradient: bool = False) -> dict:
        d = {
            "gradient_norm": self.gradient_norm,
            "clip_events": self.clip_events,
            "n_substeps": self.n_substeps,
        }
        if include_gradient:
            d["gradient"] = self.gradient.tolist()
        if self.fd_table is not None:
            d["fd_table"] = self.fd_table
        return d


def _clip_state(xb, vb, Cb, Db, threshold: float):
    """Rescale the whole adjoint state onto the threshold ball.

    Pure rescaling: the clipped state is a positive scalar multiple of the
    input, so the descent direction is preserved.
    """
    norm = float(np.sqrt((xb**2).sum() + (vb**2).sum() + (Cb**2).sum() + (Db**2).sum()))
    if not np.isfinite(norm):
        raise SimulationError("non-finite adjoint state")
    if norm <= threshold:
        return xb, vb, Cb, Db, 1.0
    s = threshold / norm
    return xb * s, vb * s, Cb * s, Db * s, s


def backprop(
    tape: Tape,
    pos_cotangents: np.ndarray,
    clip_threshold: float = DEFAULT_CLIP_THRESHOLD,
) -> GradReport:
    """Accumulate d(loss)/d(field params) from per-frame position cotangents.

    pos_cotangents has shape (frames+1, N, 3); entry f is d(loss)/d(positions
    at frame boundary f). The adjoint state norm is clipped to clip_threshold
    after each substep (pure rescaling, direction preserved).
    """
    n = len(tape.constrained)
    cot = np.asarray(pos_cotangents, dtype=np.float64)
    if cot.shape != (tape.frames + 1, n, 3):
        raise InvariantViolation(
            f"cotangents shape {cot.shape} != {(tape.frames + 1, n, 3)}"
        )
    if not np.all(np.isfinite(cot)):
        raise InvariantViolation("cotangents contain non-finite values")
    grad = np.zeros(tape.field.n_params)
    xb = np.zeros((n, 3))
    vb = np.zeros((n, 3))
    Cb = np.zeros((n, 3, 3))
    Db = np.zeros((n, 3, 3))
    clip_events = 0
    sub_per_frame = tape.scene.substeps_per_frame
    start_frame = tape.records[0].frame if tape.records else 0
    for r_i in range(len(tape.records) - 1, -1, -1):
        rec = tape.records[r_i]
        if (r_i + 1) % sub_per_frame == 0:
            # this record's output is the tape-relative frame boundary
            xb += cot[rec.frame - start_frame + 1]
        xb, vb, Cb, Db = mpm.substep_backward(
            rec, xb, vb, Cb, Db, tape.mass, tape.volume0, tape.constrained,
            tape.scene, tape.field, grad,
        )
        try:
            xb, vb, Cb, Db, scale = _clip_state(xb, vb, Cb, Db, clip_threshold)
        except SimulationError as exc:
            raise SimulationError(
                f"{exc} at substep {r_i} (frame {rec.frame})"
            ) from exc
        if scale < 1.0:
            clip_events += 1
    if not np.all(np.isfinite(grad)):
        raise SimulationError("non-finite gradient after backprop")
    return GradReport(
        gradient=grad,
        gradient_norm=float(np.linalg.norm(grad)),
        clip_events=clip_events,
        n_substeps=len(tape.records),
    )


def finite_diff_grad(
    state: mpm.SimState,
    field,
    scene: Scene,
    frames: int,
    loss_fn,
    indices,
    eps: float,
    workers: int = 1,
) -> np.ndarray:
    """Central-difference oracle: (loss(p+eps e_i) - loss(p-eps e_i)) / (2 eps).

    `loss_fn(trajectory, field)` maps a rollout (and the field that produced
    it) to a scalar. Independent of the adjoint path: it only ever calls the
    forward rollout. Samples are embarrassingly parallel; with workers > 1
    each worker perturbs its own field clone and results are assembled by
    index, so the output is identical for any worker count.
    """
    if not eps > 0:
        raise InvariantViolation("finite_diff_grad: eps must be > 0")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size > 256:
        raise InvariantViolation("finite_diff_grad: at most 256 indices per call")
    base = field.params()

    def sample(i: int, probe) -> float:
        theta = base.copy()
        theta[i] = base[i] + eps
        probe.set_params(theta)
        up = loss_fn(mpm.rollout(scene, probe, frames, state=state), probe)
        theta[i] = base[i] - eps
        probe.set_params(theta)
        dn = loss_fn(mpm.rollout(scene, probe, frames, state=state), probe)
        return (up - dn) / (2.0 * eps)

    out = np.empty(indices.size)
    if workers <= 1:
        probe = field.clone()
        for k, i in enumerate(indices):
            out[k] = sample(int(i), probe)
        return out
    from concurrent.futures import ThreadPoolExecutor

    probes = [field.clone() for _ in range(workers)]

    def run_chunk(w: int) -> list:
        return [(k, sample(int(indices[k]), probes[w])) for k in range(w, indices.size, workers)]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for chunk in pool.map(run_chunk, range(workers)):
            for k, v in chunk:
                out[k] = v
    return out


# --------------------------------------------------------------------------
# Gradient check harness
# --------------------------------------------------------------------------


@dataclass
class GradCheckConfig:
    particles_per_axis: int = 3
    grid_dims: int = 8
    frames: int = 3
    resolution: int = 4
    features: int = 2
    n_indices: int = 128
    eps: float = 1e-5
    rel_tol: float = 1e-3
    pass_fraction: float = 0.95
    seed: int = 0
    workers: int = 1
    corrupt_sign: bool = False  # test hook: flips one analytic entry

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "GradCheckConfig":
        return GradCheckConfig(**{k: v for k, v in d.items()})


def _gradcheck_scene(cfg: GradCheckConfig) -> Scene:
    from .scene import Camera, GridSpec, MaterialParams, Plasticity, sample_block

    if cfg.particles_per_axis**3 > 64 or cfg.grid_dims > 8 or cfg.frames > 5:
        raise InvariantViolation("gradient_check: config exceeds the desk-scale bounds")
    h = 0.05
    dims = (cfg.grid_dims,) * 3
    grid = GridSpec(origin=np.zeros(3), cell_size=h, dims=dims)
    mat = MaterialParams(
        name="gradcheck-soft", rho=1000.0, youngs_modulus=5e3,
        poisson_ratio=0.3, plasticity=Plasticity(),
    )
    side = cfg.particles_per_axis * 0.5 * h
    particles = sample_block(mat, center=np.full(3, grid.upper[0] / 2),
                             extent=np.full(3, side), spacing=0.5 * h)
    cam = Camera(fx=500.0, fy=500.0, cx=64.0, cy=64.0, rotation=np.eye(3),
                 translation=np.array([0.0, 0.0, 1.0]), width=128, height=128)
    return Scene(particles=particles, materials=[mat], grid=grid, camera=cam,
                 bcs=[], frame_dt=1.0 / 30.0, substeps_per_frame=16)


@dataclass
class GradCheckReport:
    passed: bool
    fraction_ok: float
    worst_rel_err: float
    n_checked: int
    entries: list
    runtime_s: float
    vacuous: bool = False

    def to_json_dict(self, include_timings: bool = False) -> dict:
        """Timings are excluded by default so reports stay byte-identical
        across thread counts and repeated runs."""
        d = {
            "passed": bool(self.passed),
            "fraction_ok": self.fraction_ok,
            "worst_rel_err": self.worst_rel_err,
            "n_checked": self.n_checked,
            "vacuous": self.vacuous,
            "entries": self.entries,
        }
        if include_timings:
            d["runtime_s"] = self.runtime_s
        return d


def gradient_check(cfg: GradCheckConfig | None = None) -> GradCheckReport:
    """Compare backprop against the finite-difference oracle on a small scene."""
    from . import forcefield as ff
    from .utils import single_threaded_blas

    cfg = cfg or GradCheckConfig()
    t_start = time.perf_counter()
    with single_threaded_blas():
        return _gradient_check_inner(cfg, t_start)


def _gradient_check_inner(cfg: GradCheckConfig, t_start: float) -> GradCheckReport:
    from . import forcefield as ff
    scene = _gradcheck_scene(cfg)
    rng = np.random.default_rng(cfg.seed)

    field = ff.make_field(
        "triplane", scene.grid, len(scene.particles), cfg.frames, scene.frame_dt,
        seed=cfg.seed, resolution=cfg.resolution, features=cfg.features,
        dec_hidden=(16,), enc_hidden=8, n_freqs=2,
    )
    for k in range(cfg.frames):
        field.warm_start(k)
    # roughen all parameters so the loss is generic in every coordinate
    field.set_params(field.params() + 0.05 * rng.standard_normal(field.n_params))

    # independent targets: rollout under a small analytic field
    from .scene import GroundTruthFieldSpec

    gt = ff.AnalyticField(
        GroundTruthFieldSpec(kind="constant", a=np.array([0.4, -0.2, 0.3])),
        scene.frame_dt,
    )
    state0 = mpm.SimState.from_scene(scene)
    targets = mpm.rollout(scene, gt, cfg.frames, state=state0).positions

    def loss_fn(traj: Trajectory, _field=None) -> float:
        total = 0.0
        for f in range(1, cfg.frames + 1):
            d = np.linalg.norm(traj.positions[f] - targets[f], axis=1)
            total += float(d.mean())
        return total

    traj, tape = rollout_with_tape(state0, field, scene, cfg.frames)
    cot = np.zeros_like(traj.positions)
    n = traj.positions.shape[1]
    for f in range(1, cfg.frames + 1):
        diff = traj.positions[f] - targets[f]
        norms = np.maximum(np.linalg.norm(diff, axis=1), 1e-30)
        cot[f] = diff / (n * norms[:, None])
    report = backprop(tape, cot)

    if cfg.n_indices == 0:
        return GradCheckReport(
            passed=True, fraction_ok=1.0, worst_rel_err=0.0, n_checked=0,
            entries=[], runtime_s=time.perf_counter() - t_start, vacuous=True,
        )
    indices = rng.choice(field.n_params, size=min(cfg.n_indices, field.n_params), replace=False)
    fd = finite_diff_grad(state0, field, scene, cfg.frames, loss_fn, indices, cfg.eps, workers=cfg.workers)
    ana = report.gradient[indices].copy()
    if cfg.corrupt_sign:
        ana = -ana

    atol = 1e-10 * max(1.0, float(np.abs(fd).max(initial=0.0)))
    entries = []
    ok = 0
    worst = 0.0
    for j, i in enumerate(indices):
        denom = max(abs(ana[j]), abs(fd[j]))
        rel = 0.0 if denom <= atol else abs(ana[j] - fd[j]) / denom
        good = rel <= cfg.rel_tol
        ok += good
        worst = max(worst, rel)
        entries.append(
            {"index": int(i), "analytic": float(ana[j]), "fd": float(fd[j]),
             "rel_err": float(rel), "ok": bool(good)}
        )
    frac = ok / len(indices)
    return GradCheckReport(
        passed=frac >= cfg.pass_fraction,
        fraction_ok=float(frac),
        worst_rel_err=float(worst),
        n_checked=len(indices),
        entries=entries,
        runtime_s=time.perf_counter() - t_start,
    )
