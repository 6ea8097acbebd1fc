"""Inverse solver: assembles the motion + spatial TV + temporal smoothness
loss, and optimizes force-field parameters frame by frame with warm starting,
Adam, adjoint gradients, per-substep clipping, and best-iterate return.

The committed state advances by re-simulating each accepted frame, so the
physics stays self-consistent; targets never overwrite simulation state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import forcefield as ff
from . import mpm
from .adjoint import backprop, rollout_with_tape
from .errors import InvariantViolation
from .scene import Scene, Trajectory
from .utils import single_threaded_blas


@dataclass
class RecoveryConfig:
    lambda_space: float = 1e-3  # spatial total-variation weight
    lambda_time: float = 1e-2  # temporal encoder-smoothness weight
    iterations: int = 300
    learning_rate: float = 1e-2
    # Adam's normalized steps put a noise floor on the field value at the lr
    # scale, so the rate anneals exponentially to lr_end over the budget
    lr_end: float = 1e-4
    # tri-plane shared parameters (planes + decoder) learn slower than the
    # per-frame encoder snapshots, and their rate decays further with each
    # frame; otherwise every frame rewrites the shared state with its own
    # magnitude and the final field forgets the time profile the snapshots
    # carry (later frames would retroactively corrupt earlier ones)
    lr_shared_scale: float = 0.1
    shared_frame_decay: float = 0.65
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_threshold: float = 1e3
    # relative best-loss improvement per window; 0 disables early stopping
    # so the full annealed budget always runs (reproducible iteration counts)
    convergence_tol: float = 0.0
    window: int = 10
    divergence_factor: float = 10.0
    max_divergent_frames: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lambda_space < 0 or self.lambda_time < 0:
            raise InvariantViolation("recovery: regularizer weights must be >= 0")
        if self.iterations < 1:
            raise InvariantViolation("recovery: iterations must be >= 1")
        if not self.learning_rate > 0:
            raise InvariantViolation("recovery: learning rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RecoveryConfig":
        return RecoveryConfig(**d)


class Adam:
    """Adam over a fixed active index set; fresh moments per frame."""

    def __init__(self, n: int, lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def motion_loss(sim_positions: np.ndarray, targets: np.ndarray) -> float:
    """Mean over particles of the L2 distance to the target positions (m)."""
    if sim_positions.shape != targets.shape:
        raise InvariantViolation(
            f"motion_loss: shape mismatch {sim_positions.shape} vs {targets.shape}"
        )
    return float(np.linalg.norm(sim_positions - targets, axis=1).mean())


def motion_loss_grad(sim_positions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    d = sim_positions - targets
    norms = np.maximum(np.linalg.norm(d, axis=1), 1e-30)
    return d / (sim_positions.shape[0] * norms[:, None])


def total_loss(
    field, sim_positions: np.ndarray, targets: np.ndarray, frame: int, config: RecoveryConfig
) -> tuple[float, dict]:
    """Motion + lambda_space * TV + lambda_time * encoder smoothness.

    TV is skipped (zero, flagged) for representations without spatial planes.
    """
    motion = motion_loss(sim_positions, targets)
    tv_applicable = field.kind in ("triplane", "kplanes")
    tv = ff.tv_loss(field) if tv_applicable else 0.0
    ts = ff.time_smooth_loss(field, frame)
    total = motion + config.lambda_space * tv + config.lambda_time * ts
    components = {
        "motion": motion,
        "tv": tv,
        "time_smooth": ts,
        "total": total,
        "tv_skipped": not tv_applicable,
    }
    return total, components


@dataclass
class FrameReport:
    frame: int
    iterations_run: int
    best_iteration: int
    best_total: float
    initial_total: float
    motion_curve: list
    tv_curve: list
    time_curve: list
    total_curve: list
    clip_events: int
    diverged: bool
    wall_time_s: float

    def to_json_dict(self, include_timings: bool = False) -> dict:
        d = {
            "frame": self.frame,
            "iterations_run": self.iterations_run,
            "best_iteration": self.best_iteration,
            "best_total": self.best_total,
            "initial_total": self.initial_total,
            "motion_curve": self.motion_curve,
            "tv_curve": self.tv_curve,
            "time_curve": self.time_curve,
            "total_curve": self.total_curve,
            "clip_events": self.clip_events,
            "diverged": self.diverged,
        }
        if include_timings:
            d["wall_time_s"] = self.wall_time_s
        return d


def recover_frame(
    state: mpm.SimState,
    field,
    targets_next: np.ndarray,
    scene: Scene,
    config: RecoveryConfig,
    frame: int,
) -> FrameReport:
    """Optimize the field so one simulated frame from `state` lands on the
    targets; the field is left at its best-iterate parameters."""
    if config.iterations < 1:
        raise InvariantViolation("recover_frame: iterations must be >= 1")
    t0 = time.perf_counter()
    active = field.active_indices(frame)
    step_scale = np.ones(active.size)
    if field.kind == "triplane":
        shared = field._n_planes + field._n_dec
        step_scale[:shared] = config.lr_shared_scale * config.shared_frame_decay**frame
    opt = Adam(
        active.size, config.learning_rate, config.adam_beta1, config.adam_beta2,
        config.adam_eps,
    )
    lr_decay = (config.lr_end / config.learning_rate) ** (1.0 / max(config.iterations - 1, 1))
    best_total = np.inf
    best_params = field.params()
    best_iter = 0
    best_history: list[float] = []
    curves = {"motion": [], "tv": [], "time_smooth": [], "total": []}
    recent: list[float] = []
    initial_total = None
    clip_events = 0
    diverged = False
    it = 0
    for it in range(config.iterations):
        traj, tape = rollout_with_tape(state, field, scene, 1)
        total, comp = total_loss(field, traj.positions[1], targets_next, frame, config)
        for key in ("motion", "tv", "time_smooth", "total"):
            curves[key].append(comp[key])
        if initial_total is None:
            initial_total = total
        if total < best_total:
            best_total = total
            best_params = field.params()
            best_iter = it
        best_history.append(best_total)
        recent.append(total)
        if len(recent) > config.window:
            recent.pop(0)
        # divergence = sustained runaway: even the best recent iterate sits
        # above divergence_factor x the initial loss (a single exploratory
        # spike is normal for Adam and is absorbed by best-iterate return)
        if len(recent) == config.window and min(recent) > config.divergence_factor * max(
            initial_total, 1e-30
        ):
            diverged = True
            break
        if config.convergence_tol > 0 and it >= 2 * config.window:
            prev = best_history[it - config.window]
            if (prev - best_total) / max(prev, 1e-30) < config.convergence_tol:
                break
        cot = np.zeros_like(traj.positions)
        cot[1] = motion_loss_grad(traj.positions[1], targets_next)
        rep = backprop(tape, cot, clip_threshold=config.clip_threshold)
        grad = rep.gradient
        clip_events += rep.clip_events
        if field.kind in ("triplane", "kplanes") and config.lambda_space > 0:
            ff.tv_loss_grad(field, grad, weight=config.lambda_space)
        if config.lambda_time > 0:
            ff.time_smooth_grad(field, frame, grad, weight=config.lambda_time)
        delta = np.zeros(field.n_params)
        delta[active] = step_scale * opt.step(grad[active])
        field.add_to_params(delta)
        opt.lr *= lr_decay
    field.set_params(best_params)
    return FrameReport(
        frame=frame,
        iterations_run=it + 1,
        best_iteration=best_iter,
        best_total=float(best_total),
        initial_total=float(initial_total),
        motion_curve=curves["motion"],
        tv_curve=curves["tv"],
        time_curve=curves["time_smooth"],
        total_curve=curves["total"],
        clip_events=clip_events,
        diverged=diverged,
        wall_time_s=time.perf_counter() - t0,
    )


@dataclass
class RecoveryReport:
    representation: str
    config: RecoveryConfig
    frame_reports: list
    aborted_at_frame: int | None
    wall_time_s: float
    committed: Trajectory | None = None  # in-progress committed states (not serialized)

    @property
    def any_divergence(self) -> bool:
        return any(r.diverged for r in self.frame_reports)

    def to_json_dict(self, include_timings: bool = False) -> dict:
        return {
            "representation": self.representation,
            "config": self.config.to_dict(),
            "frames": [r.to_json_dict(include_timings) for r in self.frame_reports],
            "aborted_at_frame": self.aborted_at_frame,
            "any_divergence": self.any_divergence,
            **({"wall_time_s": self.wall_time_s} if include_timings else {}),
        }


def recover_sequence(
    scene: Scene,
    targets: np.ndarray,
    representation: str | object,
    config: RecoveryConfig | None = None,
) -> tuple[object, RecoveryReport]:
    """Sequential per-frame recovery over a whole target sequence.

    `targets` has shape (frames+1, N, 3); entry k is the wanted particle
    positions at frame boundary k (entry 0 is unused except for shape). Each
    frame: warm start, optimize, then commit by re-simulating with the
    accepted field. Aborts after `max_divergent_frames` consecutive divergent
    frames. The alternative of committing target state instead of simulated
    state was rejected: it breaks physical self-consistency between frames.
    """
    cfg = config or RecoveryConfig()
    targets = np.asarray(targets, dtype=np.float64)
    n = len(scene.particles)
    if targets.ndim != 3 or targets.shape[1] != n or targets.shape[2] != 3:
        raise InvariantViolation(
            f"recover_sequence: targets shape {targets.shape} incompatible with scene"
        )
    frames = targets.shape[0] - 1
    if frames < 1:
        raise InvariantViolation("recover_sequence: need at least one frame of targets")
    if isinstance(representation, str):
        field = ff.make_field(
            representation, scene.grid, n, frames, scene.frame_dt, seed=cfg.seed
        )
    else:
        field = representation
    t0 = time.perf_counter()
    reports: list[FrameReport] = []
    aborted = None
    with single_threaded_blas():
        state = mpm.SimState.from_scene(scene)
        positions = [state.particles.x.copy()]
        velocities = [state.particles.v.copy()]
        streak = 0
        for k in range(frames):
            field.warm_start(k)
            rep = recover_frame(state, field, targets[k + 1], scene, cfg, k)
            reports.append(rep)
            if rep.diverged:
                streak += 1
                if streak >= cfg.max_divergent_frames:
                    aborted = k
                    break
            else:
                streak = 0
            state = mpm.step_frame(state, field, scene)
            positions.append(state.particles.x.copy())
            velocities.append(state.particles.v.copy())
    committed = Trajectory(positions=np.stack(positions), velocities=np.stack(velocities))
    return field, RecoveryReport(
        representation=getattr(field, "kind", "custom"),
        config=cfg,
        frame_reports=reports,
        aborted_at_frame=aborted,
        wall_time_s=time.perf_counter() - t0,
        committed=committed,
    )


def make_noisy_dense_targets(
    trajectory: Trajectory, noise_frac: float, seed: int = 0
) -> np.ndarray:
    """Dense per-particle targets corrupted with motion-scaled Gaussian noise.

    Emulates noisy dense 3D flow supervision: per frame, the noise std is
    noise_frac times that frame's mean displacement magnitude. Frame 0 is
    left exact.
    """
    if noise_frac < 0:
        raise InvariantViolation("make_noisy_dense_targets: noise_frac must be >= 0")
    rng = np.random.default_rng(seed)
    targets = trajectory.positions.copy()
    for k in range(1, targets.shape[0]):
        step = np.linalg.norm(
            trajectory.positions[k] - trajectory.positions[k - 1], axis=1
        ).mean()
        targets[k] += noise_frac * step * rng.standard_normal(targets[k].shape)
    return targets
