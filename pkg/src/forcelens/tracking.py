"""Sparse-track front end: synthetic 2D tracks, keypoint unprojection, lifting
of pixel tracks to 3D with a reprojection + as-rigid-as-possible objective,
and barycentric binding of dense particles to sparse keypoints.

The synthetic track generator stands in for a learned point tracker and depth
model: it projects true keypoint trajectories, optionally adds seeded pixel
noise, and supplies (optionally noisy) true first-frame depths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DivergenceError, InvariantViolation, ProjectionError, SceneParseError
from .scene import Camera, Trajectory


# --------------------------------------------------------------------------
# Pinhole projection
# --------------------------------------------------------------------------


def project(camera: Camera, P) -> np.ndarray:
    """World points (...,3) to pixels (...,2); requires positive camera depth."""
    P = np.asarray(P, dtype=np.float64)
    single = P.ndim == 1
    Pc = P.reshape(-1, 3) @ camera.rotation.T + camera.translation
    z = Pc[:, 2]
    if np.any(z <= 0):
        bad = int(np.argmin(z))
        raise ProjectionError(f"point {bad} behind camera (depth {z[bad]:.3g})")
    px = np.stack(
        [camera.fx * Pc[:, 0] / z + camera.cx, camera.fy * Pc[:, 1] / z + camera.cy],
        axis=1,
    )
    return px[0] if single else px.reshape(P.shape[:-1] + (2,))


def unproject(camera: Camera, p, d) -> np.ndarray:
    """Pixels (...,2) with camera-frame depths d to world points (...,3)."""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    single = p.ndim == 1
    p2 = p.reshape(-1, 2)
    d1 = d.reshape(-1)
    if np.any(d1 <= 0):
        raise ProjectionError("unproject: depths must be > 0")
    Pc = np.stack(
        [(p2[:, 0] - camera.cx) / camera.fx * d1, (p2[:, 1] - camera.cy) / camera.fy * d1, d1],
        axis=1,
    )
    Pw = (Pc - camera.translation) @ camera.rotation
    return Pw[0] if single else Pw.reshape(p.shape[:-1] + (3,))


def camera_depth(camera: Camera, P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    return (P @ camera.rotation.T + camera.translation)[:, 2]


def _projection_jacobian(camera: Camera, P: np.ndarray) -> np.ndarray:
    """d(pixel)/d(world point), shape (N,2,3)."""
    Pc = P @ camera.rotation.T + camera.translation
    x, y, z = Pc[:, 0], Pc[:, 1], Pc[:, 2]
    Jc = np.zeros((P.shape[0], 2, 3))
    Jc[:, 0, 0] = camera.fx / z
    Jc[:, 0, 2] = -camera.fx * x / z**2
    Jc[:, 1, 1] = camera.fy / z
    Jc[:, 1, 2] = -camera.fy * y / z**2
    return Jc @ camera.rotation


# --------------------------------------------------------------------------
# Track sets
# --------------------------------------------------------------------------


@dataclass
class TrackSet:
    """Pixel keypoint tracks with visibility, first-frame depths, and (once
    lifted) the 3D keypoint trajectory."""

    pixels: np.ndarray  # (N,T,2)
    visibility: np.ndarray  # (N,T) bool
    depths0: np.ndarray  # (N,)
    lifted: np.ndarray | None = None  # (N,T,3)

    @property
    def n_keypoints(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[1]


def synth_tracks(
    trajectory: Trajectory,
    camera: Camera,
    keypoint_indices,
    pixel_noise: float = 0.0,
    seed: int = 0,
    depth_noise: float = 0.0,
) -> TrackSet:
    """Project true keypoint trajectories into seeded noisy pixel tracks.

    Occlusion is out of scope: every observation is marked visible. depths0
    are true frame-0 camera depths times (1 + depth_noise * standard normal).
    """
    if pixel_noise < 0:
        raise InvariantViolation("synth_tracks: pixel noise must be >= 0")
    idx = np.asarray(keypoint_indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= trajectory.n_particles:
        raise InvariantViolation("synth_tracks: keypoint indices out of range")
    rng = np.random.default_rng(seed)
    pts = trajectory.positions[:, idx, :]  # (T, N, 3)
    pix = project(camera, pts.reshape(-1, 3)).reshape(pts.shape[0], idx.size, 2)
    pix = np.transpose(pix, (1, 0, 2)).copy()  # (N, T, 2)
    if pixel_noise > 0:
        pix += pixel_noise * rng.standard_normal(pix.shape)
    d0 = camera_depth(camera, trajectory.positions[0, idx, :])
    if depth_noise > 0:
        d0 = d0 * (1.0 + depth_noise * rng.standard_normal(d0.shape))
    vis = np.ones(pix.shape[:2], dtype=bool)
    return TrackSet(pixels=pix, visibility=vis, depths0=d0)


# --------------------------------------------------------------------------
# ARAP lifting
# --------------------------------------------------------------------------


def knn_edges(P0: np.ndarray, k: int = 6) -> np.ndarray:
    """Symmetric k-nearest-neighbor edge list (E,2) with i < j, built once on
    the frame-0 keypoints (the "object skeleton")."""
    n = P0.shape[0]
    if n < 2:
        raise InvariantViolation("knn_edges: need at least 2 keypoints")
    d = np.linalg.norm(P0[:, None, :] - P0[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    kk = min(k, n - 1)
    edges = set()
    order = np.argsort(d, axis=1, kind="stable")
    for i in range(n):
        for j in order[i, :kk]:
            a, b = (i, int(j)) if i < j else (int(j), i)
            edges.add((a, b))
    return np.array(sorted(edges), dtype=np.int64)


def arap_loss(P_prev: np.ndarray, P_next: np.ndarray, edges: np.ndarray) -> float:
    """Sum over edges of the L2 change in the edge vector between frames."""
    if edges.size == 0:
        raise InvariantViolation("arap_loss: edge set is empty")
    d_next = P_next[edges[:, 0]] - P_next[edges[:, 1]]
    d_prev = P_prev[edges[:, 0]] - P_prev[edges[:, 1]]
    return float(np.linalg.norm(d_next - d_prev, axis=1).sum())


def _arap_grad(P_prev, P_next, edges, eps: float) -> np.ndarray:
    d = (P_next[edges[:, 0]] - P_next[edges[:, 1]]) - (
        P_prev[edges[:, 0]] - P_prev[edges[:, 1]]
    )
    norms = np.sqrt((d**2).sum(axis=1) + eps**2)
    unit = d / norms[:, None]
    g = np.zeros_like(P_next)
    np.add.at(g, edges[:, 0], unit)
    np.add.at(g, edges[:, 1], -unit)
    return g


@dataclass
class LiftConfig:
    """Gradient-descent-with-momentum solver settings for track lifting.

    The objective is a sum of (smoothed) norms, so a fixed step oscillates
    near the optimum; on any loss increase the step size decays and momentum
    restarts. Divergence is declared only when the best loss stops improving
    for `patience` iterations anyway.
    """

    lr: float = 2e-4
    momentum: float = 0.95
    iterations: int = 6000
    tol: float = 1e-10  # rms step size, meters
    patience: int = 200
    smooth_eps: float = 2e-3  # Huber-style smoothing scale, meters
    decay: float = 0.5
    grow: float = 1.2
    min_lr_factor: float = 1e-5
    max_lr_factor: float = 100.0


def lift_tracks(
    P_prev: np.ndarray,
    pixels_next: np.ndarray,
    visible_next: np.ndarray,
    camera: Camera,
    edges: np.ndarray,
    lam: float = 1.0,
    config: LiftConfig | None = None,
) -> np.ndarray:
    """Solve for the next-frame 3D keypoints from their 2D observations.

    Minimizes sum of visible reprojection residual norms (normalized by focal
    length so the units reconcile with meters) plus lam * arap_loss, by
    momentum gradient descent from the previous keypoints. Raises
    DivergenceError when the loss keeps increasing for `patience` iterations.
    """
    cfg = config or LiftConfig()
    fbar = 0.5 * (camera.fx + camera.fy)
    eps = cfg.smooth_eps

    def loss_and_grad(P):
        pix = project(camera, P)
        r = pix - pixels_next
        rn = np.sqrt((r**2).sum(axis=1) + (eps * fbar) ** 2)
        track = float((rn[visible_next] / fbar).sum())
        J = _projection_jacobian(camera, P)
        gtrack = np.einsum("na,nab->nb", r / rn[:, None], J) / fbar
        gtrack[~visible_next] = 0.0
        d = (P[edges[:, 0]] - P[edges[:, 1]]) - (P_prev[edges[:, 0]] - P_prev[edges[:, 1]])
        dn = np.sqrt((d**2).sum(axis=1) + eps**2)
        arap = float(dn.sum() - eps * len(edges))
        g = gtrack + lam * _arap_grad(P_prev, P, edges, eps)
        return track + lam * arap, g

    P = P_prev.copy()
    vel = np.zeros_like(P)
    best = np.inf
    rises = 0
    lr = cfg.lr
    prev_loss = np.inf
    for it in range(cfg.iterations):
        loss, g = loss_and_grad(P)
        if loss > prev_loss:
            # overshoot: shrink the step and restart momentum
            lr = max(lr * cfg.decay, cfg.lr * cfg.min_lr_factor)
            vel[:] = 0.0
        else:
            # gradient magnitudes are distance-independent for norm losses,
            # so the step size must grow to cover large frame motions
            lr = min(lr * cfg.grow, cfg.lr * cfg.max_lr_factor)
        prev_loss = loss
        if loss < best:
            best = loss
            rises = 0
        else:
            rises += 1
            if rises >= cfg.patience:
                raise DivergenceError(
                    f"lift_tracks diverged: loss {loss:.3e} above best {best:.3e} "
                    f"for {rises} iterations (iteration {it})"
                )
        vel = cfg.momentum * vel - lr * g
        P = P + vel
        if np.sqrt((vel**2).mean()) < cfg.tol:
            break
    return P


def lift_sequence(
    tracks: TrackSet,
    camera: Camera,
    lam: float = 1.0,
    config: LiftConfig | None = None,
    knn_k: int = 6,
) -> TrackSet:
    """Unproject frame 0 and lift every subsequent frame sequentially."""
    n, T = tracks.n_keypoints, tracks.n_frames
    if n < 4:
        raise InvariantViolation("lift_sequence: need >= 4 keypoints")
    P0 = unproject(camera, tracks.pixels[:, 0, :], tracks.depths0)
    centered = P0 - P0.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[2] < 1e-9 * max(svals[0], 1e-12):
        raise InvariantViolation("lift_sequence: keypoints are coplanar")
    edges = knn_edges(P0, k=knn_k)
    lifted = np.zeros((n, T, 3))
    lifted[:, 0, :] = P0
    for t in range(1, T):
        lifted[:, t, :] = lift_tracks(
            lifted[:, t - 1, :], tracks.pixels[:, t, :], tracks.visibility[:, t],
            camera, edges, lam=lam, config=config,
        )
    tracks.lifted = lifted
    return tracks


# --------------------------------------------------------------------------
# Barycentric binding
# --------------------------------------------------------------------------


@dataclass
class BarycentricBinding:
    """Frozen frame-0 weights tying each dense particle to 3 keypoints."""

    indices: np.ndarray  # (M,3) int
    weights: np.ndarray  # (M,3), rows sum to 1 exactly

    @property
    def n_particles(self) -> int:
        return self.indices.shape[0]


def bind_barycentric(particle_x: np.ndarray, P0: np.ndarray) -> BarycentricBinding:
    """Least-squares weights over the 3 nearest keypoints with sum = 1.

    Collinear triples (or coincident keypoints) fall back to inverse-distance
    weights. Rows are renormalized so they sum to 1 exactly.
    """
    if P0.shape[0] < 3:
        raise InvariantViolation("bind_barycentric: need at least 3 keypoints")
    m = particle_x.shape[0]
    d = np.linalg.norm(particle_x[:, None, :] - P0[None, :, :], axis=2)
    order = np.argsort(d, axis=1, kind="stable")[:, :3]  # ties break by index
    indices = order.astype(np.int64)
    weights = np.zeros((m, 3))
    Pi = P0[indices[:, 0]]
    Pj = P0[indices[:, 1]]
    Pk = P0[indices[:, 2]]
    # reduce sum-to-one constraint: alpha_k = 1 - alpha_i - alpha_j
    A1 = Pi - Pk
    A2 = Pj - Pk
    b = particle_x - Pk
    g11 = (A1 * A1).sum(axis=1)
    g12 = (A1 * A2).sum(axis=1)
    g22 = (A2 * A2).sum(axis=1)
    r1 = (A1 * b).sum(axis=1)
    r2 = (A2 * b).sum(axis=1)
    det = g11 * g22 - g12 * g12
    scale = np.maximum(g11 * g22, 1e-300)
    good = det > 1e-10 * scale
    ai = np.where(good, (g22 * r1 - g12 * r2) / np.where(good, det, 1.0), 0.0)
    aj = np.where(good, (g11 * r2 - g12 * r1) / np.where(good, det, 1.0), 0.0)
    weights[:, 0] = ai
    weights[:, 1] = aj
    weights[:, 2] = 1.0 - ai - aj
    if np.any(~good):
        # collinear fallback: inverse-distance weights, normalized
        bad = np.nonzero(~good)[0]
        dd = np.maximum(d[bad[:, None], indices[bad]], 1e-12)
        w = 1.0 / dd
        w = w / w.sum(axis=1, keepdims=True)
        w[:, 2] = 1.0 - w[:, 0] - w[:, 1]
        weights[bad] = w
    if not np.all(np.isfinite(weights)):
        raise InvariantViolation("bind_barycentric: non-finite weights")
    return BarycentricBinding(indices=indices, weights=weights)


def interpolate_targets(binding: BarycentricBinding, P_t: np.ndarray) -> np.ndarray:
    """Per-particle target positions from keypoints at one frame."""
    return np.einsum("mk,mkc->mc", binding.weights, P_t[binding.indices])


# --------------------------------------------------------------------------
# End-to-end target construction
# --------------------------------------------------------------------------


@dataclass
class TargetInfo:
    frame0_residual_rms: float
    frame0_residual_max: float
    n_keypoints: int
    edges: int


def build_targets(
    trajectory: Trajectory,
    camera: Camera,
    keypoint_indices,
    pixel_noise: float = 0.0,
    seed: int = 0,
    depth_noise: float = 0.0,
    lam: float = 1.0,
    lift_config: LiftConfig | None = None,
    knn_k: int = 6,
) -> tuple[np.ndarray, TrackSet, BarycentricBinding, TargetInfo]:
    """Tracks -> lifted keypoints -> binding -> per-frame particle targets.

    Returns targets of shape (frames+1, M, 3). The frame-0 reconstruction
    residual (barycentric fit error) is reported, not hidden.
    """
    tracks = synth_tracks(
        trajectory, camera, keypoint_indices,
        pixel_noise=pixel_noise, seed=seed, depth_noise=depth_noise,
    )
    lift_sequence(tracks, camera, lam=lam, config=lift_config, knn_k=knn_k)
    binding = bind_barycentric(trajectory.positions[0], tracks.lifted[:, 0, :])
    T = tracks.n_frames
    targets = np.stack(
        [interpolate_targets(binding, tracks.lifted[:, t, :]) for t in range(T)]
    )
    res0 = np.linalg.norm(targets[0] - trajectory.positions[0], axis=1)
    info = TargetInfo(
        frame0_residual_rms=float(np.sqrt((res0**2).mean())),
        frame0_residual_max=float(res0.max()),
        n_keypoints=tracks.n_keypoints,
        edges=len(knn_edges(tracks.lifted[:, 0, :], k=knn_k)),
    )
    return targets, tracks, binding, info


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def save_tracks(tracks: TrackSet, camera: Camera, path) -> None:
    doc = {
        "N": tracks.n_keypoints,
        "T": tracks.n_frames,
        "camera": camera.to_dict(),
        "tracks": tracks.pixels.ravel().tolist(),
        "visibility": tracks.visibility.astype(int).ravel().tolist(),
        "depths0": tracks.depths0.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def load_tracks(path) -> tuple[TrackSet, Camera]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        n, T = int(doc["N"]), int(doc["T"])
        tracks = TrackSet(
            pixels=np.asarray(doc["tracks"], dtype=np.float64).reshape(n, T, 2),
            visibility=np.asarray(doc["visibility"], dtype=np.int64).reshape(n, T).astype(bool),
            depths0=np.asarray(doc["depths0"], dtype=np.float64),
        )
        return tracks, Camera.from_dict(doc["camera"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise SceneParseError(f"{path}: {exc}") from exc


def save_targets(targets: np.ndarray, path) -> None:
    """JSON-lines, one record per frame: {frame, targets}."""
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(targets.shape[0]):
            fh.write(json.dumps({"frame": k, "targets": targets[k].ravel().tolist()}))
            fh.write("\n")


def load_targets(path) -> np.ndarray:
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                rows.append(np.asarray(rec["targets"], dtype=np.float64).reshape(-1, 3))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise SceneParseError(f"{path}: {exc}") from exc
    if not rows:
        raise SceneParseError(f"{path}: empty targets file")
    return np.stack(rows)
