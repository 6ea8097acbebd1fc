"""Time-varying 3D specific-force fields (N/kg).

Three optimizable representations share one interface: a causal tri-plane
(three spatial feature planes + per-frame time-encoder MLP warm-started from
the previous frame + shared decoder), a K-planes baseline (six space/space-time
planes fused by elementwise product), and a per-particle per-frame point-force
table. `AnalyticField` wraps a ground-truth spec for synthesis.

The shared interface used by the simulator and optimizer:
  query_batch(xs, t, frame, indices=None) -> (N,3)
  query_vjp(xs, t, frame, fbar, grad_out, indices=None) -> d/dx or None
  params() / set_params(v) / add_to_params(delta) / active_indices(frame)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .errors import FieldError, QueryError, ShapeMismatchError
from .scene import GridSpec, GroundTruthFieldSpec

_PLANE_AXES_SPATIAL = ((0, 1), (1, 2), (0, 2))  # xy, yz, xz


# --------------------------------------------------------------------------
# Small MLP helpers (list of (W, b) layers, tanh hidden, linear output)
# --------------------------------------------------------------------------


def _mlp_init(sizes, rng, last_zero=False, scale=1.0):
    layers = []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        if last_zero and i == len(sizes) - 2:
            W = np.zeros((fan_in, sizes[i + 1]))
        else:
            W = rng.standard_normal((fan_in, sizes[i + 1])) * (scale / np.sqrt(fan_in))
        layers.append((W, np.zeros(sizes[i + 1])))
    return layers


def _mlp_forward(layers, x):
    """Returns (output, cache of pre-activation inputs per layer)."""
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def _mlp_vjp(layers, acts, ybar):
    """Backprop through _mlp_forward; returns (param grads, input cotangent)."""
    grads = []
    g = ybar
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        a_in = acts[i]
        if i < len(layers) - 1:
            # acts[i+1] stores tanh output for hidden layers
            g = g * (1.0 - acts[i + 1] ** 2)
        gW = a_in.T @ g
        gb = g.sum(axis=0)
        grads.append((gW, gb))
        g = g @ W.T
    grads.reverse()
    return grads, g


def _flatten_layers(layers):
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def _layer_sizes(layers):
    return sum(W.size + b.size for W, b in layers)


def _unflatten_layers(vec, template):
    out, ofs = [], 0
    for W, b in template:
        w = vec[ofs : ofs + W.size].reshape(W.shape)
        ofs += W.size
        bb = vec[ofs : ofs + b.size]
        ofs += b.size
        out.append((w.copy(), bb.copy()))
    return out


# --------------------------------------------------------------------------
# Bilinear plane sampling
# --------------------------------------------------------------------------


def _plane_sample(plane, u, v):
    """Bilinear sample of (R,R,F) at normalized coords in [0,1].

    Texel centers sit on the integer lattice 0..R-1, so interpolation at a
    texel center returns the stored value exactly. Returns features plus the
    tap bookkeeping needed by the VJP.
    """
    R = plane.shape[0]
    su = np.clip(u, 0.0, 1.0) * (R - 1)
    sv = np.clip(v, 0.0, 1.0) * (R - 1)
    i0 = np.minimum(su.astype(np.int64), R - 2)
    j0 = np.minimum(sv.astype(np.int64), R - 2)
    fu = su - i0
    fv = sv - j0
    f00 = plane[i0, j0]
    f10 = plane[i0 + 1, j0]
    f01 = plane[i0, j0 + 1]
    f11 = plane[i0 + 1, j0 + 1]
    feat = (
        (1 - fu)[:, None] * (1 - fv)[:, None] * f00
        + fu[:, None] * (1 - fv)[:, None] * f10
        + (1 - fu)[:, None] * fv[:, None] * f01
        + fu[:, None] * fv[:, None] * f11
    )
    cache = (i0, j0, fu, fv, f00, f10, f01, f11, u, v)
    return feat, cache


def _plane_sample_vjp(plane_shape, cache, featbar):
    """Returns (texel grad scatter list, d/ds_u, d/ds_v) in texel units."""
    i0, j0, fu, fv, f00, f10, f01, f11, u, v = cache
    w00 = (1 - fu) * (1 - fv)
    w10 = fu * (1 - fv)
    w01 = (1 - fu) * fv
    w11 = fu * fv
    taps = [
        (i0, j0, w00),
        (i0 + 1, j0, w10),
        (i0, j0 + 1, w01),
        (i0 + 1, j0 + 1, w11),
    ]
    dfu = np.einsum(
        "nf,nf->n", featbar, (f10 - f00) * (1 - fv)[:, None] + (f11 - f01) * fv[:, None]
    )
    dfv = np.einsum(
        "nf,nf->n", featbar, (f01 - f00) * (1 - fu)[:, None] + (f11 - f10) * fu[:, None]
    )
    # clamped coordinates have zero outward derivative
    inside_u = (u > 0.0) & (u < 1.0)
    inside_v = (v > 0.0) & (v < 1.0)
    return taps, dfu * inside_u, dfv * inside_v


def _scatter_plane_grad(grad_plane, taps, featbar):
    R = grad_plane.shape[0]
    flat = grad_plane.reshape(R * R, -1)
    for i, j, w in taps:
        np.add.at(flat, i * R + j, w[:, None] * featbar)


def field_domain_from_grid(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    return grid.origin.copy(), grid.upper


# --------------------------------------------------------------------------
# Causal tri-plane
# --------------------------------------------------------------------------


@dataclass
class TriPlaneConfig:
    resolution: int = 32
    features: int = 16
    n_freqs: int = 4
    enc_hidden: int = 32
    dec_hidden: tuple = (64, 64)
    domain_lo: tuple = (0.0, 0.0, 0.0)
    domain_hi: tuple = (1.0, 1.0, 1.0)
    n_frames: int = 1
    frame_dt: float = 1.0 / 30.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dec_hidden"] = list(self.dec_hidden)
        d["domain_lo"] = list(self.domain_lo)
        d["domain_hi"] = list(self.domain_hi)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TriPlaneConfig":
        d = dict(d)
        d["dec_hidden"] = tuple(d["dec_hidden"])
        d["domain_lo"] = tuple(d["domain_lo"])
        d["domain_hi"] = tuple(d["domain_hi"])
        return TriPlaneConfig(**d)


class CausalTriPlane:
    """Causal tri-plane: decode(sum of plane features + time-encoder features).

    Spatial planes and the decoder are shared across time; the time encoder
    has one parameter snapshot per optimized frame, warm-started from the
    previous frame's weights.
    """

    kind = "triplane"

    def __init__(self, config: TriPlaneConfig):
        self.config = config
        R, F = config.resolution, config.features
        rng = np.random.default_rng(config.seed)
        # zero planes + zero decoder output layer: the initial field is 0
        self.planes = np.zeros((3, R, R, F))
        self.decoder = _mlp_init((F, *config.dec_hidden, 3), rng, last_zero=True)
        self._enc_sizes = (2 * config.n_freqs, config.enc_hidden, F)
        self.snapshots: dict[int, list] = {}
        self.domain_lo = np.asarray(config.domain_lo, dtype=np.float64)
        self.domain_hi = np.asarray(config.domain_hi, dtype=np.float64)

    # -- time handling ------------------------------------------------------

    @property
    def duration(self) -> float:
        return self.config.n_frames * self.config.frame_dt

    def frame_of(self, t: float) -> int:
        k = int(np.floor(t / self.config.frame_dt + 1e-9))
        return min(max(k, 0), self.config.n_frames - 1)

    def _encode_time(self, frame: int) -> np.ndarray:
        """Sinusoidal features of the frame's normalized start time.

        The recovered field is piecewise constant per frame: one force per
        transition is what position-only supervision determines, and the
        per-frame encoder snapshots carry exactly that resolution.
        """
        tau = np.clip(frame / max(self.config.n_frames, 1), 0.0, 1.0)
        freqs = 2.0 ** np.arange(self.config.n_freqs)
        ang = 2.0 * np.pi * freqs * tau
        return np.concatenate([np.sin(ang), np.cos(ang)])[None, :]

    def warm_start(self, frame: int) -> None:
        """Create the frame's encoder snapshot: copy of frame-1, or a seeded
        deterministic init at frame 0."""
        if frame == 0:
            rng = np.random.default_rng(self.config.seed + 1)
            self.snapshots[0] = _mlp_init(self._enc_sizes, rng, scale=0.1)
            return
        prev = self.snapshots.get(frame - 1)
        if prev is None:
            raise QueryError(f"warm_start({frame}): snapshot for frame {frame - 1} missing")
        self.snapshots[frame] = [(W.copy(), b.copy()) for W, b in prev]

    def _snapshot(self, frame: int) -> list:
        snap = self.snapshots.get(frame)
        if snap is None:
            raise QueryError(f"no time-encoder snapshot for frame {frame}")
        return snap

    # -- spatial features ----------------------------------------------------

    def _normalized_coords(self, xs: np.ndarray) -> np.ndarray:
        span = self.domain_hi - self.domain_lo
        return (xs - self.domain_lo) / span

    def _spatial_features(self, xs: np.ndarray):
        coords = self._normalized_coords(xs)
        feat = np.zeros((xs.shape[0], self.config.features))
        caches = []
        for p, (a, b) in enumerate(_PLANE_AXES_SPATIAL):
            f, cache = _plane_sample(self.planes[p], coords[:, a], coords[:, b])
            feat += f
            caches.append(cache)
        return feat, caches

    # -- queries -------------------------------------------------------------

    def query_batch(self, xs: np.ndarray, t: float, frame: int, indices=None) -> np.ndarray:
        snap = self._snapshot(frame)
        feat, _ = self._spatial_features(xs)
        phi, _ = _mlp_forward(snap, self._encode_time(frame))
        out, _ = _mlp_forward(self.decoder, feat + phi)
        return out

    def query_vjp(
        self, xs: np.ndarray, t: float, frame: int, fbar: np.ndarray, grad_out: np.ndarray, indices=None
    ) -> np.ndarray:
        """Accumulate parameter gradients into grad_out; return d/dx."""
        if grad_out.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"grad buffer has shape {grad_out.shape}, expected ({self.n_params},)"
            )
        snap = self._snapshot(frame)
        feat, caches = self._spatial_features(xs)
        enc_in = self._encode_time(frame)
        phi, enc_acts = _mlp_forward(snap, enc_in)
        _, dec_acts = _mlp_forward(self.decoder, feat + phi)

        dec_grads, featbar = _mlp_vjp(self.decoder, dec_acts, fbar)
        lo = self._ofs_decoder
        grad_out[lo : lo + self._n_dec] += _flatten_layers(dec_grads)

        # time-encoder: phi is broadcast over particles, so cotangents sum
        enc_grads, _ = _mlp_vjp(snap, enc_acts, featbar.sum(axis=0, keepdims=True))
        lo = self._snapshot_offset(frame)
        grad_out[lo : lo + self._n_enc] += _flatten_layers(enc_grads)

        xbar = np.zeros_like(xs)
        coords = self._normalized_coords(xs)
        span = self.domain_hi - self.domain_lo
        R = self.config.resolution
        F = self.config.features
        plane_grad = np.zeros_like(self.planes)
        for p, (a, b) in enumerate(_PLANE_AXES_SPATIAL):
            taps, dfu, dfv = _plane_sample_vjp((R, R, F), caches[p], featbar)
            _scatter_plane_grad(plane_grad[p], taps, featbar)
            xbar[:, a] += dfu * (R - 1) / span[a]
            xbar[:, b] += dfv * (R - 1) / span[b]
        grad_out[: self._n_planes] += plane_grad.ravel()
        return xbar

    # -- parameter layout: planes | decoder | snapshots (frame order) --------

    @property
    def _n_planes(self) -> int:
        return self.planes.size

    @property
    def _n_dec(self) -> int:
        return _layer_sizes(self.decoder)

    @property
    def _n_enc(self) -> int:
        return sum(
            self._enc_sizes[i] * self._enc_sizes[i + 1] + self._enc_sizes[i + 1]
            for i in range(len(self._enc_sizes) - 1)
        )

    @property
    def _ofs_decoder(self) -> int:
        return self._n_planes

    def _snapshot_offset(self, frame: int) -> int:
        frames = sorted(self.snapshots.keys())
        pos = frames.index(frame)
        return self._n_planes + self._n_dec + pos * self._n_enc

    @property
    def n_params(self) -> int:
        return self._n_planes + self._n_dec + len(self.snapshots) * self._n_enc

    def params(self) -> np.ndarray:
        parts = [self.planes.ravel(), _flatten_layers(self.decoder)]
        for k in sorted(self.snapshots.keys()):
            parts.append(_flatten_layers(self.snapshots[k]))
        return np.concatenate(parts)

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"parameter vector has shape {vec.shape}, expected ({self.n_params},)"
            )
        self.planes = vec[: self._n_planes].reshape(self.planes.shape).copy()
        ofs = self._n_planes
        self.decoder = _unflatten_layers(vec[ofs : ofs + self._n_dec], self.decoder)
        ofs += self._n_dec
        for k in sorted(self.snapshots.keys()):
            self.snapshots[k] = _unflatten_layers(vec[ofs : ofs + self._n_enc], self.snapshots[k])
            ofs += self._n_enc

    def add_to_params(self, delta: np.ndarray) -> None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"scatter vector has shape {delta.shape}, expected ({self.n_params},)"
            )
        self.set_params(self.params() + delta)

    def active_indices(self, frame: int) -> np.ndarray:
        """Planes + decoder + the frame's encoder snapshot."""
        idx = [np.arange(self._n_planes + self._n_dec)]
        lo = self._snapshot_offset(frame)
        idx.append(np.arange(lo, lo + self._n_enc))
        return np.concatenate(idx)

    def snapshot_params(self, frame: int) -> np.ndarray:
        return _flatten_layers(self._snapshot(frame))

    def clone(self) -> "CausalTriPlane":
        out = CausalTriPlane(self.config)
        for k in sorted(self.snapshots.keys()):
            out.snapshots[k] = [(W.copy(), b.copy()) for W, b in self.snapshots[k]]
        out.set_params(self.params())
        return out


# --------------------------------------------------------------------------
# K-planes baseline
# --------------------------------------------------------------------------


@dataclass
class KPlanesConfig:
    resolution: int = 32
    features: int = 16
    dec_hidden: tuple = (64, 64)
    domain_lo: tuple = (0.0, 0.0, 0.0)
    domain_hi: tuple = (1.0, 1.0, 1.0)
    n_frames: int = 1
    frame_dt: float = 1.0 / 30.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dec_hidden"] = list(self.dec_hidden)
        d["domain_lo"] = list(self.domain_lo)
        d["domain_hi"] = list(self.domain_hi)
        return d

    @staticmethod
    def from_dict(d: dict) -> "KPlanesConfig":
        d = dict(d)
        d["dec_hidden"] = tuple(d["dec_hidden"])
        d["domain_lo"] = tuple(d["domain_lo"])
        d["domain_hi"] = tuple(d["domain_hi"])
        return KPlanesConfig(**d)


class KPlanesField:
    """Six planes (xy, yz, xz, xt, yt, zt) fused by elementwise product.

    Planes initialize near one (multiplicative identity) and the decoder
    output layer at zero, so the initial field is zero like the tri-plane.
    """

    kind = "kplanes"
    _axes = ((0, 1), (1, 2), (0, 2), (0, 3), (1, 3), (2, 3))  # 3 = time axis

    def __init__(self, config: KPlanesConfig):
        self.config = config
        R, F = config.resolution, config.features
        rng = np.random.default_rng(config.seed)
        self.planes = 1.0 + 0.05 * rng.standard_normal((6, R, R, F))
        self.decoder = _mlp_init((F, *config.dec_hidden, 3), rng, last_zero=True)
        self.domain_lo = np.asarray(config.domain_lo, dtype=np.float64)
        self.domain_hi = np.asarray(config.domain_hi, dtype=np.float64)

    @property
    def duration(self) -> float:
        return self.config.n_frames * self.config.frame_dt

    def frame_of(self, t: float) -> int:
        k = int(np.floor(t / self.config.frame_dt + 1e-9))
        return min(max(k, 0), self.config.n_frames - 1)

    def _coords4(self, xs: np.ndarray, frame: int) -> np.ndarray:
        span = self.domain_hi - self.domain_lo
        sp = (xs - self.domain_lo) / span
        tau = np.full(
            (xs.shape[0], 1), np.clip(frame / max(self.config.n_frames, 1), 0.0, 1.0)
        )
        return np.concatenate([sp, tau], axis=1)

    def _features(self, xs: np.ndarray, frame: int):
        coords = self._coords4(xs, frame)
        feats, caches = [], []
        for p, (a, b) in enumerate(self._axes):
            f, cache = _plane_sample(self.planes[p], coords[:, a], coords[:, b])
            feats.append(f)
            caches.append(cache)
        prod = feats[0].copy()
        for f in feats[1:]:
            prod *= f
        return prod, feats, caches

    def query_batch(self, xs: np.ndarray, t: float, frame: int, indices=None) -> np.ndarray:
        prod, _, _ = self._features(xs, frame)
        out, _ = _mlp_forward(self.decoder, prod)
        return out

    def query_vjp(self, xs, t, frame, fbar, grad_out, indices=None) -> np.ndarray:
        if grad_out.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"grad buffer has shape {grad_out.shape}, expected ({self.n_params},)"
            )
        prod, feats, caches = self._features(xs, frame)
        _, dec_acts = _mlp_forward(self.decoder, prod)
        dec_grads, prodbar = _mlp_vjp(self.decoder, dec_acts, fbar)
        grad_out[self.planes.size : self.planes.size + _layer_sizes(self.decoder)] += (
            _flatten_layers(dec_grads)
        )

        xbar = np.zeros_like(xs)
        span = self.domain_hi - self.domain_lo
        R = self.config.resolution
        plane_grad = np.zeros_like(self.planes)
        for p, (a, b) in enumerate(self._axes):
            others = prodbar.copy()
            for q, f in enumerate(feats):
                if q != p:
                    others *= f
            taps, dfu, dfv = _plane_sample_vjp(self.planes[p].shape, caches[p], others)
            _scatter_plane_grad(plane_grad[p], taps, others)
            if a < 3:
                xbar[:, a] += dfu * (R - 1) / span[a]
            if b < 3:
                xbar[:, b] += dfv * (R - 1) / span[b]
        grad_out[: self.planes.size] += plane_grad.ravel()
        return xbar

    @property
    def n_params(self) -> int:
        return self.planes.size + _layer_sizes(self.decoder)

    def params(self) -> np.ndarray:
        return np.concatenate([self.planes.ravel(), _flatten_layers(self.decoder)])

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"parameter vector has shape {vec.shape}, expected ({self.n_params},)"
            )
        self.planes = vec[: self.planes.size].reshape(self.planes.shape).copy()
        self.decoder = _unflatten_layers(vec[self.planes.size :], self.decoder)

    def add_to_params(self, delta: np.ndarray) -> None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"scatter vector has shape {delta.shape}, expected ({self.n_params},)"
            )
        self.set_params(self.params() + delta)

    def active_indices(self, frame: int) -> np.ndarray:
        return np.arange(self.n_params)

    def warm_start(self, frame: int) -> None:
        """No per-frame snapshots; kept for interface symmetry."""

    def clone(self) -> "KPlanesField":
        out = KPlanesField(self.config)
        out.set_params(self.params())
        return out


# --------------------------------------------------------------------------
# Point-force baseline
# --------------------------------------------------------------------------


@dataclass
class PointForceConfig:
    n_particles: int = 1
    n_frames: int = 1
    frame_dt: float = 1.0 / 30.0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "PointForceConfig":
        return PointForceConfig(**d)


class PointForceField:
    """Per-particle, per-frame specific-force table; zero off the table."""

    kind = "point"

    def __init__(self, config: PointForceConfig):
        self.config = config
        self.values = np.zeros((config.n_frames, config.n_particles, 3))

    def frame_of(self, t: float) -> int:
        k = int(np.floor(t / self.config.frame_dt + 1e-9))
        return min(max(k, 0), self.config.n_frames - 1)

    def _check_frame(self, frame: int) -> None:
        if not (0 <= frame < self.config.n_frames):
            raise QueryError(f"point field has no frame {frame}")

    def _resolve_indices(self, xs, indices):
        if indices is not None:
            return np.asarray(indices, dtype=np.int64)
        if xs.shape[0] == self.config.n_particles:
            return np.arange(self.config.n_particles)
        raise FieldError(
            "point field query without indices requires one row per registered particle"
        )

    def query_batch(self, xs: np.ndarray, t: float, frame: int, indices=None) -> np.ndarray:
        self._check_frame(frame)
        idx = self._resolve_indices(xs, indices)
        out = np.zeros((xs.shape[0], 3))
        valid = (idx >= 0) & (idx < self.config.n_particles)
        out[valid] = self.values[frame, idx[valid]]
        return out

    def query_vjp(self, xs, t, frame, fbar, grad_out, indices=None):
        self._check_frame(frame)
        if grad_out.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"grad buffer has shape {grad_out.shape}, expected ({self.n_params},)"
            )
        idx = self._resolve_indices(xs, indices)
        valid = (idx >= 0) & (idx < self.config.n_particles)
        flat = grad_out.reshape(self.values.shape)
        np.add.at(flat[frame], idx[valid], fbar[valid])
        return None  # table lookup: no spatial derivative

    @property
    def n_params(self) -> int:
        return self.values.size

    def params(self) -> np.ndarray:
        return self.values.ravel().copy()

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"parameter vector has shape {vec.shape}, expected ({self.n_params},)"
            )
        self.values = vec.reshape(self.values.shape).copy()

    def add_to_params(self, delta: np.ndarray) -> None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.n_params,):
            raise ShapeMismatchError(
                f"scatter vector has shape {delta.shape}, expected ({self.n_params},)"
            )
        self.values = self.values + delta.reshape(self.values.shape)

    def active_indices(self, frame: int) -> np.ndarray:
        self._check_frame(frame)
        per = self.config.n_particles * 3
        return np.arange(frame * per, (frame + 1) * per)

    def warm_start(self, frame: int) -> None:
        """Analog of the tri-plane warm start: copy the previous frame's forces."""
        if frame > 0:
            self.values[frame] = self.values[frame - 1]

    def clone(self) -> "PointForceField":
        out = PointForceField(self.config)
        out.set_params(self.params())
        return out


# --------------------------------------------------------------------------
# Analytic ground-truth fields (synthesis oracle; no parameters)
# --------------------------------------------------------------------------


class AnalyticField:
    """Evaluates a GroundTruthFieldSpec with the field interface."""

    kind = "analytic"

    def __init__(self, spec: GroundTruthFieldSpec, frame_dt: float):
        self.spec = spec
        self.frame_dt = frame_dt
        self._impulse_set = set(spec.indices) if spec.kind == "point_impulse" else set()

    def query_batch(self, xs: np.ndarray, t: float, frame: int, indices=None) -> np.ndarray:
        n = xs.shape[0]
        s = self.spec
        if s.kind == "constant":
            return np.tile(s.a, (n, 1))
        if s.kind == "sinusoid":
            val = s.amplitude * np.sin(2.0 * np.pi * s.frequency * t)
            return np.tile(val * s.axis, (n, 1))
        if s.kind == "vortex":
            r = xs - s.center
            r_par = (r @ s.axis)[:, None] * s.axis[None, :]
            r_perp = r - r_par
            d = np.linalg.norm(r_perp, axis=1)
            out = np.zeros((n, 3))
            ok = d > 1e-12
            tang = np.cross(np.tile(s.axis, (n, 1))[ok], r_perp[ok] / d[ok, None])
            out[ok] = (s.strength * np.exp(-s.falloff * d[ok]))[:, None] * tang
            return out
        # point_impulse
        out = np.zeros((n, 3))
        if s.window[0] <= frame < s.window[1]:
            idx = np.arange(n) if indices is None else np.asarray(indices)
            hit = np.array([i in self._impulse_set for i in idx])
            out[hit] = s.a
        return out

    def query_vjp(self, xs, t, frame, fbar, grad_out, indices=None):
        raise FieldError("analytic fields have no parameters to differentiate")

    @property
    def n_params(self) -> int:
        return 0

    def params(self) -> np.ndarray:
        return np.zeros(0)


# --------------------------------------------------------------------------
# Spec ops: query / params / scatter / regularizers / checkpoints
# --------------------------------------------------------------------------


def query(field, x, t: float, particle_index: int | None = None) -> np.ndarray:
    """Single-point field query; maps t to the field's frame index."""
    xs = np.asarray(x, dtype=np.float64).reshape(1, 3)
    frame = field.frame_of(t)
    if field.kind == "point":
        idx = np.asarray([-1 if particle_index is None else particle_index])
        return field.query_batch(xs, t, frame, indices=idx)[0]
    return field.query_batch(xs, t, frame)[0]


def params(field) -> np.ndarray:
    """Flat parameter vector in the documented stable ordering."""
    return field.params()


def scatter(field, grads: np.ndarray) -> None:
    """Accumulate a same-shaped vector into the field's parameters."""
    field.add_to_params(grads)


def warm_start(field, frame: int) -> None:
    field.warm_start(frame)


def _tv_planes(field) -> np.ndarray:
    if field.kind == "triplane":
        return field.planes
    if field.kind == "kplanes":
        return field.planes[:3]
    raise FieldError(f"tv_loss: not applicable to field kind {field.kind!r}")


def tv_loss(field) -> float:
    """Sum over spatial planes of mean squared adjacent-texel differences."""
    total = 0.0
    for plane in _tv_planes(field):
        du = plane[1:, :, :] - plane[:-1, :, :]
        dv = plane[:, 1:, :] - plane[:, :-1, :]
        total += float((du**2).mean() + (dv**2).mean())
    return total


def tv_loss_grad(field, grad_out: np.ndarray, weight: float = 1.0) -> None:
    """Accumulate weight * d(tv_loss)/d(params) into grad_out."""
    planes = _tv_planes(field)
    grad_planes = np.zeros_like(planes)
    for p in range(planes.shape[0]):
        plane = planes[p]
        du = plane[1:, :, :] - plane[:-1, :, :]
        dv = plane[:, 1:, :] - plane[:, :-1, :]
        g = grad_planes[p]
        g[1:, :, :] += 2.0 * du / du.size
        g[:-1, :, :] -= 2.0 * du / du.size
        g[:, 1:, :] += 2.0 * dv / dv.size
        g[:, :-1, :] -= 2.0 * dv / dv.size
    grad_out[: grad_planes.size] += weight * grad_planes.ravel()


def time_smooth_loss(field, frame: int) -> float:
    """Mean absolute difference between consecutive time-encoder snapshots."""
    if field.kind != "triplane":
        return 0.0
    if frame == 0:
        return 0.0
    cur = field.snapshot_params(frame)
    prev = field.snapshot_params(frame - 1)
    return float(np.abs(cur - prev).mean())


def time_smooth_grad(field, frame: int, grad_out: np.ndarray, weight: float = 1.0) -> None:
    """Accumulate the (sub)gradient wrt the frame-k snapshot into grad_out."""
    if field.kind != "triplane" or frame == 0:
        return
    cur = field.snapshot_params(frame)
    prev = field.snapshot_params(frame - 1)
    lo = field._snapshot_offset(frame)
    grad_out[lo : lo + cur.size] += weight * np.sign(cur - prev) / cur.size


FIELD_CHECKPOINT_VERSION = "1"


def save_field(field, path) -> None:
    """Versioned checkpoint: kind, config, flat parameters, snapshot frames."""
    doc = {
        "version": FIELD_CHECKPOINT_VERSION,
        "kind": field.kind,
        "config": field.config.to_dict(),
        "snapshot_frames": sorted(field.snapshots.keys()) if field.kind == "triplane" else [],
        "params": field.params().tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)
        fh.write("\n")


def load_field(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != FIELD_CHECKPOINT_VERSION:
        raise FieldError(f"unsupported field checkpoint version {doc.get('version')!r}")
    kind = doc["kind"]
    if kind == "triplane":
        field = CausalTriPlane(TriPlaneConfig.from_dict(doc["config"]))
        for k in doc["snapshot_frames"]:
            field.snapshots[k] = _mlp_init(field._enc_sizes, np.random.default_rng(0))
    elif kind == "kplanes":
        field = KPlanesField(KPlanesConfig.from_dict(doc["config"]))
    elif kind == "point":
        field = PointForceField(PointForceConfig.from_dict(doc["config"]))
    else:
        raise FieldError(f"unknown field kind {kind!r}")
    field.set_params(np.asarray(doc["params"], dtype=np.float64))
    return field


def make_field(kind: str, grid: GridSpec, n_particles: int, n_frames: int, frame_dt: float, seed: int = 0, **overrides):
    """Construct a zero-initialized field of the requested representation."""
    lo, hi = field_domain_from_grid(grid)
    if kind == "triplane":
        cfg = TriPlaneConfig(
            domain_lo=tuple(lo), domain_hi=tuple(hi), n_frames=n_frames,
            frame_dt=frame_dt, seed=seed, **overrides,
        )
        return CausalTriPlane(cfg)
    if kind == "kplanes":
        cfg = KPlanesConfig(
            domain_lo=tuple(lo), domain_hi=tuple(hi), n_frames=n_frames,
            frame_dt=frame_dt, seed=seed, **overrides,
        )
        return KPlanesField(cfg)
    if kind == "point":
        return PointForceField(
            PointForceConfig(n_particles=n_particles, n_frames=n_frames, frame_dt=frame_dt)
        )
    raise FieldError(f"unknown field kind {kind!r}; valid kinds: triplane, kplanes, point")
