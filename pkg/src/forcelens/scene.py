"""Scene data model: particles, materials, camera, grid, boundary conditions,
ground-truth force specs, the bundled material catalog, and versioned file I/O.

Scene files are UTF-8 JSON with particle state stored as parallel flat arrays;
trajectory files are JSON-lines (optionally gzipped). Floats are written with
full precision so load(save(s)) round-trips bit-for-bit.
"""

from __future__ import annotations

import base64
import difflib
import gzip
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    InvariantViolation,
    SceneParseError,
    SceneVersionError,
    UnknownMaterialError,
)

SCENE_SCHEMA_VERSION = "1"

_PLASTICITY_KINDS = ("elastic", "elastoplastic", "viscoplastic")


def _as_vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise InvariantViolation(f"{name}: expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation(f"{name}: non-finite entries")
    return arr


def _as_mat3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3, 3):
        raise InvariantViolation(f"{name}: expected a 3x3 matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation(f"{name}: non-finite entries")
    return arr


@dataclass(frozen=True)
class Plasticity:
    """Constitutive flavor: elastic, elastoplastic(yield), or viscoplastic(yield, viscosity)."""

    kind: str = "elastic"
    yield_stress: float | None = None
    viscosity: float | None = None

    def __post_init__(self):
        if self.kind not in _PLASTICITY_KINDS:
            raise InvariantViolation(f"plasticity.kind: unknown kind {self.kind!r}")
        if self.kind == "elastic":
            if self.yield_stress is not None or self.viscosity is not None:
                raise InvariantViolation("plasticity: elastic takes no yield/viscosity")
        else:
            if self.yield_stress is None or not self.yield_stress > 0:
                raise InvariantViolation("plasticity.yield_stress: must be > 0")
            if self.kind == "viscoplastic":
                if self.viscosity is None or not self.viscosity > 0:
                    raise InvariantViolation("plasticity.viscosity: must be > 0")
            elif self.viscosity is not None:
                raise InvariantViolation("plasticity: elastoplastic takes no viscosity")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.yield_stress is not None:
            out["yield_stress"] = self.yield_stress
        if self.viscosity is not None:
            out["viscosity"] = self.viscosity
        return out

    @staticmethod
    def from_dict(d: dict) -> "Plasticity":
        return Plasticity(
            kind=d.get("kind", "elastic"),
            yield_stress=d.get("yield_stress"),
            viscosity=d.get("viscosity"),
        )


@dataclass(frozen=True)
class MaterialParams:
    """Density, elastic moduli, and plasticity model for one material."""

    name: str
    rho: float
    youngs_modulus: float
    poisson_ratio: float
    plasticity: Plasticity = Plasticity()
    source: str = ""

    def __post_init__(self):
        if not self.rho > 0:
            raise InvariantViolation(f"material {self.name!r}: rho must be > 0")
        if not self.youngs_modulus > 0:
            raise InvariantViolation(f"material {self.name!r}: youngs_modulus must be > 0")
        if not (0.0 <= self.poisson_ratio < 0.5):
            raise InvariantViolation(
                f"material {self.name!r}: poisson_ratio must satisfy 0 <= nu < 0.5"
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rho": self.rho,
            "E": self.youngs_modulus,
            "nu": self.poisson_ratio,
            "plasticity": self.plasticity.to_dict(),
            "source": self.source,
        }

    @staticmethod
    def from_dict(d: dict) -> "MaterialParams":
        return MaterialParams(
            name=d["name"],
            rho=float(d["rho"]),
            youngs_modulus=float(d["E"]),
            poisson_ratio=float(d["nu"]),
            plasticity=Plasticity.from_dict(d.get("plasticity", {})),
            source=d.get("source", ""),
        )


# --------------------------------------------------------------------------
# Material catalog (read-only, versioned; stands in for commonsense lookup)
# --------------------------------------------------------------------------

_CATALOG: dict[str, MaterialParams] | None = None
_CATALOG_VERSION: str | None = None


def _load_catalog() -> dict[str, MaterialParams]:
    global _CATALOG, _CATALOG_VERSION
    if _CATALOG is None:
        raw = json.loads(
            resources.files("forcelens.data").joinpath("materials.json").read_text("utf-8")
        )
        _CATALOG_VERSION = raw["catalog_version"]
        _CATALOG = {e["name"]: MaterialParams.from_dict(e) for e in raw["entries"]}
    return _CATALOG


def catalog_version() -> str:
    _load_catalog()
    assert _CATALOG_VERSION is not None
    return _CATALOG_VERSION


def catalog_names() -> list[str]:
    return sorted(_load_catalog().keys())


def material_lookup(name: str) -> MaterialParams:
    """Return the catalog entry for `name`.

    Raises UnknownMaterialError listing the nearest catalog names on a miss.
    The catalog is immutable shared state; entries are frozen dataclasses.
    """
    catalog = _load_catalog()
    entry = catalog.get(name)
    if entry is None:
        near = difflib.get_close_matches(name, catalog.keys(), n=3, cutoff=0.0)
        raise UnknownMaterialError(
            f"unknown material {name!r}; nearest catalog names: {', '.join(near)}"
        )
    return entry


# --------------------------------------------------------------------------
# Camera / grid / boundary conditions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """Static pinhole camera: intrinsics in pixels, world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) world-to-camera
    translation: np.ndarray  # (3,) meters
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_mat3(self.rotation, "camera.rotation"))
        object.__setattr__(self, "translation", _as_vec3(self.translation, "camera.translation"))
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantViolation("camera: fx and fy must be > 0")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise InvariantViolation(f"camera.rotation: not orthonormal (max dev {err:.2e})")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class GridSpec:
    """Background Eulerian grid: origin corner, cubic cell size, node-cell counts."""

    origin: np.ndarray  # (3,) meters
    cell_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin, "grid.origin"))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.cell_size > 0:
            raise InvariantViolation("grid.cell_size: must be > 0")
        if any(d < 4 for d in self.dims):
            raise InvariantViolation("grid.dims: all dims must be >= 4")

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell_size * np.asarray(self.dims, dtype=np.float64)

    def check_margin(self, points: np.ndarray, margin_cells: int = 2) -> None:
        """Require `points` plus a margin of grid cells to fit inside the grid."""
        m = margin_cells * self.cell_size
        lo, hi = self.origin + m, self.upper - m
        if points.size and (np.any(points < lo) or np.any(points > hi)):
            raise InvariantViolation(
                f"grid: scene bounding box plus {margin_cells}-cell margin exceeds grid extent"
            )

    def to_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "cell_size": self.cell_size, "dims": list(self.dims)}

    @staticmethod
    def from_dict(d: dict) -> "GridSpec":
        return GridSpec(
            origin=np.asarray(d["origin"], dtype=np.float64),
            cell_size=float(d["cell_size"]),
            dims=tuple(d["dims"]),
        )


@dataclass(frozen=True)
class BoundaryCondition:
    """Grid-node velocity constraint.

    kind "ground_plane": horizontal plane z = height with +z normal; sticky
    zeroes node velocity below it, separate zeroes only the inward (negative z)
    component. kind "fixed_region": zero velocity inside an axis-aligned box.
    """

    kind: str
    height: float = 0.0
    mode: str = "sticky"
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "ground_plane":
            if self.mode not in ("sticky", "separate"):
                raise InvariantViolation(f"bc.mode: unknown mode {self.mode!r}")
        elif self.kind == "fixed_region":
            lo = _as_vec3(self.lo, "bc.lo")
            hi = _as_vec3(self.hi, "bc.hi")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
            if not np.all(hi > lo):
                raise InvariantViolation("bc.fixed_region: box must have positive extent")
        else:
            raise InvariantViolation(f"bc.kind: unknown kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "ground_plane":
            return {"kind": self.kind, "height": self.height, "mode": self.mode}
        return {"kind": self.kind, "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "BoundaryCondition":
        if d["kind"] == "ground_plane":
            return BoundaryCondition(
                kind="ground_plane", height=float(d["height"]), mode=d["mode"]
            )
        return BoundaryCondition(
            kind="fixed_region",
            lo=np.asarray(d["lo"], dtype=np.float64),
            hi=np.asarray(d["hi"], dtype=np.float64),
        )


# --------------------------------------------------------------------------
# Particles
# --------------------------------------------------------------------------


@dataclass
class Particle:
    """One Lagrangian element; a row view of the Particles container."""

    x: np.ndarray
    v: np.ndarray
    D: np.ndarray
    Sigma: np.ndarray
    mass: float
    volume0: float
    material_id: int
    constrained: bool
    appearance: bytes = b""


@dataclass
class Particles:
    """Structure-of-arrays particle set (positions, velocities, deformation
    gradients, covariances, masses, rest volumes, material ids, constraint
    flags, opaque appearance payloads)."""

    x: np.ndarray  # (N,3)
    v: np.ndarray  # (N,3)
    D: np.ndarray  # (N,3,3)
    Sigma: np.ndarray  # (N,3,3)
    mass: np.ndarray  # (N,)
    volume0: np.ndarray  # (N,)
    material_id: np.ndarray  # (N,) int64
    constrained: np.ndarray  # (N,) bool
    appearance: list[bytes] = field(default_factory=list)

    def __post_init__(self):
        n = self.x.shape[0]
        self.x = np.ascontiguousarray(self.x, dtype=np.float64).reshape(n, 3)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64).reshape(n, 3)
        self.D = np.ascontiguousarray(self.D, dtype=np.float64).reshape(n, 3, 3)
        self.Sigma = np.ascontiguousarray(self.Sigma, dtype=np.float64).reshape(n, 3, 3)
        self.mass = np.ascontiguousarray(self.mass, dtype=np.float64).reshape(n)
        self.volume0 = np.ascontiguousarray(self.volume0, dtype=np.float64).reshape(n)
        self.material_id = np.ascontiguousarray(self.material_id, dtype=np.int64).reshape(n)
        self.constrained = np.ascontiguousarray(self.constrained, dtype=bool).reshape(n)
        if not self.appearance:
            self.appearance = [b""] * n

    def __len__(self) -> int:
        return self.x.shape[0]

    def __iter__(self) -> Iterator[Particle]:
        return (self.get(i) for i in range(len(self)))

    def get(self, i: int) -> Particle:
        return Particle(
            x=self.x[i].copy(),
            v=self.v[i].copy(),
            D=self.D[i].copy(),
            Sigma=self.Sigma[i].copy(),
            mass=float(self.mass[i]),
            volume0=float(self.volume0[i]),
            material_id=int(self.material_id[i]),
            constrained=bool(self.constrained[i]),
            appearance=self.appearance[i],
        )

    def copy(self) -> "Particles":
        return Particles(
            x=self.x.copy(),
            v=self.v.copy(),
            D=self.D.copy(),
            Sigma=self.Sigma.copy(),
            mass=self.mass.copy(),
            volume0=self.volume0.copy(),
            material_id=self.material_id.copy(),
            constrained=self.constrained.copy(),
            appearance=list(self.appearance),
        )

    def validate(self, n_materials: int) -> None:
        if np.any(self.mass <= 0):
            raise InvariantViolation("particle.mass: must be > 0")
        if np.any(self.volume0 <= 0):
            raise InvariantViolation("particle.volume0: must be > 0")
        if np.any(self.material_id < 0) or np.any(self.material_id >= n_materials):
            raise InvariantViolation("particle.material_id: index out of range")
        if np.abs(self.Sigma - np.transpose(self.Sigma, (0, 2, 1))).max(initial=0.0) > 1e-12:
            raise InvariantViolation("particle.Sigma: not symmetric")
        if len(self):
            eigs = np.linalg.eigvalsh(self.Sigma)
            if eigs.min() < -1e-12:
                raise InvariantViolation("particle.Sigma: not positive semidefinite")
            if np.linalg.det(self.D).min() <= 0:
                raise InvariantViolation("particle.D: det must be > 0")
        pinned = self.constrained
        if np.any(np.abs(self.v[pinned]) > 0):
            raise InvariantViolation("particle.v: constrained particles must have v = 0")


def sample_block(
    material: MaterialParams,
    center,
    extent,
    spacing: float,
    material_id: int = 0,
) -> Particles:
    """Sample a regular particle lattice filling an axis-aligned block.

    Each particle gets mass rho*spacing^3, rest volume spacing^3, D = I,
    v = 0, and isotropic covariance (spacing/2)^2 I.
    """
    center = _as_vec3(center, "sample_block.center")
    extent = _as_vec3(extent, "sample_block.extent")
    if not spacing > 0:
        raise InvariantViolation("sample_block.spacing: must be > 0")
    if np.any(extent <= 0):
        raise InvariantViolation("sample_block.extent: must be positive")
    counts = np.floor(extent / spacing + 1e-9).astype(int)
    if np.any(counts < 1):
        raise InvariantViolation("sample_block: extent smaller than spacing (empty block)")
    axes = [
        center[a] - extent[a] / 2 + (np.arange(counts[a]) + 0.5) * spacing for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pos = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    n = pos.shape[0]
    sig = (spacing / 2.0) ** 2 * np.eye(3)
    return Particles(
        x=pos,
        v=np.zeros((n, 3)),
        D=np.tile(np.eye(3), (n, 1, 1)),
        Sigma=np.tile(sig, (n, 1, 1)),
        mass=np.full(n, material.rho * spacing**3),
        volume0=np.full(n, spacing**3),
        material_id=np.full(n, material_id, dtype=np.int64),
        constrained=np.zeros(n, dtype=bool),
    )


# --------------------------------------------------------------------------
# Ground-truth force field specs (synthesis oracles)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthFieldSpec:
    """Analytic specific-force field used to synthesize scenarios.

    kinds: constant(a), sinusoid(amplitude, axis, frequency),
    vortex(center, axis, strength, falloff),
    point_impulse(indices, a, window=[start, end) frames).
    """

    kind: str
    a: np.ndarray | None = None  # constant / point_impulse vector, N/kg
    amplitude: float = 0.0
    axis: np.ndarray | None = None
    frequency: float = 0.0  # Hz
    center: np.ndarray | None = None
    strength: float = 0.0
    falloff: float = 0.0  # 1/m
    indices: tuple[int, ...] = ()
    window: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind == "constant":
            object.__setattr__(self, "a", _as_vec3(self.a, "field.constant.a"))
        elif self.kind == "sinusoid":
            axis = _as_vec3(self.axis, "field.sinusoid.axis")
            norm = np.linalg.norm(axis)
            if norm == 0:
                raise InvariantViolation("field.sinusoid.axis: zero vector")
            object.__setattr__(self, "axis", axis / norm)
            if not np.isfinite(self.amplitude):
                raise InvariantViolation("field.sinusoid.amplitude: non-finite")
        elif self.kind == "vortex":
            object.__setattr__(self, "center", _as_vec3(self.center, "field.vortex.center"))
            axis = _as_vec3(self.axis, "field.vortex.axis")
            norm = np.linalg.norm(axis)
            if norm == 0:
                raise InvariantViolation("field.vortex.axis: zero vector")
            object.__setattr__(self, "axis", axis / norm)
            if not np.isfinite(self.strength):
                raise InvariantViolation("field.vortex.strength: non-finite")
        elif self.kind == "point_impulse":
            object.__setattr__(self, "a", _as_vec3(self.a, "field.point_impulse.a"))
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
            object.__setattr__(self, "window", (int(self.window[0]), int(self.window[1])))
            if self.window[1] < self.window[0]:
                raise InvariantViolation("field.point_impulse.window: end before start")
        else:
            raise InvariantViolation(f"field.kind: unknown kind {self.kind!r}")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "constant":
            d["a"] = self.a.tolist()
        elif self.kind == "sinusoid":
            d.update(amplitude=self.amplitude, axis=self.axis.tolist(), frequency=self.frequency)
        elif self.kind == "vortex":
            d.update(
                center=self.center.tolist(),
                axis=self.axis.tolist(),
                strength=self.strength,
                falloff=self.falloff,
            )
        else:
            d.update(a=self.a.tolist(), indices=list(self.indices), window=list(self.window))
        return d

    @staticmethod
    def from_dict(d: dict) -> "GroundTruthFieldSpec":
        kind = d["kind"]
        if kind == "constant":
            return GroundTruthFieldSpec(kind=kind, a=np.asarray(d["a"], dtype=np.float64))
        if kind == "sinusoid":
            return GroundTruthFieldSpec(
                kind=kind,
                amplitude=float(d["amplitude"]),
                axis=np.asarray(d["axis"], dtype=np.float64),
                frequency=float(d["frequency"]),
            )
        if kind == "vortex":
            return GroundTruthFieldSpec(
                kind=kind,
                center=np.asarray(d["center"], dtype=np.float64),
                axis=np.asarray(d["axis"], dtype=np.float64),
                strength=float(d["strength"]),
                falloff=float(d["falloff"]),
            )
        if kind == "point_impulse":
            return GroundTruthFieldSpec(
                kind=kind,
                a=np.asarray(d["a"], dtype=np.float64),
                indices=tuple(d["indices"]),
                window=tuple(d["window"]),
            )
        raise SceneParseError(f"unknown ground-truth field kind {kind!r}")


# --------------------------------------------------------------------------
# Scene
# --------------------------------------------------------------------------


@dataclass
class Scene:
    particles: Particles
    materials: list[MaterialParams]
    grid: GridSpec
    camera: Camera
    bcs: list[BoundaryCondition] = field(default_factory=list)
    frame_dt: float = 1.0 / 30.0
    substeps_per_frame: int = 32
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.gravity = _as_vec3(self.gravity, "scene.gravity")

    @property
    def substep_dt(self) -> float:
        return self.frame_dt / self.substeps_per_frame

    def validate(self) -> None:
        """Check every scene invariant; raises InvariantViolation naming the field."""
        if not self.frame_dt > 0:
            raise InvariantViolation("scene.frame_dt: must be > 0")
        if self.substeps_per_frame < 1:
            raise InvariantViolation("scene.substeps_per_frame: must be >= 1")
        if not self.materials:
            raise InvariantViolation("scene.materials: at least one material required")
        self.particles.validate(len(self.materials))
        self.grid.check_margin(self.particles.x, margin_cells=2)
        # CFL heuristic at load time: current max speed must not cross a cell
        # per substep. The stepper re-checks every substep with live speeds.
        if len(self.particles):
            vmax = float(np.linalg.norm(self.particles.v, axis=1).max())
            if vmax * self.substep_dt >= self.grid.cell_size:
                raise InvariantViolation(
                    "scene: CFL check failed (max velocity crosses a cell per substep)"
                )

    def copy(self) -> "Scene":
        return Scene(
            particles=self.particles.copy(),
            materials=list(self.materials),
            grid=self.grid,
            camera=self.camera,
            bcs=list(self.bcs),
            frame_dt=self.frame_dt,
            substeps_per_frame=self.substeps_per_frame,
            gravity=self.gravity.copy(),
        )


def scene_to_dict(scene: Scene) -> dict:
    p = scene.particles
    return {
        "version": SCENE_SCHEMA_VERSION,
        "materials": [m.to_dict() for m in scene.materials],
        "particles": {
            "count": len(p),
            "x": p.x.ravel().tolist(),
            "v": p.v.ravel().tolist(),
            "D": p.D.ravel().tolist(),
            "Sigma": p.Sigma.ravel().tolist(),
            "mass": p.mass.tolist(),
            "volume0": p.volume0.tolist(),
            "material_id": p.material_id.tolist(),
            "constrained": [bool(c) for c in p.constrained],
            "appearance": [base64.b64encode(a).decode("ascii") for a in p.appearance],
        },
        "grid": scene.grid.to_dict(),
        "camera": scene.camera.to_dict(),
        "bcs": [bc.to_dict() for bc in scene.bcs],
        "frame_dt": scene.frame_dt,
        "substeps_per_frame": scene.substeps_per_frame,
        "gravity": scene.gravity.tolist(),
    }


def scene_from_dict(doc: dict) -> Scene:
    version = doc.get("version")
    if version != SCENE_SCHEMA_VERSION:
        raise SceneVersionError(
            f"unsupported scene schema version {version!r} (expected {SCENE_SCHEMA_VERSION!r})"
        )
    try:
        pd = doc["particles"]
        n = int(pd["count"])
        particles = Particles(
            x=np.asarray(pd["x"], dtype=np.float64).reshape(n, 3),
            v=np.asarray(pd["v"], dtype=np.float64).reshape(n, 3),
            D=np.asarray(pd["D"], dtype=np.float64).reshape(n, 3, 3),
            Sigma=np.asarray(pd["Sigma"], dtype=np.float64).reshape(n, 3, 3),
            mass=np.asarray(pd["mass"], dtype=np.float64),
            volume0=np.asarray(pd["volume0"], dtype=np.float64),
            material_id=np.asarray(pd["material_id"], dtype=np.int64),
            constrained=np.asarray(pd["constrained"], dtype=bool),
            appearance=[base64.b64decode(a) for a in pd["appearance"]],
        )
        scene = Scene(
            particles=particles,
            materials=[MaterialParams.from_dict(m) for m in doc["materials"]],
            grid=GridSpec.from_dict(doc["grid"]),
            camera=Camera.from_dict(doc["camera"]),
            bcs=[BoundaryCondition.from_dict(b) for b in doc.get("bcs", [])],
            frame_dt=float(doc["frame_dt"]),
            substeps_per_frame=int(doc["substeps_per_frame"]),
            gravity=np.asarray(doc.get("gravity", [0, 0, 0]), dtype=np.float64),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise SceneParseError(f"malformed scene document: {exc}") from exc
    scene.validate()
    return scene


def save_scene(scene: Scene, path) -> None:
    scene.validate()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, allow_nan=False)
        fh.write("\n")


def load_scene(path) -> Scene:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return scene_from_dict(doc)


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Field-for-field equality, used by round-trip tests."""
    pa, pb = a.particles, b.particles
    return (
        len(pa) == len(pb)
        and np.array_equal(pa.x, pb.x)
        and np.array_equal(pa.v, pb.v)
        and np.array_equal(pa.D, pb.D)
        and np.array_equal(pa.Sigma, pb.Sigma)
        and np.array_equal(pa.mass, pb.mass)
        and np.array_equal(pa.volume0, pb.volume0)
        and np.array_equal(pa.material_id, pb.material_id)
        and np.array_equal(pa.constrained, pb.constrained)
        and pa.appearance == pb.appearance
        and a.materials == b.materials
        and a.grid.to_dict() == b.grid.to_dict()
        and a.camera.to_dict() == b.camera.to_dict()
        and [bc.to_dict() for bc in a.bcs] == [bc.to_dict() for bc in b.bcs]
        and a.frame_dt == b.frame_dt
        and a.substeps_per_frame == b.substeps_per_frame
        and np.array_equal(a.gravity, b.gravity)
    )


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Per-frame particle positions/velocities, frame 0 (initial) through F."""

    positions: np.ndarray  # (F+1, N, 3)
    velocities: np.ndarray  # (F+1, N, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        if self.positions.shape != self.velocities.shape:
            raise InvariantViolation("trajectory: positions/velocities shape mismatch")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]


def save_trajectory(traj: Trajectory, path) -> None:
    """Write JSON-lines, one record per frame; gzip when path ends with .gz."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as fh:
        for k in range(traj.positions.shape[0]):
            rec = {
                "frame": k,
                "positions": traj.positions[k].ravel().tolist(),
                "velocities": traj.velocities[k].ravel().tolist(),
            }
            fh.write(json.dumps(rec, allow_nan=False))
            fh.write("\n")


def load_trajectory(path) -> Trajectory:
    opener = gzip.open if str(path).endswith(".gz") else open
    positions, velocities = [], []
    try:
        with opener(path, "rt", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec["frame"] != len(positions):
                    raise SceneParseError(f"{path}: line {lineno + 1}: out-of-order frame")
                pos = np.asarray(rec["positions"], dtype=np.float64)
                vel = np.asarray(rec["velocities"], dtype=np.float64)
                positions.append(pos.reshape(-1, 3))
                velocities.append(vel.reshape(-1, 3))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise SceneParseError(f"{path}: {exc}") from exc
    if not positions:
        raise SceneParseError(f"{path}: empty trajectory file")
    return Trajectory(positions=np.stack(positions), velocities=np.stack(velocities))
