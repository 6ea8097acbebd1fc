"""Shared fixtures: small scenes, cameras, and analytic fields."""

from __future__ import annotations

import numpy as np
import pytest

from forcelens import forcefield as ff
from forcelens.scene import (
    Camera,
    GridSpec,
    GroundTruthFieldSpec,
    MaterialParams,
    Plasticity,
    Scene,
    material_lookup,
    sample_block,
)


@pytest.fixture
def soft_material():
    return MaterialParams(
        name="test-soft", rho=1000.0, youngs_modulus=5e3, poisson_ratio=0.3,
        plasticity=Plasticity(),
    )


@pytest.fixture
def camera():
    return Camera(
        fx=800.0, fy=800.0, cx=320.0, cy=240.0,
        rotation=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
        translation=np.array([-0.2, 0.2, 0.45]),
        width=640, height=480,
    )


@pytest.fixture
def small_scene(soft_material, camera):
    """27-particle soft block centered in a 16^3 grid, no gravity, no BCs."""
    grid = GridSpec(origin=np.zeros(3), cell_size=0.025, dims=(16, 16, 16))
    particles = sample_block(
        soft_material, center=np.array([0.2, 0.2, 0.2]),
        extent=np.full(3, 0.075), spacing=0.025,
    )
    scene = Scene(
        particles=particles, materials=[soft_material], grid=grid, camera=camera,
        frame_dt=1.0 / 30.0, substeps_per_frame=32,
    )
    scene.validate()
    return scene


@pytest.fixture
def ballistic_scene(soft_material, camera):
    """Single free particle in a roomy grid (ballistic closed-form oracle)."""
    grid = GridSpec(origin=np.zeros(3), cell_size=0.05, dims=(32, 32, 32))
    particles = sample_block(
        soft_material, center=np.array([0.3, 0.6, 0.6]),
        extent=np.full(3, 0.02), spacing=0.02,
    )
    scene = Scene(
        particles=particles, materials=[soft_material], grid=grid, camera=camera,
        frame_dt=1.0 / 30.0, substeps_per_frame=32,
    )
    scene.validate()
    return scene


def constant_field(a, frame_dt=1.0 / 30.0):
    return ff.AnalyticField(
        GroundTruthFieldSpec(kind="constant", a=np.asarray(a, dtype=float)), frame_dt
    )


@pytest.fixture
def zero_field():
    return constant_field([0.0, 0.0, 0.0])
