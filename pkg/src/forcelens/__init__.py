"""forcelens: differentiable deformable-body simulation and inverse recovery
of time-varying 3D specific-force fields from observed particle motion."""

__version__ = "0.1.0"

from .scene import (  # noqa: F401
    BoundaryCondition,
    Camera,
    GridSpec,
    GroundTruthFieldSpec,
    MaterialParams,
    Particle,
    Particles,
    Plasticity,
    Scene,
    Trajectory,
    load_scene,
    load_trajectory,
    material_lookup,
    sample_block,
    save_scene,
    save_trajectory,
)
from .mpm import (  # noqa: F401
    SimState,
    constitutive_stress,
    lame_params,
    rollout,
    step_frame,
    update_deformation_gradient,
)
from .forcefield import (  # noqa: F401
    AnalyticField,
    CausalTriPlane,
    KPlanesField,
    PointForceField,
    load_field,
    make_field,
    save_field,
)
from .adjoint import (  # noqa: F401
    GradCheckConfig,
    backprop,
    finite_diff_grad,
    gradient_check,
    rollout_with_tape,
)
