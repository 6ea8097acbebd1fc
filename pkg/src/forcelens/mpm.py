"""Forward deformable-body stepper and its hand-written reverse pass.

One frame advances a fixed number of substeps. Each substep: deformation
update -> plasticity projection + corotated stress -> external specific force
on particles -> particle-to-grid scatter (quadratic B-splines, APIC affine
momentum, MLS fused stress impulse) -> grid normalization, gravity, boundary
conditions -> grid-to-particle gather -> advection -> covariance bookkeeping.

The backward pass (`substep_backward`) consumes per-substep records written by
the forward pass and propagates position cotangents to force-field parameters.
Constitutive derivatives go through a divided-difference formulation of
isotropic SVD functions, which stays finite when singular values coincide
(the rest state D = I is exactly that case).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    CflViolationError,
    DegenerateDeformationError,
    InvariantViolation,
    SimulationError,
)
from .scene import MaterialParams, Particles, Scene, Trajectory

DET_FLOOR = 1e-8
MASS_EPSILON = 1e-12

_KIND_CODES = {"elastic": 0, "elastoplastic": 1, "viscoplastic": 2}

# 3x3x3 stencil offsets in fixed scan order; scatter order (and therefore
# floating-point accumulation order) is particle-major over this table for any
# worker-thread count.
_OFFSETS = np.stack(
    np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij"), axis=-1
).reshape(27, 3)


def lame_params(E: float, nu: float) -> tuple[float, float]:
    """Convert Young's modulus / Poisson ratio to Lame (mu, lambda)."""
    if not E > 0:
        raise InvariantViolation("lame_params: E must be > 0")
    if not (0.0 <= nu < 0.5):
        raise InvariantViolation("lame_params: nu must satisfy 0 <= nu < 0.5")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


# --------------------------------------------------------------------------
# Quadratic B-spline weights
# --------------------------------------------------------------------------


def bspline_weights(fx: np.ndarray) -> np.ndarray:
    """Per-axis quadratic B-spline weights; fx in [0.5, 1.5), shape (...,3).

    Returns shape (...,3,3): last axis is the stencil offset 0/1/2.
    """
    w0 = 0.5 * (1.5 - fx) ** 2
    w1 = 0.75 - (fx - 1.0) ** 2
    w2 = 0.5 * (fx - 0.5) ** 2
    return np.stack([w0, w1, w2], axis=-1)


def bspline_weight_grads(fx: np.ndarray, inv_h: float) -> np.ndarray:
    """d(weight)/d(position) per axis/offset, shape (...,3,3)."""
    d0 = -(1.5 - fx) * inv_h
    d1 = -2.0 * (fx - 1.0) * inv_h
    d2 = (fx - 0.5) * inv_h
    return np.stack([d0, d1, d2], axis=-1)


def _stencil(x: np.ndarray, origin: np.ndarray, h: float, dims) -> tuple:
    """Weights, weight gradients, world-space node offsets, and flat node ids
    for every particle's 3x3x3 support. Raises if the support leaves the grid."""
    xi = (x - origin) / h
    base = np.floor(xi - 0.5).astype(np.int64)
    if base.size and (base.min() < 0 or np.any(base.max(axis=0) > np.asarray(dims) - 3)):
        raise CflViolationError("particle B-spline support leaves the grid domain")
    fx = xi - base
    wa = bspline_weights(fx)  # (N,3,3)
    dwa = bspline_weight_grads(fx, 1.0 / h)
    W = (wa[:, 0, :, None, None] * wa[:, 1, None, :, None] * wa[:, 2, None, None, :]).reshape(
        -1, 27
    )
    gW = np.empty((x.shape[0], 27, 3))
    gW[:, :, 0] = (
        dwa[:, 0, :, None, None] * wa[:, 1, None, :, None] * wa[:, 2, None, None, :]
    ).reshape(-1, 27)
    gW[:, :, 1] = (
        wa[:, 0, :, None, None] * dwa[:, 1, None, :, None] * wa[:, 2, None, None, :]
    ).reshape(-1, 27)
    gW[:, :, 2] = (
        wa[:, 0, :, None, None] * wa[:, 1, None, :, None] * dwa[:, 2, None, None, :]
    ).reshape(-1, 27)
    dpos = (_OFFSETS[None, :, :] - fx[:, None, :]) * h  # (N,27,3)
    nodes = base[:, None, :] + _OFFSETS[None, :, :]
    ny, nz = dims[1], dims[2]
    idx = (nodes[..., 0] * ny + nodes[..., 1]) * nz + nodes[..., 2]  # (N,27)
    return W, gW, dpos, idx


# --------------------------------------------------------------------------
# Constitutive model in principal space
# --------------------------------------------------------------------------


@dataclass
class MaterialTable:
    """Per-particle constitutive coefficients resolved from material ids."""

    mu: np.ndarray
    lam: np.ndarray
    kind: np.ndarray  # int codes per _KIND_CODES
    yield_stress: np.ndarray
    viscosity: np.ndarray

    @staticmethod
    def build(materials: list[MaterialParams], material_id: np.ndarray) -> "MaterialTable":
        mu_m = np.empty(len(materials))
        lam_m = np.empty(len(materials))
        kind_m = np.empty(len(materials), dtype=np.int64)
        ys_m = np.zeros(len(materials))
        vis_m = np.zeros(len(materials))
        for i, m in enumerate(materials):
            mu_m[i], lam_m[i] = lame_params(m.youngs_modulus, m.poisson_ratio)
            kind_m[i] = _KIND_CODES[m.plasticity.kind]
            ys_m[i] = m.plasticity.yield_stress or 0.0
            vis_m[i] = m.plasticity.viscosity or 0.0
        mid = material_id
        return MaterialTable(
            mu=mu_m[mid], lam=lam_m[mid], kind=kind_m[mid],
            yield_stress=ys_m[mid], viscosity=vis_m[mid],
        )


def _return_map(s: np.ndarray, table: MaterialTable, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Project principal stretches through the plasticity model.

    Returns (s_e, jac) with jac[n,i,j] = d s_e_i / d s_j. Elastoplastic clamps
    the deviatoric Hencky norm at yield/(2 mu); viscoplastic relaxes the
    excess with factor 1/(1 + eta/(2 mu dt)) per substep (dt = 0 degenerates
    to the pure clamp).
    """
    n = s.shape[0]
    s = np.maximum(s, 1e-12)
    s_e = s.copy()
    jac = np.tile(np.eye(3), (n, 1, 1))
    plastic = table.kind > 0
    if not np.any(plastic):
        return s_e, jac
    eps = np.log(s)
    mean = eps.mean(axis=1, keepdims=True)
    dev = eps - mean
    r = np.linalg.norm(dev, axis=1)
    y = np.where(table.mu > 0, table.yield_stress / (2.0 * table.mu), np.inf)
    active = plastic & (r > y) & (r > 1e-12)
    if not np.any(active):
        return s_e, jac
    idx = np.nonzero(active)[0]
    dev_a = dev[idx]
    r_a = r[idx]
    y_a = y[idx]
    beta = np.zeros(len(idx))
    visc = table.kind[idx] == 2
    if np.any(visc) and dt > 0:
        beta[visc] = 1.0 / (1.0 + table.viscosity[idx][visc] / (2.0 * table.mu[idx][visc] * dt))
    r_new = y_a + (r_a - y_a) * beta
    c = r_new / r_a
    eps_new = mean[idx] + c[:, None] * dev_a
    s_e[idx] = np.exp(eps_new)
    # d eps'_i / d eps_j = 1/3 + c (delta_ij - 1/3) + y (beta - 1) / r^3 dev_i dev_j
    eye = np.eye(3)[None]
    j_eps = (
        (1.0 / 3.0)
        + c[:, None, None] * (eye - 1.0 / 3.0)
        + (y_a * (beta - 1.0) / r_a**3)[:, None, None] * dev_a[:, :, None] * dev_a[:, None, :]
    )
    # chain: s_e_i = exp(eps'_i), eps_j = log(s_j)
    jac[idx] = s_e[idx][:, :, None] * j_eps / s[idx][:, None, :]
    return s_e, jac


def _principal_stress(s_e: np.ndarray, mu: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-corotated first Piola-Kirchhoff stress in principal space.

    p_i = 2 mu (s_i - 1) + lam (J - 1) J / s_i, plus its Jacobian wrt s_e.
    """
    J = s_e.prod(axis=1)
    p = 2.0 * mu[:, None] * (s_e - 1.0) + (lam * (J - 1.0) * J)[:, None] / s_e
    dJ = J[:, None] / s_e  # dJ/ds_j
    jac = (
        2.0 * mu[:, None, None] * np.eye(3)[None]
        + (lam * (2.0 * J - 1.0))[:, None, None] * dJ[:, None, :] / s_e[:, :, None]
        - (lam * (J**2 - J))[:, None, None] * np.eye(3)[None] / (s_e**2)[:, :, None]
    )
    return p, jac


def _svd_function_vjp(
    U: np.ndarray,
    s: np.ndarray,
    Vt: np.ndarray,
    g: np.ndarray,
    jac: np.ndarray,
    ybar: np.ndarray,
) -> np.ndarray:
    """Adjoint of Y = U diag(g(s)) Vt for a symmetric spectral function g.

    Off-diagonal response uses divided differences (g_i - g_j)/(s_i - s_j)
    and (g_i + g_j)/(s_i + s_j); the first switches to the Jacobian limit when
    singular values (nearly) coincide, so the rest state stays well-posed.
    """
    yrot = np.einsum("nji,njk,nlk->nil", U, ybar, Vt)  # U^T ybar V
    obar = np.zeros_like(yrot)
    # diagonal block: dY_ii = sum_j jac[i,j] dO_jj  ->  obar_jj = sum_i jac[i,j] yrot_ii
    ydiag = np.einsum("nii->ni", yrot)
    odiag = np.einsum("nij,ni->nj", jac, ydiag)
    for a in range(3):
        obar[:, a, a] = odiag[:, a]
    for i, j in ((0, 1), (0, 2), (1, 2)):
        ds = s[:, i] - s[:, j]
        near = np.abs(ds) < 1e-9 * np.maximum(1.0, np.abs(s[:, i]))
        with np.errstate(divide="ignore", invalid="ignore"):
            a_div = (g[:, i] - g[:, j]) / ds
        a_lim = 0.5 * (jac[:, i, i] - jac[:, i, j] + jac[:, j, j] - jac[:, j, i])
        A = np.where(near, a_lim, a_div)
        B = (g[:, i] + g[:, j]) / (s[:, i] + s[:, j])
        hi, lo = 0.5 * (A + B), 0.5 * (A - B)
        yij, yji = yrot[:, i, j], yrot[:, j, i]
        obar[:, i, j] = hi * yij + lo * yji
        obar[:, j, i] = lo * yij + hi * yji
    return np.einsum("nij,njk,nkl->nil", U, obar, Vt)  # U obar V^T


def update_deformation_gradient(D_prev: np.ndarray, grad_v: np.ndarray, dt: float) -> np.ndarray:
    """Deformation update D <- (I + dt grad_v) D_prev with a determinant guard."""
    D_prev = np.asarray(D_prev, dtype=np.float64)
    single = D_prev.ndim == 2
    D_prev = D_prev.reshape(-1, 3, 3)
    grad_v = np.asarray(grad_v, dtype=np.float64).reshape(-1, 3, 3)
    if np.any(np.linalg.det(D_prev) <= 0):
        raise DegenerateDeformationError("update_deformation_gradient: det(D_prev) <= 0")
    out = np.einsum("nij,njk->nik", np.eye(3)[None] + dt * grad_v, D_prev)
    dets = np.linalg.det(out)
    if np.any(dets <= DET_FLOOR):
        bad = int(np.argmin(dets))
        raise DegenerateDeformationError(
            f"deformation gradient degenerate (det <= {DET_FLOOR:g}) at particle {bad}"
        )
    return out[0] if single else out


def constitutive_stress(
    D: np.ndarray, material: MaterialParams, substep_dt: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """First Piola-Kirchhoff stress and plastically projected elastic part.

    Elastic materials return D unchanged; plastic ones apply the return map
    first and evaluate the corotated stress on the projected gradient.
    """
    D = np.asarray(D, dtype=np.float64)
    single = D.ndim == 2
    Db = D.reshape(-1, 3, 3)
    if not np.all(np.isfinite(Db)):
        raise SimulationError("constitutive_stress: non-finite deformation gradient")
    if np.any(np.linalg.det(Db) <= 0):
        raise DegenerateDeformationError("constitutive_stress: det(D) <= 0")
    table = MaterialTable.build([material], np.zeros(Db.shape[0], dtype=np.int64))
    U, s, Vt = np.linalg.svd(Db)
    s_e, _ = _return_map(s, table, substep_dt)
    p, _ = _principal_stress(s_e, table.mu, table.lam)
    P = np.einsum("nij,nj,njk->nik", U, p, Vt)
    D_proj = np.einsum("nij,nj,njk->nik", U, s_e, Vt)
    if single:
        return P[0], D_proj[0]
    return P, D_proj


# --------------------------------------------------------------------------
# Simulation state
# --------------------------------------------------------------------------


@dataclass
class SimState:
    """All particle state plus the substep clock (time, frame index).

    `C` is the APIC affine velocity matrix carried between substeps; it is
    derived scratch (zero at rest) and not part of scene/trajectory files.
    `Sigma0` caches the load-time covariance used by the covariance update.
    """

    particles: Particles
    C: np.ndarray
    t: float
    frame: int
    Sigma0: np.ndarray

    @staticmethod
    def from_scene(scene: Scene) -> "SimState":
        p = scene.particles.copy()
        n = len(p)
        return SimState(
            particles=p,
            C=np.zeros((n, 3, 3)),
            t=0.0,
            frame=0,
            Sigma0=p.Sigma.copy(),
        )

    def copy(self) -> "SimState":
        return SimState(
            particles=self.particles.copy(),
            C=self.C.copy(),
            t=self.t,
            frame=self.frame,
            Sigma0=self.Sigma0.copy(),
        )


@dataclass
class GridBuffers:
    """Eulerian scratch rebuilt every substep: node mass, momentum, velocity."""

    mass: np.ndarray
    momentum: np.ndarray
    velocity: np.ndarray

    @staticmethod
    def allocate(dims) -> "GridBuffers":
        n = int(np.prod(dims))
        return GridBuffers(
            mass=np.zeros(n), momentum=np.zeros((n, 3)), velocity=np.zeros((n, 3))
        )


def _bc_keep_mask(u: np.ndarray, scene: Scene) -> np.ndarray:
    """0/1 mask per node component after boundary conditions; u is the
    post-gravity grid velocity the `separate` mode branches on."""
    dims = scene.grid.dims
    keep = np.ones_like(u)
    if not scene.bcs:
        return keep
    ii, jj, kk = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    node_pos = scene.grid.origin[None, :] + scene.grid.cell_size * np.stack(
        [ii.ravel(), jj.ravel(), kk.ravel()], axis=1
    )
    for bc in scene.bcs:
        if bc.kind == "ground_plane":
            below = node_pos[:, 2] <= bc.height
            if bc.mode == "sticky":
                keep[below] = 0.0
            else:
                inward = below & (u[:, 2] < 0.0)
                keep[inward, 2] = 0.0
        else:
            inside = np.all((node_pos >= bc.lo) & (node_pos <= bc.hi), axis=1)
            keep[inside] = 0.0
    return keep


@dataclass
class SubstepRecord:
    """Everything the reverse pass needs to retrace one substep."""

    x0: np.ndarray
    v0: np.ndarray
    C0: np.ndarray
    D0: np.ndarray
    v1: np.ndarray
    U: np.ndarray
    s: np.ndarray
    Vt: np.ndarray
    s_e: np.ndarray
    jac_ret: np.ndarray
    p_vec: np.ndarray
    jac_p: np.ndarray
    P_mat: np.ndarray
    D1: np.ndarray
    A_mat: np.ndarray
    grid_mass: np.ndarray
    grid_mom: np.ndarray
    keep_mask: np.ndarray
    grid_u_final: np.ndarray
    t: float
    frame: int
    dt: float


def substep_forward(
    x: np.ndarray,
    v: np.ndarray,
    C: np.ndarray,
    D: np.ndarray,
    mass: np.ndarray,
    volume0: np.ndarray,
    constrained: np.ndarray,
    table: MaterialTable,
    scene: Scene,
    field,
    t: float,
    frame: int,
    record: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, SubstepRecord | None]:
    """Advance one substep; optionally return a record for the reverse pass."""
    dt = scene.substep_dt
    h = scene.grid.cell_size
    kappa = 4.0 / (h * h)
    free = ~constrained

    # deformation update with the previous substep's affine velocity matrix,
    # then plasticity projection and principal corotated stress
    D_trial = np.einsum("nij,njk->nik", np.eye(3)[None] + dt * C, D)
    dets = np.linalg.det(D_trial)
    if np.any(dets <= DET_FLOOR):
        bad = int(np.argmin(dets))
        raise DegenerateDeformationError(
            f"det(D) <= {DET_FLOOR:g} at particle {bad}, frame {frame}"
        )
    U, s, Vt = np.linalg.svd(D_trial)
    s_e, jac_ret = _return_map(s, table, dt)
    p_vec, jac_p = _principal_stress(s_e, table.mu, table.lam)
    P_mat = np.einsum("nij,nj,njk->nik", U, p_vec, Vt)
    D1 = np.einsum("nij,nj,njk->nik", U, s_e, Vt)

    # External specific force on particles, before the grid transfer.
    f_ext = field.query_batch(x, t, frame)
    if not np.all(np.isfinite(f_ext)):
        bad = int(np.argwhere(~np.isfinite(f_ext))[0][0])
        raise SimulationError(
            f"non-finite external force at particle {bad}, position {x[bad]}, t={t:g}"
        )
    v1 = v + dt * f_ext * free[:, None]

    # MLS fused stress impulse: A = m C + S, S = -dt V0 (4/h^2) P D1^T.
    S_mat = (-dt * kappa * volume0)[:, None, None] * np.einsum("nij,nkj->nik", P_mat, D1)
    A_mat = mass[:, None, None] * C + S_mat

    W, gW, dpos, idx = _stencil(x, scene.grid.origin, h, scene.grid.dims)
    grid = GridBuffers.allocate(scene.grid.dims)
    grid_mass, grid_mom = grid.mass, grid.momentum
    mom_contrib = W[:, :, None] * (
        mass[:, None, None] * v1[:, None, :] + np.einsum("nab,nkb->nka", A_mat, dpos)
    )
    np.add.at(grid_mass, idx.ravel(), (W * mass[:, None]).ravel())
    np.add.at(grid_mom, idx.ravel(), mom_contrib.reshape(-1, 3))

    live = grid_mass > MASS_EPSILON
    u = grid.velocity
    u[live] = grid_mom[live] / grid_mass[live, None]
    u[live] += dt * scene.gravity[None, :]
    keep = _bc_keep_mask(u, scene)
    u_final = u * keep

    ug = u_final[idx]  # (N,27,3)
    v2 = np.einsum("nk,nka->na", W, ug)
    C2 = kappa * np.einsum("nk,nka,nkb->nab", W, ug, dpos)
    v2[constrained] = 0.0
    C2[constrained] = 0.0

    if v2.size and np.abs(v2).max() * dt >= h:
        raise CflViolationError(
            f"CFL violation: particle crosses more than one cell at frame {frame}, t={t:g}"
        )
    x1 = x + dt * v2

    rec = None
    if record:
        rec = SubstepRecord(
            x0=x, v0=v, C0=C, D0=D, v1=v1, U=U, s=s, Vt=Vt, s_e=s_e,
            jac_ret=jac_ret, p_vec=p_vec, jac_p=jac_p, P_mat=P_mat, D1=D1,
            A_mat=A_mat, grid_mass=grid_mass, grid_mom=grid_mom,
            keep_mask=keep, grid_u_final=u_final, t=t, frame=frame, dt=dt,
        )
    return x1, v2, C2, D1, rec


def substep_backward(
    rec: SubstepRecord,
    xb1: np.ndarray,
    vb1: np.ndarray,
    Cb1: np.ndarray,
    Db1: np.ndarray,
    mass: np.ndarray,
    volume0: np.ndarray,
    constrained: np.ndarray,
    scene: Scene,
    field,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Propagate cotangents through one recorded substep.

    Accumulates d(loss)/d(field params) into `grad_out` and returns the
    cotangents of the pre-substep state (x, v, C, D).
    """
    dt = rec.dt
    h = scene.grid.cell_size
    kappa = 4.0 / (h * h)
    free = ~constrained

    # advection: x1 = x0 + dt v2
    vb2 = vb1 + dt * xb1
    xb0 = xb1.copy()
    Cb2 = Cb1.copy()
    vb2[constrained] = 0.0
    Cb2[constrained] = 0.0

    W, gW, dpos, idx = _stencil(rec.x0, scene.grid.origin, h, scene.grid.dims)
    ug = rec.grid_u_final[idx]

    # G2P backward: scatter into grid cotangent, plus weight/dpos terms into x.
    ub_final = np.zeros_like(rec.grid_u_final)
    contrib_u = W[:, :, None] * (
        vb2[:, None, :] + kappa * np.einsum("nab,nkb->nka", Cb2, dpos)
    )
    np.add.at(ub_final, idx.ravel(), contrib_u.reshape(-1, 3))
    scal_g2p = np.einsum("na,nka->nk", vb2, ug) + kappa * np.einsum(
        "nka,nab,nkb->nk", ug, Cb2, dpos
    )
    xb0 += np.einsum("nk,nka->na", scal_g2p, gW)
    xb0 -= kappa * np.einsum("nk,nba,nkb->na", W, Cb2, ug)

    # grid backward: BC mask, gravity (additive), momentum normalization.
    ub = ub_final * rec.keep_mask
    live = rec.grid_mass > MASS_EPSILON
    momb = np.zeros_like(rec.grid_mom)
    massb = np.zeros_like(rec.grid_mass)
    u_raw = np.zeros_like(rec.grid_mom)
    u_raw[live] = rec.grid_mom[live] / rec.grid_mass[live, None]
    momb[live] = ub[live] / rec.grid_mass[live, None]
    massb[live] = -np.einsum("na,na->n", ub[live], u_raw[live]) / rec.grid_mass[live]

    # P2G backward.
    momb_g = momb[idx]  # (N,27,3)
    massb_g = massb[idx]  # (N,27)
    vb1p = np.einsum("nk,n,nka->na", W, mass, momb_g)
    Ab = np.einsum("nk,nka,nkb->nab", W, momb_g, dpos)
    per_node_mom = mass[:, None, None] * rec.v1[:, None, :] + np.einsum(
        "nab,nkb->nka", rec.A_mat, dpos
    )
    scal_p2g = np.einsum("nka,nka->nk", momb_g, per_node_mom) + massb_g * mass[:, None]
    xb0 += np.einsum("nk,nka->na", scal_p2g, gW)
    xb0 -= np.einsum("nk,nab,nka->nb", W, rec.A_mat, momb_g)
    Cb0 = mass[:, None, None] * Ab
    Sb = Ab

    # external force: v1 = v0 + dt f(x0, t) on free particles.
    vb0 = vb1p.copy()
    fb = dt * vb1p * free[:, None]
    xb_field = field.query_vjp(rec.x0, rec.t, rec.frame, fb, grad_out)
    if xb_field is not None:
        xb0 += xb_field

    # stress impulse: S = -c P D1^T with c = dt V0 kappa.
    c = (dt * kappa * volume0)[:, None, None]
    Pb = -c * np.einsum("nab,nbc->nac", Sb, rec.D1)
    D1b = Db1 - c * np.einsum("nba,nbc->nac", Sb, rec.P_mat)

    # constitutive backward through the shared SVD.
    jac_stress = np.einsum("nij,njk->nik", rec.jac_p, rec.jac_ret)
    Dtb = _svd_function_vjp(rec.U, rec.s, rec.Vt, rec.s_e, rec.jac_ret, D1b)
    Dtb += _svd_function_vjp(rec.U, rec.s, rec.Vt, rec.p_vec, jac_stress, Pb)

    # deformation update: D_trial = (I + dt C0) D0.
    F_lin = np.eye(3)[None] + dt * rec.C0
    Db0 = np.einsum("nji,njk->nik", F_lin, Dtb)
    Cb0 += dt * np.einsum("nij,nkj->nik", Dtb, rec.D0)

    return xb0, vb0, Cb0, Db0


def step_frame(
    state: SimState, field, scene: Scene, records: list | None = None
) -> SimState:
    """Advance one frame (substeps_per_frame substeps) and return a new state.

    When `records` is a list, one SubstepRecord per substep is appended so the
    adjoint can replay the frame.
    """
    p = state.particles
    table = MaterialTable.build(scene.materials, p.material_id)
    x, v, C, D = p.x.copy(), p.v.copy(), state.C.copy(), p.D.copy()
    n_sub = scene.substeps_per_frame
    for s_i in range(n_sub):
        t_sub = scene.frame_dt * (state.frame + s_i / n_sub)
        x, v, C, D, rec = substep_forward(
            x, v, C, D, p.mass, p.volume0, p.constrained, table, scene, field,
            t_sub, state.frame, record=records is not None,
        )
        if records is not None:
            records.append(rec)
    out = state.copy()
    out.particles.x = x
    out.particles.v = v
    out.particles.D = D
    out.particles.Sigma = np.einsum("nij,njk,nlk->nil", D, state.Sigma0, D)
    out.C = C
    out.frame = state.frame + 1
    out.t = scene.frame_dt * out.frame
    return out


def apply_external_force(state: SimState, field, substep_dt: float) -> None:
    """Kick unconstrained particle velocities by substep_dt * field query.

    Exposed for tests and direct use; step_frame applies the same update
    inside each substep.
    """
    f = field.query_batch(state.particles.x, state.t, state.frame)
    if not np.all(np.isfinite(f)):
        bad = int(np.argwhere(~np.isfinite(f))[0][0])
        raise SimulationError(
            f"non-finite external force at particle {bad}, position {state.particles.x[bad]}"
        )
    free = ~state.particles.constrained
    state.particles.v = state.particles.v + substep_dt * f * free[:, None]


def rollout(scene: Scene, field, frames: int, state: SimState | None = None) -> Trajectory:
    """Simulate `frames` frames and collect the frame-boundary trajectory."""
    st = state.copy() if state is not None else SimState.from_scene(scene)
    positions = [st.particles.x.copy()]
    velocities = [st.particles.v.copy()]
    for _ in range(frames):
        st = step_frame(st, field, scene)
        positions.append(st.particles.x.copy())
        velocities.append(st.particles.v.copy())
    return Trajectory(positions=np.stack(positions), velocities=np.stack(velocities))
