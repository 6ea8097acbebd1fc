"""Command-line entry point.

Subcommands: synth (scenario synthesis), recover (force recovery), resim
(re-simulation with edits), eval (metrics tables), gradcheck (adjoint vs
finite differences). Every command writes a manifest with a config snapshot,
seed, and sha256 hashes of its inputs and outputs; run directories are
self-describing.

Exit codes: 0 ok, 2 usage, 3 input, 4 divergence, 5 simulator.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import adjoint, evalmetrics, forcefield as ff, mpm, presets, recover, tracking
from .errors import (
    DivergenceError,
    ForcelensError,
    InvariantViolation,
    SceneError,
    SimulationError,
)
from .scene import (
    GroundTruthFieldSpec,
    Trajectory,
    load_scene,
    load_trajectory,
    material_lookup,
    save_scene,
    save_trajectory,
)
from .utils import sha256_file, single_threaded_blas

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_DIVERGENCE = 4
EXIT_SIMULATOR = 5


class UsageError(ForcelensError):
    pass


def _resolve_threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("FORCELENS_THREADS")
    return max(1, int(env)) if env else 1


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _read_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                    threads: int, inputs: dict, outputs: list, t0: float) -> None:
    manifest = {
        "tool": f"forcelens {__version__}",
        "command": command,
        "config": config,
        "seed": seed,
        "threads": threads,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items()},
        # output paths are run-dir relative so a run directory stays
        # self-describing when moved or copied
        "outputs": {name: {"path": name, "sha256": sha256_file(out_dir / name)} for name in outputs},
        "wall_time_s": time.perf_counter() - t0,
    }
    _write_json(out_dir / "manifest.json", manifest)


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise SceneError(f"{run_dir}: no manifest.json (not a run directory)")
    doc = _read_json(path)
    doc["_dir"] = str(run_dir)
    return doc


def _verify_hashes(manifest: dict, which: str = "outputs") -> None:
    base = Path(manifest.get("_dir", "."))
    for name, rec in manifest.get(which, {}).items():
        path = Path(rec["path"])
        if which == "outputs" and not path.is_absolute():
            path = base / path
        if not path.exists():
            raise SceneError(f"missing artifact {name}: {path}")
        if sha256_file(path) != rec["sha256"]:
            raise SceneError(f"artifact {name} hash mismatch: {path}")


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    threads = _resolve_threads(args.threads)
    if args.frames < 1:
        raise UsageError("synth: --frames must be >= 1")
    preset = presets.get_preset(args.preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = preset.build_scene()
    gt_spec = preset.build_field_spec()
    gt_field = ff.AnalyticField(gt_spec, scene.frame_dt)
    with single_threaded_blas():
        traj = mpm.rollout(scene, gt_field, args.frames)
        kp = preset.keypoint_indices()
        tracks = tracking.synth_tracks(
            traj, scene.camera, kp,
            pixel_noise=args.pixel_noise, seed=args.seed, depth_noise=args.depth_noise,
        )
    save_scene(scene, out / "scene.json")
    _write_json(out / "gt_field.json", gt_spec.to_dict())
    save_trajectory(traj, out / "trajectory.jsonl")
    tracking.save_tracks(tracks, scene.camera, out / "tracks.json")
    config = {
        "preset": preset.name,
        "frames": args.frames,
        "pixel_noise": args.pixel_noise,
        "depth_noise": args.depth_noise,
        "keypoint_indices": kp,
        "block": preset.block_config(),
        "material_type": preset.material_type,
    }
    _write_manifest(
        out, "synth", config, args.seed, threads, {},
        ["scene.json", "gt_field.json", "trajectory.jsonl", "tracks.json"], t0,
    )
    print(f"synth: wrote {args.frames}-frame scenario '{preset.name}' to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# recover
# --------------------------------------------------------------------------


def _recovery_config(args) -> recover.RecoveryConfig:
    if args.config:
        cfg = recover.RecoveryConfig.from_dict(_read_json(Path(args.config)))
    else:
        cfg = recover.RecoveryConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    return cfg


def cmd_recover(args) -> int:
    t0 = time.perf_counter()
    threads = _resolve_threads(args.threads)
    run = Path(args.run)
    synth_manifest = _load_manifest(run)
    if synth_manifest["command"] != "synth":
        raise SceneError(f"{run}: recover expects a synth run directory")
    _verify_hashes(synth_manifest)
    scene = load_scene(run / "scene.json")
    traj = load_trajectory(run / "trajectory.jsonl")
    cfg = _recovery_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.representation not in ("triplane", "kplanes", "point"):
        raise UsageError(
            f"unknown representation {args.representation!r}; valid kinds: triplane, kplanes, point"
        )

    with single_threaded_blas():
        if args.targets == "sparse":
            tracks, cam = tracking.load_tracks(run / "tracks.json")
            tracking.lift_sequence(tracks, cam)
            binding = tracking.bind_barycentric(traj.positions[0], tracks.lifted[:, 0, :])
            targets = np.stack([
                tracking.interpolate_targets(binding, tracks.lifted[:, k, :])
                for k in range(tracks.n_frames)
            ])
        elif args.targets == "dense":
            targets = traj.positions.copy()
        elif args.targets == "dense-noisy":
            targets = recover.make_noisy_dense_targets(traj, args.target_noise, seed=cfg.seed)
        else:
            raise UsageError(f"unknown target mode {args.targets!r}")
        field, report = recover.recover_sequence(scene, targets, args.representation, cfg)
        # canonical committed-rollout artifact: full replay under the final field
        replay = mpm.rollout(scene, field, targets.shape[0] - 1)

    ff.save_field(field, out / "field.json")
    _write_json(out / "recovery_report.json", report.to_json_dict())
    save_trajectory(replay, out / "recovered_trajectory.jsonl")
    tracking.save_targets(targets, out / "targets.jsonl")
    config = {
        "representation": args.representation,
        "targets": args.targets,
        "target_noise": args.target_noise,
        "recovery": cfg.to_dict(),
        "synth_run": str(run),
    }
    _write_manifest(
        out, "recover", config, cfg.seed, threads,
        {
            "scene.json": run / "scene.json",
            "trajectory.jsonl": run / "trajectory.jsonl",
            "tracks.json": run / "tracks.json",
        },
        ["field.json", "recovery_report.json", "recovered_trajectory.jsonl", "targets.jsonl"],
        t0,
    )
    frames_msg = f"{len(report.frame_reports)} frames"
    if report.any_divergence:
        print(f"recover: divergence flagged ({frames_msg}); see {out / 'recovery_report.json'}")
        return EXIT_DIVERGENCE
    print(f"recover: {args.representation} field recovered over {frames_msg} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# resim
# --------------------------------------------------------------------------


class _EditedField:
    """Wraps a recovered field with scenario edits applied.

    `scale` multiplies the queried specific force. Under per-particle force
    semantics the stored force is f = m_ref * query, so the acceleration of
    an edited particle is query * (m_ref / m_new)."""

    def __init__(self, inner, scale: float = 1.0, accel_factor: np.ndarray | None = None):
        self.inner = inner
        self.kind = inner.kind
        self.scale = scale
        self.accel_factor = accel_factor

    def query_batch(self, xs, t, frame, indices=None):
        out = self.scale * self.inner.query_batch(xs, t, frame, indices=indices)
        if self.accel_factor is not None:
            out = out * self.accel_factor[:, None]
        return out

    def frame_of(self, t):
        return self.inner.frame_of(t)


def _parse_box(text: str) -> tuple[np.ndarray, np.ndarray]:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 6:
        raise UsageError("--pin-box expects x0,y0,z0,x1,y1,z1")
    return np.asarray(vals[:3]), np.asarray(vals[3:])


def cmd_resim(args) -> int:
    t0 = time.perf_counter()
    threads = _resolve_threads(args.threads)
    run = Path(args.run)
    rec_manifest = _load_manifest(run)
    if rec_manifest["command"] != "recover":
        raise SceneError(f"{run}: resim expects a recover run directory")
    _verify_hashes(rec_manifest)
    synth_dir = Path(rec_manifest["config"]["synth_run"])
    scene = load_scene(synth_dir / "scene.json")
    field = ff.load_field(run / "field.json")
    committed = load_trajectory(run / "recovered_trajectory.jsonl")
    frames = args.frames or committed.n_frames

    edits: list[str] = []
    ref_mass = scene.particles.mass.copy()
    if args.swap_material:
        mat = material_lookup(args.swap_material)
        block = _load_manifest(synth_dir)["config"]["block"]
        from .scene import sample_block

        scene.particles = sample_block(
            mat, center=np.asarray(block["center"]),
            extent=np.asarray(block["extent"]), spacing=block["spacing"],
        )
        scene.materials = [mat]
        ref_mass = scene.particles.mass.copy()
        edits.append(f"swap-material={args.swap_material}")
    if args.mass_scale is not None:
        if args.mass_scale <= 0:
            raise UsageError("incompatible edit: --mass-scale must be > 0")
        scene.particles.mass = scene.particles.mass * args.mass_scale
        edits.append(f"mass-scale={args.mass_scale}")
    if args.field_scale is not None:
        edits.append(f"field-scale={args.field_scale}")
    if args.pin_box:
        from .scene import BoundaryCondition

        lo, hi = _parse_box(args.pin_box)
        scene.bcs.append(BoundaryCondition(kind="fixed_region", lo=lo, hi=hi))
        edits.append(f"pin-box={args.pin_box}")
    if args.add_ground:
        from .scene import BoundaryCondition

        parts = args.add_ground.split(",")
        if len(parts) != 2 or parts[1] not in ("sticky", "separate"):
            raise UsageError("--add-ground expects HEIGHT,{sticky|separate}")
        scene.bcs.append(
            BoundaryCondition(kind="ground_plane", height=float(parts[0]), mode=parts[1])
        )
        edits.append(f"add-ground={args.add_ground}")
    if args.remove_bc is not None:
        if not (0 <= args.remove_bc < len(scene.bcs)):
            raise UsageError(f"--remove-bc index {args.remove_bc} out of range")
        scene.bcs.pop(args.remove_bc)
        edits.append(f"remove-bc={args.remove_bc}")

    accel_factor = None
    if args.force_semantics == "per-particle":
        # the recovered field stays attached to the original per-particle
        # forces; editing mass changes the acceleration accordingly
        accel_factor = ref_mass / scene.particles.mass
        edits.append("force-semantics=per-particle")
    sim_field = _EditedField(
        field, scale=args.field_scale if args.field_scale is not None else 1.0,
        accel_factor=accel_factor,
    )

    scene.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with single_threaded_blas():
        traj = mpm.rollout(scene, sim_field, frames)
    save_trajectory(traj, out / "resim_trajectory.jsonl")

    metrics: dict = {"edits": edits, "frames": frames}
    if traj.positions.shape == committed.positions.shape:
        metrics["rmse_vs_committed"] = evalmetrics.trajectory_rmse(traj, committed)
    original = load_trajectory(synth_dir / "trajectory.jsonl")
    if traj.positions.shape == original.positions.shape:
        metrics["rmse_vs_original"] = evalmetrics.trajectory_rmse(traj, original)
    _write_json(out / "resim_report.json", metrics)
    config = {
        "recover_run": str(run),
        "edits": edits,
        "frames": frames,
        "force_semantics": args.force_semantics,
    }
    _write_manifest(
        out, "resim", config, rec_manifest["seed"], threads,
        {"field.json": run / "field.json", "scene.json": synth_dir / "scene.json"},
        ["resim_trajectory.jsonl", "resim_report.json"], t0,
    )
    print(f"resim: {frames} frames with edits [{', '.join(edits) or 'none'}] -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    threads = _resolve_threads(args.threads)
    run = Path(args.run)
    rec_manifest = _load_manifest(run)
    if rec_manifest["command"] != "recover":
        raise SceneError(f"{run}: eval expects a recover run directory")
    _verify_hashes(rec_manifest)
    synth_dir = Path(rec_manifest["config"]["synth_run"])
    synth_manifest = _load_manifest(synth_dir)
    _verify_hashes(synth_manifest)
    scene = load_scene(synth_dir / "scene.json")
    gt_spec = GroundTruthFieldSpec.from_dict(_read_json(synth_dir / "gt_field.json"))
    gt_field = ff.AnalyticField(gt_spec, scene.frame_dt)
    est_field = ff.load_field(run / "field.json")
    traj = load_trajectory(synth_dir / "trajectory.jsonl")
    committed = load_trajectory(run / "recovered_trajectory.jsonl")

    with single_threaded_blas():
        err = evalmetrics.field_errors(est_field, gt_field, traj)
        rmse = evalmetrics.trajectory_rmse(committed, traj)

    scenario = synth_manifest["config"]["preset"]
    representation = rec_manifest["config"]["representation"]
    report = {
        "scenario": scenario,
        "representation": representation,
        "mag_error_pct": err.mean_magnitude_error_pct,
        "dir_error_deg": err.mean_direction_error_deg,
        "traj_rmse_m": rmse,
        "force_errors": err.to_json_dict(),
    }
    out = Path(args.out) if args.out else run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", report)
    _write_manifest(
        out, "eval", {"recover_run": str(run)}, rec_manifest["seed"], threads,
        {"field.json": run / "field.json", "gt_field.json": synth_dir / "gt_field.json"},
        ["eval_report.json"], t0,
    )
    header = ("scenario", "representation", "Mag. Error (%)", "Dir. Error (deg)", "Traj. RMSE (m)")
    row = (
        scenario, representation,
        f"{err.mean_magnitude_error_pct:.2f}",
        f"{err.mean_direction_error_deg:.2f}",
        f"{rmse:.3e}",
    )
    widths = [max(len(h), len(r)) for h, r in zip(header, row)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    print("  ".join(r.ljust(w) for r, w in zip(row, widths)))
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    threads = _resolve_threads(args.threads)
    if args.config:
        cfg = adjoint.GradCheckConfig.from_dict(_read_json(Path(args.config)))
    else:
        cfg = adjoint.GradCheckConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.workers = threads
    if args.corrupt:
        cfg.corrupt_sign = True
    report = adjoint.gradient_check(cfg)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck_report.json", report.to_json_dict())
        _write_manifest(out, "gradcheck", cfg.to_dict(), cfg.seed, threads, {},
                        ["gradcheck_report.json"], t0)
    worst = max(report.entries, key=lambda e: e["rel_err"], default=None)
    if worst:
        print(
            f"gradcheck: {report.n_checked} params checked, "
            f"{report.fraction_ok * 100:.1f}% ok, worst rel err "
            f"{worst['rel_err']:.3e} at index {worst['index']}"
        )
    if report.vacuous:
        print("gradcheck: WARNING vacuous pass (empty index set)")
    print(f"gradcheck: {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else 1


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="forcelens",
        description="Differentiable MPM force recovery: synthesize, recover, re-simulate, evaluate.",
    )
    p.add_argument("--version", action="version", version=f"forcelens {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a scenario from a preset")
    sp.add_argument("--preset", required=True, help=f"one of: {', '.join(presets.preset_names())}")
    sp.add_argument("--frames", type=int, default=12)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--pixel-noise", type=float, default=0.0, help="track noise std, px")
    sp.add_argument("--depth-noise", type=float, default=0.0, help="relative depth noise std")
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    rp = sub.add_parser("recover", help="recover the force field from a synth run")
    rp.add_argument("--run", required=True, help="synth run directory")
    rp.add_argument("--out", required=True)
    rp.add_argument("--representation", default="triplane",
                    choices=["triplane", "kplanes", "point"])
    rp.add_argument("--targets", default="sparse",
                    choices=["sparse", "dense", "dense-noisy"],
                    help="sparse tracks (default) or dense per-particle targets")
    rp.add_argument("--target-noise", type=float, default=0.05,
                    help="dense-noisy: noise std as a fraction of per-frame motion")
    rp.add_argument("--config", default=None, help="RecoveryConfig JSON path")
    rp.add_argument("--iterations", type=int, default=None)
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--threads", type=int, default=None)
    rp.set_defaults(func=cmd_recover)

    xp = sub.add_parser("resim", help="re-simulate under the recovered field with edits")
    xp.add_argument("--run", required=True, help="recover run directory")
    xp.add_argument("--out", required=True)
    xp.add_argument("--frames", type=int, default=None)
    xp.add_argument("--swap-material", default=None)
    xp.add_argument("--mass-scale", type=float, default=None)
    xp.add_argument("--field-scale", type=float, default=None)
    xp.add_argument("--pin-box", default=None, help="x0,y0,z0,x1,y1,z1 fixed region")
    xp.add_argument("--add-ground", default=None, help="HEIGHT,{sticky|separate}")
    xp.add_argument("--remove-bc", type=int, default=None)
    xp.add_argument("--force-semantics", default="specific",
                    choices=["specific", "per-particle"])
    xp.add_argument("--threads", type=int, default=None)
    xp.set_defaults(func=cmd_resim)

    ep = sub.add_parser("eval", help="evaluate a recover run against ground truth")
    ep.add_argument("--run", required=True, help="recover run directory")
    ep.add_argument("--out", default=None)
    ep.add_argument("--threads", type=int, default=None)
    ep.set_defaults(func=cmd_eval)

    gp = sub.add_parser("gradcheck", help="adjoint vs finite-difference check")
    gp.add_argument("--config", default=None, help="GradCheckConfig JSON path")
    gp.add_argument("--seed", type=int, default=None)
    gp.add_argument("--corrupt", action="store_true",
                    help="test hook: flip one analytic gradient sign (must fail)")
    gp.add_argument("--out", default=None)
    gp.add_argument("--threads", type=int, default=None)
    gp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (SimulationError, ForcelensError) as exc:
        print(f"simulator error: {exc}", file=sys.stderr)
        return EXIT_SIMULATOR


if __name__ == "__main__":
    sys.exit(main())
