"""Command-line entry point: run, simulate, rotavg, transavg, evaluate.

Exit codes: 0 success, 1 input/format/configuration error, 2 a solver hit
its iteration cap (outputs are still written and the report says which).
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .backend import Backend, BackendConfig, Frame
from .config import RunConfig, describe_keys
from .correspond import GridConfig
from .errors import ConfigError, FormatError, InvalidSpec, RotSlamError
from .evaluate import Trajectory, evaluate_rmse
from .geometry import CameraIntrinsics
from .relrot import relative_motion
from .rotavg import RotAvgParams, RotEdge, RotGraph, rotation_averaging
from .simulate import EdgeMeasurement, SceneSpec, simulate_scene
from .transavg import AdmmParams, translation_averaging

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


def rotavg_params(cfg: RunConfig) -> RotAvgParams:
    return RotAvgParams(irls_tol=cfg["rotavg.irls_tol"], irls_max_iters=cfg["rotavg.irls_max_iters"],
                        l1_max_iters=cfg["rotavg.l1_max_iters"], weight_floor=cfg["rotavg.weight_floor"],
                        alpha_cap=math.radians(cfg["rotavg.alpha_cap_deg"]),
                        prune_rounds=cfg["rotavg.prune_rounds"])


def admm_params(cfg: RunConfig) -> AdmmParams:
    return AdmmParams(beta=cfg["transavg.beta"], primal_tol=cfg["transavg.primal_tol"],
                      dual_tol=cfg["transavg.dual_tol"], max_iters=cfg["transavg.max_iters"],
                      polish=cfg["transavg.polish"])


def backend_config(cfg: RunConfig) -> BackendConfig:
    return BackendConfig(
        keyframe_interval=cfg["backend.keyframe_interval"], window_overlap=cfg["backend.window_overlap"],
        loop_dist_frac=cfg["backend.loop_dist_frac"], loop_inlier_thresh=cfg["backend.loop_inlier_thresh"],
        loop_exclusion_intervals=cfg["backend.loop_exclusion_intervals"],
        loop_weight=cfg["backend.loop_weight"], refine_rotations=cfg["backend.refine_rotations"],
        max_step_disagreement=cfg["backend.max_step_disagreement"],
        rotavg=rotavg_params(cfg), admm=admm_params(cfg))


def scene_spec(cfg: RunConfig) -> SceneSpec:
    K = CameraIntrinsics(cfg["camera.fx"], cfg["camera.fy"], cfg["camera.cx"], cfg["camera.cy"])
    return SceneSpec(
        shape=cfg["simulate.shape"], n_frames=cfg["simulate.frames"], n_points=cfg["simulate.points"],
        size=cfg["simulate.size"], level=cfg["simulate.level"], covis_span=cfg["simulate.covis_span"],
        rotation_noise=math.radians(cfg["simulate.rotation_noise_deg"]),
        direction_noise=math.radians(cfg["simulate.direction_noise_deg"]),
        bearing_noise=math.radians(cfg["simulate.bearing_noise_deg"]),
        outlier_fraction=cfg["simulate.outlier_fraction"], loop_radius=cfg["simulate.loop_radius"],
        frame_dt=cfg["backend.frame_dt"], seed=cfg["simulate.seed"], intrinsics=K,
        image_w=cfg["correspond.image_w"], image_h=cfg["correspond.image_h"])


def _is_pose_graph(path: Path) -> bool:
    if path.suffix.lower() == ".g2o":
        return True
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.lstrip().startswith("#"):
                return line.split()[0].startswith(("VERTEX", "EDGE"))
    return False


def measurements_from_correspondences(corrs: dict, size, cfg: RunConfig, log=None) -> dict:
    """Relative motions for every matched frame pair; unsolvable pairs are skipped."""
    K = CameraIntrinsics(cfg["camera.fx"], cfg["camera.fy"], cfg["camera.cx"], cfg["camera.cy"])
    grid = GridConfig(cfg["correspond.grid_rows"], cfg["correspond.grid_cols"], size[0], size[1])
    out = {}
    for (i, j), c in sorted(corrs.items()):
        try:
            m = relative_motion(c, K, grid, cfg["relrot.independence_tol"], cfg["relrot.explain_ratio"])
        except (RotSlamError, ValueError, np.linalg.LinAlgError) as exc:
            if log is not None:
                log.append(f"SKIP pair={i}-{j} reason={type(exc).__name__}")
            continue
        out[(i, j)] = EdgeMeasurement(i, j, m.rotation, m.direction if m.reliable else None, len(c))
    return out


def load_measurements(path: Path, cfg: RunConfig, log=None):
    """(frame ids, {(i, j): EdgeMeasurement}) from a pose graph or match file."""
    if _is_pose_graph(path):
        vertices, edges = io.read_g2o(path)
        meas = {(e.i, e.j): e for e in edges}
        ids = set(vertices)
    else:
        corrs, size = io.read_correspondences(path)
        meas = measurements_from_correspondences(corrs, size, cfg, log)
        ids = set()
        for i, j in corrs:
            ids.update((i, j))
    for i, j in meas:
        ids.update((i, j))
    if not ids:
        raise FormatError(path, 0, "no frames in input")
    return sorted(ids), meas


def _b(v: bool) -> str:
    return "true" if v else "false"


def _g(v: float) -> str:
    return f"{v:.6g}"


def format_report(res, timing: bool = True) -> str:
    lines = ["# rotslam run report"]
    for k, w in enumerate(res.windows):
        fields = [f"index={k}", f"start={w.start}", f"end={w.end}", f"frames={w.n_frames}",
                  f"edges={w.n_edges}"]
        if timing:
            fields += [f"rot_s={w.rot_time:.4f}", f"trans_s={w.trans_time:.4f}",
                       f"total_s={w.total_time:.4f}"]
        cert = w.certificate
        fields += [f"replaced={len(w.replaced)}", f"prune_rounds={w.prune_rounds}",
                   f"certified={_b(bool(cert and cert.optimal))}",
                   f"max_alpha={_g(cert.max_alpha) if cert else 'nan'}",
                   f"alpha_max={_g(cert.alpha_max) if cert else 'nan'}",
                   f"rot_converged={_b(w.rot_converged)}", f"trans_converged={_b(w.trans_converged)}",
                   f"admm_iters={w.admm_iterations}", f"status={'fallback' if w.failed else 'ok'}"]
        lines.append("WINDOW " + " ".join(fields))
        for i, j, a in w.replaced:
            lines.append(f"PRUNE window={k} edge={i}-{j} alpha_deg={_g(math.degrees(a))}")
        if w.failed:
            lines.append(f"FALLBACK window={k} reason={w.reason.replace(' ', '_')}")
    for lp in res.loops:
        c = lp.candidate
        lines.append(f"LOOP s={c.s} t={c.t} distance={_g(c.distance)} inliers={c.inlier_count} "
                     f"accepted={_b(lp.accepted)} gap_before={_g(lp.gap_before)} "
                     f"gap_after={_g(lp.gap_after)} converged={_b(lp.converged)}")
    lines.append(f"SUMMARY frames={len(res.frames)} windows={len(res.windows)} "
                 f"fallback_windows={sum(w.failed for w in res.windows)} loops={len(res.loops)} "
                 f"low_confidence_frames={len(res.low_confidence)} converged={_b(res.converged)}")
    return "\n".join(lines) + "\n"


def cmd_run(args, cfg: RunConfig) -> int:
    log = []
    ids, meas = load_measurements(Path(args.input), cfg, log)
    dt = cfg["backend.frame_dt"]
    frames = [Frame(f, f * dt) for f in ids]
    res = Backend(frames, meas, backend_config(cfg)).run()
    traj = res.trajectory()
    io.write_trajectory(args.output, traj, cfg["output.format"])
    report = Path(args.report) if args.report else Path(args.output).with_suffix(".report.txt")
    text = format_report(res, timing=not args.no_timing)
    if log:
        text = text.replace("SUMMARY", "\n".join(log) + "\nSUMMARY", 1)
    report.write_text(text, encoding="utf-8")
    if args.plot:
        from .plotting import plot_trajectories, plot_window_times

        stem = Path(args.output).with_suffix("")
        ref = None
        if args.groundtruth:
            gt = io.read_trajectory(args.groundtruth, cfg["output.format"], dt)
            al = evaluate_rmse(gt, traj)
            ref = al.apply(gt.positions)
        plot_trajectories(f"{stem}.trajectory.png", traj.positions, ref)
        plot_window_times(f"{stem}.timing.png", [w.rot_time for w in res.windows],
                          [w.trans_time for w in res.windows])
    print(f"frames {len(ids)} windows {len(res.windows)} loops {len(res.loops)} "
          f"converged {_b(res.converged)}")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_simulate(args, cfg: RunConfig) -> int:
    try:
        scene = simulate_scene(scene_spec(cfg))
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = Trajectory(scene.timestamps, scene.positions, scene.rotations)
    io.write_trajectory(out / "groundtruth.txt", gt, cfg["output.format"])
    if scene.spec.level == "backend":
        vertices = {k: (scene.positions[k], scene.rotations[k]) for k in range(len(scene.positions))}
        io.write_g2o(out / "graph.g2o", vertices, scene.edges)
        print(f"wrote {out / 'graph.g2o'} ({len(scene.edges)} edges)")
    else:
        io.write_correspondences(out / "correspondences.txt", scene.correspondences,
                                 scene.spec.image_w, scene.spec.image_h)
        print(f"wrote {out / 'correspondences.txt'} ({len(scene.correspondences)} pairs)")
    return EXIT_OK


def cmd_rotavg(args, cfg: RunConfig) -> int:
    vertices, edges = io.read_g2o(args.input)
    ids = sorted(set(vertices) | {e.i for e in edges} | {e.j for e in edges})
    gauge = ids[0]
    start = vertices[gauge][1] if gauge in vertices else np.eye(3)
    graph = RotGraph(ids, [RotEdge(e.i, e.j, e.rotation.copy()) for e in edges], gauge, {gauge: start})
    res = rotation_averaging(graph, rotavg_params(cfg), prune=cfg["rotavg.prune_rounds"] > 0)
    io.write_rotations(args.output, res.rotations)
    lines = []
    for rep in res.reports:
        lines.append(f"ROUND iteration={rep.iteration} alpha_max={_g(rep.alpha_max)} "
                     f"replaced={len(rep.replaced_edges)}")
        for i, j, a in rep.replaced_edges:
            lines.append(f"REPLACED edge={i}-{j} alpha_deg={_g(math.degrees(a))}")
    c = res.certificate
    lines.append(f"CERTIFICATE optimal={_b(c.optimal)} max_alpha={_g(c.max_alpha)} "
                 f"alpha_max={_g(c.alpha_max)} last_update={_g(c.last_update)}"
                 + (f" note={c.note.replace(' ', '_')}" if c.note else ""))
    lines.append(f"SUMMARY vertices={len(ids)} edges={len(edges)} replaced={res.replaced_count} "
                 f"converged={_b(res.converged)}")
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_transavg(args, cfg: RunConfig) -> int:
    vertices, edges = io.read_g2o(args.input)
    if args.rotations:
        rotations = io.read_rotations(args.rotations)
    else:
        rotations = {v: R for v, (_, R) in vertices.items()}
    ids = sorted({e.i for e in edges} | {e.j for e in edges})
    missing = [f for f in ids if f not in rotations]
    if missing:
        raise ConfigError(f"no rotation for frames {missing[:5]}")
    dirs = {(e.i, e.j): rotations[e.i].T @ e.direction for e in edges if e.direction is not None}
    res = translation_averaging(ids, dirs, admm_params(cfg))
    X = np.array([res.positions[f] for f in ids])
    X -= X[0]
    steps = np.linalg.norm(np.diff(X, axis=0), axis=1)
    if len(steps) and steps.mean() > 0:
        X /= steps.mean()
    dt = cfg["backend.frame_dt"]
    traj = Trajectory(np.array(ids) * dt, X, np.array([rotations[f] for f in ids]))
    io.write_trajectory(args.output, traj, cfg["output.format"])
    a = res.admm
    print(f"ADMM iterations={a.iterations} converged={_b(a.converged)} "
          f"primal_residual={_g(a.primal_residual)} objective={_g(a.objective)}")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_evaluate(args, cfg: RunConfig) -> int:
    fmt = cfg["output.format"]
    dt = cfg["backend.frame_dt"]
    est = io.read_trajectory(args.estimate, fmt, dt)
    gt = io.read_trajectory(args.groundtruth, fmt, dt)
    al = evaluate_rmse(est, gt)
    print(f"RMSE {al.rmse:.6f}")
    print(f"scale {al.scale:.6f}")
    print(f"pairs {len(al.pairs)}")
    if args.aligned:
        aligned = Trajectory(est.timestamps, al.apply(est.positions), est.rotations)
        io.write_trajectory(args.aligned, aligned, fmt)
    if args.plot:
        from .plotting import plot_trajectories

        plot_trajectories(args.plot, al.apply(est.positions[al.pairs[:, 0]]),
                          gt.positions[al.pairs[:, 1]], title=f"RMSE {al.rmse:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective configuration and exit")
    p = argparse.ArgumentParser(
        prog="rotslam", description="Rotation-averaging SLAM back-end.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="configuration keys:\n" + describe_keys())
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run the keyframed back-end on a match file or pose graph")
    r.add_argument("input", help="correspondence file or .g2o pose graph")
    r.add_argument("-o", "--output", required=True, help="trajectory output path")
    r.add_argument("--report", help="run report path (default: <output>.report.txt)")
    r.add_argument("--no-timing", action="store_true", help="omit timings so the report is reproducible")
    r.add_argument("--plot", action="store_true", help="also render PNG figures next to the output")
    r.add_argument("--groundtruth", help="reference trajectory drawn in the figure")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic scene")
    s.add_argument("-o", "--out-dir", required=True, help="directory for the scene files")
    s.set_defaults(func=cmd_simulate)

    ra = sub.add_parser("rotavg", parents=[common], help="rotation averaging on a pose graph")
    ra.add_argument("input", help=".g2o pose graph")
    ra.add_argument("-o", "--output", required=True, help="rotations output (id qx qy qz qw)")
    ra.add_argument("--report", help="also write the prune/certificate report here")
    ra.set_defaults(func=cmd_rotavg)

    ta = sub.add_parser("transavg", parents=[common], help="translation averaging with known rotations")
    ta.add_argument("input", help=".g2o pose graph (edge directions)")
    ta.add_argument("--rotations", help="rotations file; defaults to the graph's vertex rotations")
    ta.add_argument("-o", "--output", required=True, help="trajectory output path")
    ta.set_defaults(func=cmd_transavg)

    ev = sub.add_parser("evaluate", parents=[common], help="similarity-aligned RMSE between trajectories")
    ev.add_argument("estimate")
    ev.add_argument("groundtruth")
    ev.add_argument("--aligned", help="write the aligned estimate here")
    ev.add_argument("--plot", help="render the aligned trajectories to this PNG")
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        return args.func(args, cfg)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, OSError, RotSlamError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
