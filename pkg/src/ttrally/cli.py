"""Command-line entry points.

Every command takes an explicit ``--seed`` and writes it into its output
header, so any artifact can be regenerated byte-for-byte. Exit codes: 0 on
success, 2 for bad input or usage, 3 when processing fails on valid input.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from . import anticipate, control, pipeline, synth
from .core import Point, TableGeometry, dataset_stats
from .errors import ParseError, SchemaError, TTRallyError, VersionError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILURE = 3


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    track, _, _ = synth.generate_scene(
        rng,
        fps=args.fps,
        n_hits=args.hits,
        noise_px=args.noise_px,
        video_id=f"synth-{args.seed}",
        seed=args.seed,
    )
    pipeline.write_track(track, args.out)
    print(f"wrote {args.out} seed={args.seed} frames={len(track.frames)}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    track = pipeline.load_track(args.track)
    camera, rms = pipeline.calibrate_from_track(track, TableGeometry())
    lines = [f"camera-v1 seed={track.header.seed}"]
    i = camera.intrinsics
    lines.append(
        f"fx={float(i.fx)!r} fy={float(i.fy)!r}"
        f" cx={float(i.cx)!r} cy={float(i.cy)!r}"
    )
    for row in camera.extrinsics.r:
        lines.append("rot " + " ".join(repr(float(v)) for v in row))
    lines.append("trans " + " ".join(repr(float(v)) for v in camera.extrinsics.t))
    lines.append(f"rms_px={float(rms)!r}")
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    track = pipeline.load_track(args.track)
    config = pipeline.PipelineConfig(mse_threshold=args.mse_threshold)
    recon, _ = pipeline.reconstruct_point(track, config=config)
    pipeline.write_reconstruction(recon, args.out)
    print(f"wrote {args.out} seed={recon.seed}")
    return EXIT_OK


def cmd_stats(args) -> int:
    recon = pipeline.read_reconstruction(args.recon)
    points = [
        Point(
            frames=p.frame3d_for_ego(0),
            hits=[h.frame for h in p.hits],
            fps=recon.fps,
            point_id=p.point_id,
        )
        for p in recon.points
    ]
    stats = dataset_stats(points, recon.table)
    lines = [
        f"stats-v1 seed={recon.seed}",
        f"mean_speed={stats.mean_speed!r}",
        f"speed_p10={stats.speed_p10!r}",
        f"speed_p90={stats.speed_p90!r}",
        f"mean_inter_hit_time={stats.mean_inter_hit_time!r}",
    ]
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_conformal(args) -> int:
    study = anticipate.run_conformal_study(
        seed=args.seed,
        n_cal=args.n_cal,
        n_test=args.n_test,
        alpha=args.alpha,
    )
    if args.out:
        anticipate.write_calibration(args.out, study.calib, seed=args.seed)
    lines = [f"conformal-study seed={args.seed} alpha={args.alpha!r}"]
    for h in sorted(study.coverage.joint):
        lines.append(
            f"horizon={h!r} joint_coverage={study.coverage.joint[h]!r}"
            f" mean_width={study.widths[h]!r}"
        )
    lines.append(
        f"extreme_bias={study.bias.fraction_correct!r} n={study.bias.n_extreme}"
    )
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    params = control.SimParams(lam=args.lam, lead_time=args.lead_time, alpha=args.alpha)
    rows = control.run_experiment(
        seed=args.seed, n_episodes=args.episodes, base_params=params
    )
    if args.out:
        control.write_results(args.out, rows, seed=args.seed)
    for r in rows:
        print(
            f"{r.strategy} lam={r.lam!r} lead={r.lead_time!r}"
            f" return_rate={r.return_rate!r} deviation={r.mean_deviation!r}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttrally", description="Monocular rally reconstruction and anticipation."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic track file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hits", type=int, default=4)
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="calibrate the camera from a track file")
    p.add_argument("--track", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reconstruct", help="reconstruct a rally from a track file")
    p.add_argument("--track", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mse-threshold", type=float, default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("stats", help="dataset statistics from a reconstruction file")
    p.add_argument("--recon", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("conformal", help="calibrate and evaluate prediction regions")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--n-cal", type=int, default=2500)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_conformal)

    p = sub.add_parser("simulate", help="run the simulated returner experiment")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--lam", dest="lam", type=float, default=0.1)
    p.add_argument("--lead-time", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, SchemaError, VersionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TTRallyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
