"""Command-line entry points for dataset generation, benchmarking, and serving."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench, detect, executor, grasp, hands, instruct, scene, server


def _cmd_gen_dataset(args) -> int:
    quota = bench.DatasetQuota()
    if args.scale != 1.0:
        quota = quota.scaled(args.scale)
    ds = bench.build_dataset(args.seed, quota)
    bench.save_dataset(ds, args.out)
    counts = ds.counts()
    print(f"wrote {counts['cabinets']} cabinets / {counts['parts']} parts to {args.out}")
    print(f"fingerprint {ds.fingerprint()[:16]}")
    if args.dump_images:
        n = bench.dump_images(ds, os.path.join(args.out, "images"),
                              renders_per_cabinet=args.renders_per_cabinet)
        print(f"dumped {n} training observations")
    return 0


def _cmd_instruct(args) -> int:
    cab = scene.load_scene(args.scene)
    try:
        for ins in instruct.describe_parts(cab):
            print(f"{ins.part_id}\t{ins.text}")
    except instruct.InvalidCabinet:
        print("INVALID")
    return 0


def _cmd_grasp_plan(args) -> int:
    import json

    cab = scene.load_scene(args.scene)
    model = hands.hand_spec(args.hand)
    cuboid = grasp.HandleCuboid.from_part(cab.part(args.part))
    try:
        plan = grasp.search_grasp(model, cuboid, args.mu)
    except grasp.NoGrasp as e:
        print(f"NOGRASP: {e}", file=sys.stderr)
        return 1
    print(json.dumps({
        "hand": args.hand,
        "part": args.part,
        "pregrasp": executor.hand_state_dict(plan.pregrasp),
        "final_joints": [float(v) for v in plan.final_joints],
        "contacts": [{"finger": c.finger, "point": [float(v) for v in c.point],
                      "normal": [float(v) for v in c.normal]} for c in plan.contacts],
        "closure_quality": plan.closure_quality,
    }, indent=1, sort_keys=True))
    return 0


def _noise_from_args(args) -> detect.NoiseConfig:
    return detect.NoiseConfig(sigma_px=args.sigma, p_miss=args.p_miss, p_fp=args.p_fp)


def _cmd_run_bench(args) -> int:
    ds = bench.load_dataset(args.dataset)
    if args.detector == "oracle":
        spec = bench.DetectorSpec("oracle", _noise_from_args(args))
    else:
        spec = bench.DetectorSpec.parse(args.detector)
    hand_kinds = args.hands.split(",")
    table = bench.run_benchmark(ds, hand_kinds, spec, executor.ExecConfig(),
                                split=args.split, jobs=args.jobs, out_dir=args.out)
    if args.out:
        bench.write_report(table, args.out)
    sys.stdout.write(bench.report(table, "text").decode())
    return 0


def _cmd_grasp_eval(args) -> int:
    ds = bench.load_dataset(args.dataset)
    table = bench.grasp_eval(ds, args.hands.split(","), executor.ExecConfig(),
                             split=args.split, jobs=args.jobs, out_dir=args.out)
    if args.out:
        bench.write_report(table, args.out)
    sys.stdout.write(bench.report(table, "text").decode())
    return 0


def _cmd_report(args) -> int:
    with open(os.path.join(args.dir, "metrics.csv"), "rb") as f:
        table = bench.MetricsTable.from_csv(f.read())
    if args.csv:
        sys.stdout.write(table.to_csv().decode())
    else:
        sys.stdout.write(table.to_text().decode())
    paths = bench.write_report(table, args.dir, figures=not args.no_figures)
    print("\n".join(f"wrote {p}" for p in paths), file=sys.stderr)
    return 0


def _cmd_serve(args) -> int:
    ds = bench.load_dataset(args.dataset)
    bind = args.bind or os.environ.get("OPEND_BIND", "127.0.0.1:7480")
    srv = server.serve(bind, ds, executor.ExecConfig(), transport=args.transport)
    host, port = srv.address
    print(f"serving {len(ds.instructions)} instructions on {host}:{port} ({args.transport})")
    srv.serve_forever()
    return 0


def _cmd_replay(args) -> int:
    ds = bench.load_dataset(args.dataset) if args.dataset else None
    try:
        result = server.replay(args.log, ds)
    except (server.LogCorrupt, server.SceneMismatch) as e:
        print(f"REPLAY FAILED: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"success={result.success} open_ratio={result.open_ratio:.4f} failure={result.failure}")
    return 0


def _cmd_render_scene(args) -> int:
    from . import camera

    cab = scene.load_scene(args.scene)
    pose = camera.place_camera(cab, args.seed)
    obs = camera.render(pose, cab, args.seed + 1)
    camera.save_observation(obs, args.out)
    print(f"wrote {args.out}.png / .depth.f32 / .camera.json")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="opend",
                                 description="cabinet-opening benchmark toolkit")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-dataset", help="build the seeded cabinet dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=1.0, help="scale the split quotas")
    p.add_argument("--dump-images", action="store_true")
    p.add_argument("--renders-per-cabinet", type=int, default=12)
    p.set_defaults(fn=_cmd_gen_dataset)

    p = sub.add_parser("instruct", help="print part descriptions for a scene file")
    p.add_argument("scene")
    p.set_defaults(fn=_cmd_instruct)

    p = sub.add_parser("grasp-plan", help="plan a grasp for one part")
    p.add_argument("scene")
    p.add_argument("part", type=int)
    p.add_argument("--hand", default=hands.FRANKA, choices=hands.HAND_KINDS)
    p.add_argument("--mu", type=float, default=grasp.DEFAULT_MU)
    p.set_defaults(fn=_cmd_grasp_plan)

    p = sub.add_parser("run-bench", help="run the episodic benchmark")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hands", default=hands.FRANKA)
    p.add_argument("--detector", default="oracle", help="oracle or plugin:HOST:PORT")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--p-miss", type=float, default=0.0)
    p.add_argument("--p-fp", type=float, default=0.0)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_run_bench)

    p = sub.add_parser("grasp-eval", help="ground-truth-position grasp protocol")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hands", default=",".join(hands.HAND_KINDS))
    p.add_argument("--split", default=None, choices=(None, "train", "test"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_grasp_eval)

    p = sub.add_parser("report", help="re-render report files from metrics.csv")
    p.add_argument("dir")
    p.add_argument("--csv", action="store_true", help="print CSV instead of text")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("serve", help="serve live sessions for agents and teleop")
    p.add_argument("--dataset", required=True)
    p.add_argument("--bind", default=None, help="host:port (or set OPEND_BIND)")
    p.add_argument("--transport", default="tcp", choices=("tcp", "ws"))
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("replay", help="re-execute a trajectory log")
    p.add_argument("log")
    p.add_argument("--dataset", default=None)
    p.set_defaults(fn=_cmd_replay)

    p = sub.add_parser("render-scene", help="render one observation for a scene file")
    p.add_argument("scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_render_scene)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
