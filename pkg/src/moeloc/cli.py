"""Command-line surface: synth, train, eval, export, report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training
divergence. Every diagnostic is a single line on stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .io import (
    DataError,
    UsageError,
    config_to_trainconfig,
    load_checkpoint,
    load_config,
    load_dataset,
    load_metrics,
    localization_metrics,
    make_report_plot,
    pack_stack,
    render_metrics,
    report_csv,
    save_checkpoint,
    save_dataset,
    save_history_csv,
    save_metrics,
    split_views,
    unpack_stack,
)

STAGE_ORDER = ("experts", "gate", "joint", "render")
LOCALIZE_STAGES = ("experts", "gate", "joint")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="moeloc",
        description="Mixture-of-experts relocalization pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[])

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("stage", choices=STAGE_ORDER)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[])

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    ev = p.add_subparsers(dest="what", required=True)
    for what in ("loc", "render"):
        q = ev.add_parser(what)
        q.add_argument("--ckpt", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--report", required=True)
        q.add_argument("--split", choices=("map", "query"),
                       default="query" if what == "loc" else "map")

    p = sub.add_parser("export", help="export artifacts")
    ex = p.add_subparsers(dest="what", required=True)
    q = ex.add_parser("splats")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--frame", type=int, required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--split", choices=("map", "query"), default="map")

    p = sub.add_parser("report", help="summary charts from metrics files")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--plot", required=True)
    return parser


def _cmd_synth(args):
    from .synth import TrajectorySpec, build_dataset, generate_scene

    cfg = load_config(args.config, args.overrides)
    s = cfg["synth"]
    scene = generate_scene(
        num_regions=s["regions"],
        points_per_region=s["points_per_region"],
        separation=s["separation"],
        seed=s["scene_seed"],
    )
    res = tuple(s["resolution"])
    rad = tuple(s["radius_range"])
    train = build_dataset(
        scene,
        TrajectorySpec(frames_per_region=s["frames_per_region"],
                       radius_range=rad, resolution=res),
        seed=s["train_seed"],
    )
    query = build_dataset(
        scene,
        TrajectorySpec(frames_per_region=s["query_frames_per_region"],
                       radius_range=rad, resolution=res),
        seed=s["query_seed"],
    )
    views = train + query
    splits = ["map"] * len(train) + ["query"] * len(query)
    manifest = save_dataset(views, args.out, splits, image_format=s["image_format"])
    save_metrics(
        {"schema": "moeloc.scene/1", "diameter_m": float(scene.diameter),
         "regions": int(scene.num_regions), "config": cfg},
        Path(args.out) / "scene.json",
    )
    print(f"wrote {len(train)} map + {len(query)} query frames to {manifest}")
    return 0


def _load_stack_for(ckpt_dir, expect_stage):
    arrays, meta = load_checkpoint(ckpt_dir, expect_stage=expect_stage)
    config = config_to_trainconfig(meta["config"], meta["stage"])
    return unpack_stack(arrays, config), meta


def _cmd_train(args):
    from .trainer import (
        cluster_scene,
        joint_finetune,
        pretrain_experts,
        pretrain_gate,
        train_render_head,
    )

    cfg = load_config(args.config, args.overrides)
    tc = config_to_trainconfig(cfg, args.stage)
    views, splits = load_dataset(args.data)
    mapped = split_views(views, splits, "map")
    if not mapped:
        raise DataError(f"{args.data} holds no map-split frames")
    out = Path(args.out)
    meta = {"stage": args.stage, "seed": tc.seed, "config": cfg}
    t0 = time.perf_counter()

    if args.stage == "experts":
        assignment = cluster_scene([v.pose for v in mapped], tc.num_experts, seed=tc.seed)
        encoder, bank, rep = pretrain_experts(mapped, assignment, tc)
        from .gating import RouterState

        router = RouterState(
            in_dim=tc.descriptor_dim, num_experts=tc.num_experts,
            hidden=tuple(tc.router_hidden), gamma=tc.gamma, eta=tc.eta,
            seed=tc.seed,
        )
        upsampler = head = None
    else:
        prev = STAGE_ORDER[STAGE_ORDER.index(args.stage) - 1]
        prev_dir = out / prev
        if not prev_dir.exists():
            raise DataError(
                f"train {args.stage} needs the {prev} checkpoint at {prev_dir}"
            )
        (encoder, router, bank, upsampler, head), _ = _load_stack_for(prev_dir, prev)
        if args.stage == "gate":
            rep = pretrain_gate(mapped, encoder, bank, router, tc)
        elif args.stage == "joint":
            rep = joint_finetune(mapped, encoder, bank, router, tc)
        else:
            upsampler, head, rep = train_render_head(mapped, encoder, bank, router, tc)

    wall = time.perf_counter() - t0
    stage_dir = out / args.stage
    save_checkpoint(stage_dir, pack_stack(encoder, router, bank, upsampler, head), meta)
    save_history_csv(rep["history"], stage_dir / "log.csv")
    line = f"stage {args.stage} done in {wall:.1f}s -> {stage_dir}"
    if "final_loss" in rep:
        line += f" final_loss={np.array2string(np.asarray(rep['final_loss']), precision=4)}"
    if "accuracy" in rep:
        line += f" accuracy={rep['accuracy']:.3f}"
    if "final_psnr" in rep:
        line += f" final_psnr={rep['final_psnr']:.2f}dB"
    print(line)
    return 0


def _cmd_eval_loc(args):
    from .localize import (
        LocalizationReport,
        activated_map_size,
        build_report,
        localize_frame,
    )

    (encoder, router, bank, _, _), meta = _load_stack_for(args.ckpt, LOCALIZE_STAGES)
    views, splits = load_dataset(args.data)
    frames = split_views(views, splits, args.split)
    if not frames:
        raise DataError(f"{args.data} holds no {args.split}-split frames")
    eval_cfg = meta["config"].get("eval", {})
    seed = int(eval_cfg.get("seed", 100))
    threshold = float(eval_cfg.get("threshold_px", 10.0))
    t0 = time.perf_counter()
    estimates = [
        localize_frame(v.image, encoder, router, bank, v.intrinsics,
                       threshold_px=threshold, seed=seed + i)
        for i, v in enumerate(frames)
    ]
    wall = time.perf_counter() - t0
    sizes = activated_map_size(encoder, router, bank)
    if any(e.success for e in estimates):
        report = build_report(
            estimates, [v.pose for v in frames],
            activated_map_bytes=sizes["activated"],
        )
    else:
        # An untrained stack fails every frame; report that rather than crash.
        report = LocalizationReport(
            translation_cm=np.full(len(frames), np.inf),
            rotation_deg=np.full(len(frames), np.inf),
            median_translation_cm=float("inf"),
            median_rotation_deg=float("inf"),
            failure_rate=1.0,
            frames=len(frames),
            activated_map_bytes=sizes["activated"],
        )
    doc = localization_metrics(
        report, wall_clock=wall,
        extra={"stage": meta["stage"], "split": args.split,
               "total_map_bytes": int(sizes["total"])},
    )
    save_metrics(doc, args.report)
    report_csv(report, Path(args.report).with_suffix(".csv"))
    med_t = doc["median_translation_cm"]
    med_r = doc["median_rotation_deg"]
    print(
        f"localized {len(frames)} frames: median "
        f"{'-' if med_t is None else f'{med_t:.2f}cm'} / "
        f"{'-' if med_r is None else f'{med_r:.3f}deg'} "
        f"failure {report.failure_rate:.2f} -> {args.report}"
    )
    return 0


def _cmd_eval_render(args):
    from .splat import psnr, ssim
    from .trainer import render_frame

    (encoder, router, bank, upsampler, head), meta = _load_stack_for(args.ckpt, "render")
    if upsampler is None:
        raise DataError("checkpoint carries no render head arrays")
    views, splits = load_dataset(args.data)
    frames = split_views(views, splits, args.split)
    if not frames:
        raise DataError(f"{args.data} holds no {args.split}-split frames")
    tc = config_to_trainconfig(meta["config"], "render")
    t0 = time.perf_counter()
    per_view = []
    for v in frames:
        img, _, _ = render_frame(
            v, encoder, bank, router, upsampler, head,
            background=tc.render_background, offset_bound=tc.offset_bound,
        )
        target = v.image.astype(np.float64)
        per_view.append({"psnr": psnr(img, target), "ssim": ssim(img, target)})
    wall = time.perf_counter() - t0
    doc = render_metrics(
        per_view, wall_clock=wall, extra={"split": args.split},
    )
    save_metrics(doc, args.report)
    print(
        f"rendered {len(frames)} frames: mean {doc['mean_psnr_db']:.2f}dB "
        f"ssim {doc['mean_ssim']:.3f} -> {args.report}"
    )
    return 0


def _cmd_export_splats(args):
    from .splat import export_splats
    from .trainer import render_frame

    (encoder, router, bank, upsampler, head), meta = _load_stack_for(args.ckpt, "render")
    if upsampler is None:
        raise DataError("checkpoint carries no render head arrays")
    views, splits = load_dataset(args.data)
    frames = split_views(views, splits, args.split)
    if not 0 <= args.frame < len(frames):
        raise DataError(
            f"frame {args.frame} out of range; {args.split} split has {len(frames)}"
        )
    tc = config_to_trainconfig(meta["config"], "render")
    _, splats, k = render_frame(
        frames[args.frame], encoder, bank, router, upsampler, head,
        background=tc.render_background, offset_bound=tc.offset_bound,
    )
    export_splats(splats, args.out)
    print(f"wrote {len(splats.centers)} splats (expert {k}) to {args.out}")
    return 0


def _cmd_report(args):
    make_report_plot(args.inputs, args.plot)
    print(f"wrote {args.plot}")
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval_loc(args) if args.what == "loc" else _cmd_eval_render(args)
        if args.command == "export":
            return _cmd_export_splats(args)
        if args.command == "report":
            return _cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except RuntimeError as exc:
        if "divergence" in str(exc):
            print(f"error: {exc}", file=sys.stderr)
            return 4
        raise
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
