"""``mvacon`` command line: train, gradcheck, bench, viz-clusters, viz-deform, scene-gen."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import config_hash, load_config, make_config, save_config
from .geometry import ConfigError


def _config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["scene"]["seed"] = args.seed
        cfg["training"]["seed"] = args.seed
    cfg = make_config(cfg)
    if args.out is not None:
        cfg["output"] = str(args.out)
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return out


def _trained(args, cfg: dict):
    """Detector and rendered scene, restored from ``--checkpoint`` when given."""
    from .model import Detector
    from .train import load_checkpoint, make_batch

    state = None
    if args.checkpoint:
        ckpt_cfg, state = load_checkpoint(args.checkpoint)
        ckpt_cfg["output"] = cfg["output"]
        if args.seed is not None:
            ckpt_cfg["scene"]["seed"] = args.seed
        cfg = make_config(ckpt_cfg)
    batch = make_batch(cfg)
    det = Detector(cfg, batch.scene.rig)
    if state is not None:
        det.store.load_state_dict(state)
    return cfg, det, batch


def cmd_train(args) -> int:
    from .plotting import plot_training
    from .train import train

    cfg = _config(args)
    out = _out_dir(cfg)
    res = train(cfg, out)
    plot_training(res["rows"], out / "training.png", res["config_hash"])
    if res["rows"]:
        print("final step %d loss %.6g box_err %.4g cls_acc %.3f" % res["rows"][-1])
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import REGISTRY, TOLERANCE, run_gradchecks

    cfg = _config(args)
    out = _out_dir(cfg)
    names = set(args.only.split(",")) if args.only else None
    if names is not None and not names <= set(REGISTRY):
        raise ConfigError(f"unknown gradient checks: {sorted(names - set(REGISTRY))}")
    corrupt = set(args.corrupt.split(",")) if args.corrupt else None
    results = run_gradchecks(names=names, corrupt=corrupt)
    h = config_hash(cfg)
    with open(out / "gradcheck.csv", "w") as fh:
        fh.write(f"# config_hash={h}\nname,max_rel_error,sampled_coords,passed\n")
        for r in results:
            fh.write(f"{r.name},{r.max_rel_error:.3e},{r.coords or ''},{int(r.passed)}\n")
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) at or above {TOLERANCE:g}: {', '.join(failed)}")
        return 1
    return 0


def cmd_bench(args) -> int:
    from .bench import doubling_ratios, run_bench, write_bench_csv
    from .plotting import plot_bench

    cfg = _config(args)
    out = _out_dir(cfg)
    h = config_hash(cfg)
    timings = run_bench(cfg["bench"])
    write_bench_csv(out / "bench.csv", timings, h)
    plot_bench(timings, out / "bench.png", h)
    for mech in ("paca", "dense"):
        for (a, b), r in doubling_ratios(timings, mech).items():
            print(f"{mech} {a}->{b} time ratio {r:.2f}")
    return 0


def cmd_viz_clusters(args) -> int:
    from .plotting import plot_heatmaps
    from .scene import render, write_pgm16
    from .viz import cluster_heatmaps, foreground_contrast

    cfg, det, batch = _trained(args, _config(args))
    out = _out_dir(cfg)
    h = config_hash(cfg)
    heat = cluster_heatmaps(det, batch.images, level=args.level, block=args.block)
    for v, hm in enumerate(heat):
        write_pgm16(out / f"clusters_view{v}.pgm", hm, f"config_hash={h}")
    plot_heatmaps(batch.images, heat, out / "clusters.png", h)
    ids = render(batch.scene).ids
    if (ids >= 0).any() and (ids < 0).any():
        fg, bg = foreground_contrast(heat, ids)
        print(f"mean heat: objects {fg:.4f} background {bg:.4f}")
    return 0


def default_cell(det, scene) -> int:
    """BEV cell under the first object, or the grid center for an empty scene."""
    if scene.objects:
        x, _, z = scene.objects[0].box.center
    else:
        x = z = 0.0
    return det.grid.cell_at(x, z)


def cmd_viz_deform(args) -> int:
    from .plotting import plot_deform
    from .viz import deform_points, write_deform_csv

    cfg, det, batch = _trained(args, _config(args))
    if det.mode != "bevformer":
        raise ConfigError("viz-deform needs lift.mode = 'bevformer'")
    out = _out_dir(cfg)
    h = config_hash(cfg)
    cell = default_cell(det, batch.scene) if args.bev_cell is None else args.bev_cell
    layers = deform_points(det, batch.images, cell)
    for i, pts in enumerate(layers):
        write_deform_csv(out / f"deform_layer{i}.csv", pts, h, cell, i)
    plot_deform(batch.images, layers, out / "deform.png", h)
    print(f"cell {cell}: {len(layers)} layer file(s)")
    return 0


def cmd_scene_gen(args) -> int:
    from .geometry import save_rig
    from .scene import generate_scene, render, write_ppm

    cfg = _config(args)
    out = _out_dir(cfg)
    h = config_hash(cfg)
    scene = generate_scene(cfg["scene"])
    for frame, sc in enumerate((scene, scene.advance(float(cfg["scene"]["dt"])))):
        for v, img in enumerate(render(sc).images):
            write_ppm(out / f"frame{frame}_view{v}.ppm", img, f"config_hash={h} t={sc.time:g}")
    save_rig(scene.rig, out / "rig.json", {"config_hash": h})
    with open(out / "objects.json", "w") as fh:
        json.dump(dict(scene.to_json(), config_hash=h), fh, indent=1)
        fh.write("\n")
    return 0


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "viz-clusters": cmd_viz_clusters,
    "viz-deform": cmd_viz_deform,
    "scene-gen": cmd_scene_gen,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvacon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON overrides of the default config")
        p.add_argument("--out", type=Path, help="output directory (default: config 'output')")
        p.add_argument("--seed", type=int, help="overrides scene.seed and training.seed")
        if name in ("viz-clusters", "viz-deform"):
            p.add_argument("--checkpoint", type=Path, help="checkpoint.npz from 'mvacon train'")
        if name == "viz-clusters":
            p.add_argument("--level", type=int, default=0)
            p.add_argument("--block", type=int, default=0)
        if name == "viz-deform":
            p.add_argument("--bev-cell", type=int, help="BEV cell index (default: under the first object)")
        if name == "gradcheck":
            p.add_argument("--only", help="comma-separated subset of checks")
            p.add_argument("--corrupt", help="comma-separated checks whose gradient is doubled")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    threads = os.environ.get("MVACON_THREADS")
    limit = int(threads) if threads else None
    try:
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"mvacon: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
