"""Command-line pipeline driver.

Subcommands chain through on-disk artifacts: `layout` turns a map file into
voxels and a proxy mesh, `init` seeds a scene bundle from the mesh,
`optimize` runs the distillation loop against a denoising prior, `render`
walks a trajectory, `compose` drops an asset into a scene, `export` pulls
single artifacts out of a bundle, and `bench` measures raw render speed.
Every run writes a manifest next to its outputs. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys
import time

import numpy as np

from . import layout as layoutmod
from . import sceneio
from .camera import Camera
from .diffusion import (AnalyticDenoiser, Codec, DeltaPrior, GaussianPrior,
                        make_schedule)
from .optimizer import (GgdsConfig, load_config, load_default_config,
                        optimize, deferred_render)
from .raster import RenderSettings, render, set_threads
from .scene import (RigidTransform, SceneModel, compose_and_relight,
                    mesh_to_splats)
from .sceneio import RunManifest, load_scene_bundle, save_scene_bundle


class CliError(RuntimeError):
    """Runtime failure the driver reports as exit code 1."""


def _require(path, what: str = "input"):
    if not os.path.exists(path):
        raise CliError(f"missing {what} file: {path}")
    return path


# ---------------------------------------------------------------------------
# argument parsing helpers


def _prior_spec(text: str):
    """`builtin:gaussian`, `builtin:delta:<path>`, or `bridge:<endpoint>`."""
    kind, _, rest = text.partition(":")
    if kind == "builtin":
        name, _, arg = rest.partition(":")
        if name == "gaussian" and not arg:
            return ("gaussian", None)
        if name == "delta" and arg:
            return ("delta", arg)
    elif kind == "bridge" and rest:
        return ("bridge", rest)
    raise argparse.ArgumentTypeError(
        f"bad prior spec {text!r}; expected builtin:gaussian, "
        f"builtin:delta:<path>, or bridge:<endpoint>")


def _codec_spec(text: str) -> Codec:
    if text == "identity":
        return Codec("identity")
    mode, _, factor = text.partition(":")
    if mode == "pooled" and factor:
        try:
            return Codec("pooled", int(factor))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    raise argparse.ArgumentTypeError(
        f"bad codec spec {text!r}; expected identity or pooled:<factor>")


def _build_denoiser(prior, schedule, codec: Codec, latent_hw):
    """Instantiate the denoiser behind a parsed --prior value."""
    kind, arg = prior
    if kind == "bridge":
        from .protocol import RemoteDenoiser
        return RemoteDenoiser(arg)
    if kind == "gaussian":
        return AnalyticDenoiser(GaussianPrior(np.zeros(3)), schedule)
    _require(arg, "prior image")
    if arg.endswith(".pfm"):
        img = sceneio.load_pfm(arg).astype(np.float64)
    else:
        from PIL import Image
        img = np.asarray(Image.open(arg).convert("RGB"),
                         dtype=np.float64) / 255.0
    if img.shape[:2] != tuple(latent_hw):
        raise CliError(f"prior image {arg} is {img.shape[1]}x{img.shape[0]}, "
                       f"render target is {latent_hw[1]}x{latent_hw[0]}")
    return AnalyticDenoiser(DeltaPrior(codec.encode(img)), schedule)


def _resolve_config(value: str | None) -> GgdsConfig:
    if value is None:
        return load_default_config()
    if os.path.exists(value):
        return load_config(value)
    try:
        return load_default_config(value)
    except FileNotFoundError:
        raise CliError(f"missing config file: {value} (and no shipped "
                       f"config has that name)") from None


def _write_manifest(out_dir, options: dict, seed: int, outputs,
                    loss_log=None, checkpoints=()):
    """Record the run next to its outputs; paths stored relative to out_dir."""
    rel = [os.path.relpath(p, out_dir) for p in outputs]
    man = RunManifest(config=options, seed=int(seed), loss_log=loss_log,
                      checkpoints=[os.path.relpath(p, out_dir)
                                   for p in checkpoints],
                      outputs=rel)
    man.save(os.path.join(out_dir, "manifest.json"))


def _options_dict(args, keys) -> dict:
    out = {}
    for key in keys:
        val = getattr(args, key)
        out[key] = list(val) if isinstance(val, tuple) else val
    return out


def _save_frame_png(path, color: np.ndarray):
    from PIL import Image
    arr = (np.clip(color, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _default_pool(scene: SceneModel, count: int, width: int, height: int,
                  seed: int):
    """Viewpoint ring around the splat bounding box at street height."""
    if len(scene.cloud) == 0:
        raise CliError("scene has no splats; nothing to optimize")
    lo = scene.cloud.centers.min(axis=0).astype(np.float64)
    hi = scene.cloud.centers.max(axis=0).astype(np.float64)
    center = (lo + hi) / 2.0
    radius = max(float(np.linalg.norm(hi - lo)) * 0.75, 1.0)
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(count):
        yaw = 2.0 * math.pi * i / count + rng.uniform(-0.1, 0.1)
        z = center[2] + rng.uniform(1.2, 2.2)
        pos = (center[0] + radius * math.cos(yaw),
               center[1] + radius * math.sin(yaw), z)
        cams.append(Camera.look_at(pos, center, fov_y=0.95,
                                   width=width, height=height))
    return cams


# ---------------------------------------------------------------------------
# subcommands


def _cmd_layout(args) -> int:
    _require(args.map, "map")
    lay = layoutmod.load_map(args.map)
    os.makedirs(args.out, exist_ok=True)

    def generator(layout, spec, seed):
        return layoutmod.extrude_layout(layout, spec, seed,
                                        jitter_rate=args.jitter)

    grid = layoutmod.generate_chunked(
        generator, lay, chunk_extent=args.chunk_extent, overlap=args.overlap,
        voxel_size=args.voxel, num_z_layers=args.z_layers, seed=args.seed)
    mesh = layoutmod.extract_surface(grid, iso=args.iso)

    vox_path = os.path.join(args.out, "voxels.lsdv")
    mesh_path = os.path.join(args.out, "proxy.obj")
    sceneio.save_voxels(vox_path, grid)
    sceneio.save_mesh_obj(mesh_path, mesh)
    _write_manifest(args.out,
                    _options_dict(args, ("map", "chunk_extent", "overlap",
                                         "voxel", "z_layers", "jitter",
                                         "iso")),
                    args.seed, [vox_path, mesh_path])
    print(f"layout: {grid.occupied_count()} voxels occupied of "
          f"{'x'.join(str(d) for d in grid.dims)}, proxy mesh "
          f"{len(mesh.vertices)} verts / {len(mesh.faces)} faces -> "
          f"{args.out}")
    return 0


def _cmd_init(args) -> int:
    _require(args.mesh, "mesh")
    mesh = sceneio.load_mesh_obj(args.mesh)
    if mesh.is_empty:
        raise CliError(f"mesh {args.mesh} has no faces")
    subdivide = None
    if args.target_splats > 0:
        total = float(mesh.face_normals_areas()[1].sum())
        subdivide = total / args.target_splats
    cloud, skipped = mesh_to_splats(mesh, args.scale_factor,
                                    opacity=args.opacity,
                                    sh_degree=args.sh_degree,
                                    subdivide_area=subdivide)
    if len(cloud) > args.splat_cap:
        raise CliError(f"init produced {len(cloud)} splats, over the cap "
                       f"{args.splat_cap}; lower --target-splats")
    from .scene import EnvironmentMap
    if args.env_map is not None:
        env = sceneio.load_envmap(_require(args.env_map, "environment"))
    else:
        env = EnvironmentMap.uniform(tuple(args.env))
    scene = SceneModel(cloud, env, proxy=mesh, splat_cap=args.splat_cap)
    save_scene_bundle(args.out, scene)
    bundle = [os.path.join(args.out, n)
              for n in ("splats.ply", "env.pfm", "proxy.obj", "meta.json")]
    _write_manifest(args.out,
                    _options_dict(args, ("mesh", "target_splats",
                                         "scale_factor", "opacity",
                                         "sh_degree", "splat_cap")),
                    0, bundle)
    print(f"init: {len(cloud)} splats from {len(mesh.faces)} faces "
          f"({skipped} degenerate skipped) -> {args.out}")
    return 0


def _cmd_optimize(args) -> int:
    _require(args.scene, "scene bundle")
    config = _resolve_config(args.config)
    if args.steps is not None:
        config = dataclasses.replace(config, total_steps=args.steps)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.threads is not None:
        set_threads(args.threads)

    scene = load_scene_bundle(args.scene)
    schedule = make_schedule(args.schedule_steps, args.schedule_kind)
    codec = args.codec
    if args.cameras is not None:
        cameras = sceneio.load_trajectory(_require(args.cameras,
                                                   "trajectory")).cameras
    else:
        cameras = _default_pool(scene, args.pool_size, args.width,
                                args.height, config.seed)
    hw = (cameras[0].height, cameras[0].width)
    denoiser = _build_denoiser(args.prior, schedule, codec, hw)

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "loss_log.csv")
    ckpt_dir = os.path.join(args.out, "checkpoints")
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t", "viewpoint", "total", "gen_l1",
                         "perceptual", "normal", "disparity", "tv"])

        def on_report(k, rep):
            writer.writerow([k, rep.t, rep.viewpoint,
                             f"{rep.total:.8g}", f"{rep.gen_l1:.8g}",
                             f"{rep.perceptual:.8g}", f"{rep.normal:.8g}",
                             f"{rep.disparity:.8g}", f"{rep.tv:.8g}"])

        result = optimize(scene, config, denoiser, codec, schedule, cameras,
                          on_report=on_report, checkpoint_dir=ckpt_dir)

    save_scene_bundle(args.out, result)
    checkpoints = sorted(os.path.join(ckpt_dir, n)
                         for n in os.listdir(ckpt_dir))
    outputs = [os.path.join(args.out, n)
               for n in ("splats.ply", "env.pfm", "proxy.obj", "meta.json")]
    _write_manifest(args.out, dataclasses.asdict(config), config.seed,
                    outputs, loss_log="loss_log.csv",
                    checkpoints=checkpoints)
    print(f"optimize: {config.total_steps} steps, final scene "
          f"{len(result.cloud)} splats -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    _require(args.scene, "scene bundle")
    _require(args.trajectory, "trajectory")
    if args.threads is not None:
        set_threads(args.threads)
    scene = load_scene_bundle(args.scene)
    traj = sceneio.load_trajectory(args.trajectory)
    os.makedirs(args.out, exist_ok=True)

    denoiser = schedule = codec = None
    if args.deferred:
        schedule = make_schedule(args.schedule_steps, args.schedule_kind)
        codec = args.codec
        hw = (traj.cameras[0].height, traj.cameras[0].width)
        denoiser = _build_denoiser(args.prior, schedule, codec, hw)

    outputs = []
    for i, cam in enumerate(traj.cameras):
        if args.deferred:
            color = deferred_render(scene, cam, denoiser, codec, schedule,
                                    args.defer_level,
                                    num_steps=args.defer_steps,
                                    seed=args.seed + i)
        else:
            color = render(scene, cam).color
        png = os.path.join(args.out, f"frame_{i:05d}.png")
        _save_frame_png(png, color)
        outputs.append(png)
        if args.pfm:
            pfm = os.path.join(args.out, f"frame_{i:05d}.pfm")
            sceneio.save_pfm(pfm, color.astype(np.float32))
            outputs.append(pfm)

    _write_manifest(args.out,
                    _options_dict(args, ("scene", "trajectory", "deferred",
                                         "pfm")),
                    args.seed, outputs)
    print(f"render: {len(traj.cameras)} frames -> {args.out}")
    return 0


def _cmd_compose(args) -> int:
    _require(args.scene, "scene bundle")
    _require(args.asset, "asset bundle")
    scene = load_scene_bundle(args.scene)
    asset = load_scene_bundle(args.asset)
    ang = math.radians(args.rotate_z)
    rot = np.array([[math.cos(ang), -math.sin(ang), 0.0],
                    [math.sin(ang), math.cos(ang), 0.0],
                    [0.0, 0.0, 1.0]])
    transform = RigidTransform(rot, np.asarray(args.translate), args.scale)
    result = compose_and_relight(scene, asset.cloud, transform,
                                 relight=args.relight,
                                 reference_irradiance=args.reference_irradiance)
    save_scene_bundle(args.out, result)
    outputs = [os.path.join(args.out, n)
               for n in ("splats.ply", "env.pfm", "proxy.obj", "meta.json")]
    _write_manifest(args.out,
                    _options_dict(args, ("scene", "asset", "translate",
                                         "rotate_z", "scale", "relight",
                                         "reference_irradiance")),
                    0, outputs)
    print(f"compose: {len(scene.cloud)} + {len(asset.cloud)} -> "
          f"{len(result.cloud)} splats -> {args.out}")
    return 0


def _cmd_export(args) -> int:
    _require(args.scene, "scene bundle")
    scene = load_scene_bundle(args.scene)
    if args.what == "bundle":
        save_scene_bundle(args.out, scene)
        outputs = [os.path.join(args.out, n)
                   for n in ("splats.ply", "env.pfm", "proxy.obj",
                             "meta.json")]
        _write_manifest(args.out, _options_dict(args, ("scene", "what")),
                        0, outputs)
    else:
        if args.what == "splats":
            sceneio.save_splats(args.out, scene.cloud)
        elif args.what == "mesh":
            sceneio.save_mesh_obj(args.out, scene.proxy)
        else:
            sceneio.save_envmap(args.out, scene.env)
        out_dir = os.path.dirname(os.path.abspath(args.out))
        man = RunManifest(config=_options_dict(args, ("scene", "what")),
                          seed=0, outputs=[os.path.basename(args.out)])
        man.save(os.path.join(out_dir,
                              os.path.basename(args.out) + ".manifest.json"))
    print(f"export: {args.what} -> {args.out}")
    return 0


def _cmd_bench(args) -> int:
    from .toy import make_bench_scene
    if args.threads is not None:
        set_threads(args.threads)
    threads = args.threads if args.threads is not None else 1
    scene, camera = make_bench_scene(args.splats, args.seed,
                                     width=args.width, height=args.height)
    settings = RenderSettings()
    for _ in range(args.warmup):  # compile and warm caches off the clock
        render(scene, camera, settings)
    start = time.perf_counter()
    for _ in range(args.frames):
        render(scene, camera, settings)
    elapsed = time.perf_counter() - start
    fps = args.frames / elapsed if elapsed > 0.0 else float("inf")

    print(f"bench: {fps:.2f} fps at {args.width}x{args.height}, "
          f"{args.splats} splats, {threads} thread(s) "
          f"({elapsed / args.frames * 1000.0:.1f} ms/frame)")
    print("context: GPU-class implementations of this rasterizer family "
          "target 960p at 60+ fps; this CPU path favors exactness over "
          "that headroom.")
    os.makedirs(args.out, exist_ok=True)
    results = os.path.join(args.out, "bench.json")
    import json
    with open(results, "w", encoding="utf-8") as fh:
        json.dump({"fps": fps, "seconds_per_frame": elapsed / args.frames,
                   "width": args.width, "height": args.height,
                   "splats": args.splats, "threads": threads,
                   "frames": args.frames}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out,
                    _options_dict(args, ("width", "height", "splats",
                                         "frames", "warmup")),
                    args.seed, [results])
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _add_prior_args(sub, required: bool):
    sub.add_argument("--prior", type=_prior_spec, required=required,
                     default=None if required else ("gaussian", None),
                     help="builtin:gaussian | builtin:delta:<path> | "
                          "bridge:<endpoint>")
    sub.add_argument("--schedule-steps", type=int, default=1000)
    sub.add_argument("--schedule-kind", choices=("linear", "cosine"),
                     default="linear")
    sub.add_argument("--codec", type=_codec_spec, default=Codec("identity"),
                     help="identity | pooled:<factor>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatgen",
        description="Geometry-grounded splat scene pipeline.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("layout", help="map file -> voxel grid + proxy mesh")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-extent", type=float, default=100.0,
                   help="horizontal chunk size in meters")
    p.add_argument("--overlap", type=int, default=8,
                   help="stitching overlap in voxels")
    p.add_argument("--voxel", type=float, default=0.5)
    p.add_argument("--z-layers", type=int, default=24)
    p.add_argument("--jitter", type=float, default=0.0,
                   help="clutter column rate outside road corridors")
    p.add_argument("--iso", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_layout)

    p = subs.add_parser("init", help="proxy mesh -> initial scene bundle")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-splats", type=int, default=0,
                   help="subdivide faces until roughly this many splats")
    p.add_argument("--scale-factor", type=float, default=1.0)
    p.add_argument("--opacity", type=float, default=0.7)
    p.add_argument("--sh-degree", type=int, default=0)
    p.add_argument("--splat-cap", type=int, default=4_000_000)
    p.add_argument("--env", type=float, nargs=3, default=(0.5, 0.5, 0.5),
                   metavar=("R", "G", "B"),
                   help="uniform environment color")
    p.add_argument("--env-map", default=None, help="PFM environment map")
    p.set_defaults(func=_cmd_init)

    p = subs.add_parser("optimize",
                        help="scene + config + prior -> optimized scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None,
                   help="config file path or shipped name (full, toy)")
    _add_prior_args(p, required=True)
    p.add_argument("--steps", type=int, default=None,
                   help="override total_steps from the config")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--cameras", default=None,
                   help="trajectory JSON supplying the viewpoint pool")
    p.add_argument("--pool-size", type=int, default=6,
                   help="viewpoints in the default ring pool")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_optimize)

    p = subs.add_parser("render", help="scene + trajectory -> frames")
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deferred", action="store_true",
                   help="light noise-and-denoise pass per frame")
    _add_prior_args(p, required=False)
    p.add_argument("--defer-level", type=int, default=None)
    p.add_argument("--defer-steps", type=int, default=5)
    p.add_argument("--pfm", action="store_true",
                   help="also write float-exact PFM frames")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_render)

    p = subs.add_parser("compose", help="scene + asset bundle -> scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--asset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--translate", type=float, nargs=3,
                   default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"))
    p.add_argument("--rotate-z", type=float, default=0.0,
                   help="degrees about +z")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--relight", action="store_true",
                   help="scale asset colors by the scene's irradiance")
    p.add_argument("--reference-irradiance", type=float, default=1.0)
    p.set_defaults(func=_cmd_compose)

    p = subs.add_parser("export", help="pull one artifact out of a bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--what", choices=("splats", "mesh", "env", "bundle"),
                   required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = subs.add_parser("bench", help="measure raw render throughput")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--splats", type=int, default=100_000)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench_out")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (CliError, sceneio.FileFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
