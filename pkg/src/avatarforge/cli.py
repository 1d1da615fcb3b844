"""Pipeline CLI: one subcommand per stage, declared inputs and outputs only.

    synth-scene   generate a synthetic capture (and optionally a clip)
    fit-identity  crop the scan, rigid-align, fit identity shape
    bake-static   unwrap all views, merge, de-light, outpaint
    track         per-frame expression/pose/light recovery
    train-dyntex  train the dynamic-texture decoder
    render        per-frame blended renders
    eval          PSNR/SSIM between two frame directories
    export        engine-ready OBJ + textures + light + weights

Every stage takes --seed and optional --config (INI); writers are
timestamp-free, so identical inputs reproduce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dyntex, fitting, harness, relight, tracking
from .camera import backproject_landmarks, load_camera_manifest
from .config import Config
from .errors import AvatarForgeError
from .geometry import Mesh, load_obj, save_obj
from .headmodel import PoseParams, evaluate, load_head_model, rotation_to_rotvec, rodrigues
from .images import read_mask_png, read_png, write_mask_png, write_png
from .rasterize import Texture, average_textures, rasterize, unwrap_texture, uv_coverage
from .sh import SHLight, load_light_json, save_light_json


def _cfg(args) -> Config:
    if getattr(args, "config", None):
        return Config.load(args.config)
    return Config()


def _load_scene_inputs(scene_dir: Path):
    model = load_head_model(scene_dir / "model.avf")
    scan = load_obj(scene_dir / "scan.obj")
    cams = load_camera_manifest(scene_dir / "cameras.json")
    lm = json.loads((scene_dir / "landmarks.json").read_text())
    return model, scan, cams, lm


def _load_fit(fit_dir: Path):
    params = json.loads((Path(fit_dir) / "params.json").read_text())
    beta = np.asarray(params["beta"], dtype=np.float64)
    pose = PoseParams(theta_global=np.asarray(params["theta_global"]),
                      translation=np.asarray(params["translation"]))
    return beta, pose


def _fitted_world_mesh(model, beta, pose) -> Mesh:
    return evaluate(model, pose, beta, np.zeros(model.n_expr))


def _load_clip_inputs(clip_dir: Path):
    clip_dir = Path(clip_dir)
    cam = load_camera_manifest(clip_dir / "camera.json")[0][1]
    frames = sorted((clip_dir / "frames").glob("frame_*.png"))
    images = [read_png(p) for p in frames]
    landmarks = []
    for p in frames:
        lm_path = clip_dir / "landmarks" / (p.stem + ".json")
        if lm_path.exists():
            landmarks.append(np.asarray(json.loads(lm_path.read_text())["points"]))
        else:
            landmarks.append(None)
    return cam, images, landmarks, [p.name for p in frames]


# ---------------------------------------------------------------------------
# Stages


def cmd_synth_scene(args) -> int:
    cfg = _cfg(args)
    scene = harness.make_identity_scene(
        seed=args.seed,
        n_vertices=cfg.get_int("scene.vertices", 1600),
        n_id=cfg.get_int("scene.n_id", 100),
        n_expr=cfg.get_int("scene.n_expr", 100),
        image_size=cfg.get_int("scene.image_size", 256),
        n_cameras=cfg.get_int("scene.cameras", 12),
        texture_size=cfg.get_int("scene.texture_size", 256),
        clutter=cfg.get_bool("scene.clutter", True),
    )
    harness.write_scene(scene, args.out)
    if args.clip_frames > 0:
        clip = harness.make_expression_clip(scene, args.clip_frames, seed=args.seed)
        harness.write_clip(clip, Path(args.out) / "clip")
    print(f"scene written to {args.out}")
    return 0


def cmd_fit_identity(args) -> int:
    cfg = _cfg(args)
    scene_dir = Path(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, scan, cams, lm = _load_scene_inputs(scene_dir)
    key_cam = cams[lm.get("key_index", 0)][1]
    pixels = np.asarray(lm["points"], dtype=np.float64)

    p_mesh, hits, _ = backproject_landmarks(key_cam, pixels, scan)
    hair = scan.labels.get("hair")
    crop, alignment = fitting.crop_face(
        scan, p_mesh[hits], hair_vertex_mask=hair,
        margin=cfg.get_float("fit.crop_margin", 0.2),
        back_margin=cfg.get_float("fit.crop_back_margin", 0.4),
        nose_index=_hit_nose_index(hits))
    init = fitting.rigid_align(alignment.apply(p_mesh[hits]),
                               model.template[model.landmark_indices][hits])
    fit_cfg = fitting.FitConfig(
        max_iterations=cfg.get_int("fit.max_iterations", 250),
        tol=cfg.get_float("fit.tol", 1e-6),
        tikhonov=cfg.get_float("fit.tikhonov", 1e-3),
        refine_pose=cfg.get_bool("fit.refine_pose", True),
    )
    beta, pose, report = fitting.fit_identity(crop, model, init, fit_cfg)

    # Compose the crop alignment out, so the pose lives in the camera frame.
    inv = alignment.inverse()
    g = model.joint_rest[0]
    r_pose = rodrigues(pose.theta_global)
    r_world = inv.rotation @ r_pose
    t_world = inv.rotation @ (g + pose.translation) + inv.translation - g
    (out / "params.json").write_text(json.dumps({
        "beta": [float(b) for b in beta],
        "theta_global": [float(v) for v in rotation_to_rotvec(r_world)],
        "translation": [float(v) for v in t_world],
    }, sort_keys=True))
    (out / "report.json").write_text(json.dumps({
        "iterations": report.iterations,
        "initial_rms": report.initial_rms,
        "final_rms": report.final_rms,
        "converged": report.converged,
        "residual_trace": report.residual_trace,
    }, sort_keys=True))
    save_obj(crop, out / "crop.obj")
    print(f"identity fit: rms {report.initial_rms:.3e} -> {report.final_rms:.3e} "
          f"({report.iterations} iterations)")
    return 0


def _hit_nose_index(hits: np.ndarray) -> int:
    """Index of the canonical nose-tip landmark inside the hit-compacted set."""
    full = np.flatnonzero(hits)
    where = np.searchsorted(full, fitting.NOSE_TIP_INDEX)
    if where < len(full) and full[where] == fitting.NOSE_TIP_INDEX:
        return int(where)
    return min(int(where), len(full) - 1)


def cmd_bake_static(args) -> int:
    cfg = _cfg(args)
    scene_dir = Path(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, cams, _ = _load_scene_inputs(scene_dir)
    beta, pose = _load_fit(args.fit)
    mesh = _fitted_world_mesh(model, beta, pose)

    size = cfg.get_int("bake.texture_size", 256)
    uvr = uv_coverage(mesh, size, size)
    unwraps = []
    for image_path, cam in cams:
        img = read_png(scene_dir / image_path)
        unwraps.append(unwrap_texture(mesh, cam, img, texture_size=(size, size),
                                      uvr=uvr))
    merged = average_textures(unwraps, plain=cfg.get_bool("bake.plain_average", False))
    write_png(out / "unwrapped.png", merged.rgb)
    write_mask_png(out / "coverage.png", merged.coverage)

    normals = relight.bake_normal_map(mesh, size=(size, size))
    delight_cfg = relight.DelightConfig(
        steps=cfg.get_int("delight.steps", 2000),
        warmup_steps=cfg.get_int("delight.warmup_steps", 50),
        lr=cfg.get_float("delight.lr", 1e-2),
        hinge_weight=cfg.get_float("delight.hinge_weight", 0.1),
        mono_light=cfg.get_bool("delight.mono_light", False),
    )
    albedo, light, trace = relight.delight(merged, normals, delight_cfg)
    save_light_json(out / "light.json", light)

    face_mask = fitting.bake_region_texel_mask(model, "face", (size, size))
    source = face_mask & (albedo.coverage > 0.2)
    if not source.any():
        source = albedo.coverage > 0
    t_static = relight.outpaint(albedo, source,
                                patch_size=cfg.get_int("outpaint.patch_size", 7),
                                seed=args.seed)
    write_png(out / "texture.png", t_static.rgb)
    (out / "delight_trace.csv").write_text(
        "step,loss\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(trace)) + "\n")
    print(f"static texture baked to {out / 'texture.png'}")
    return 0


def cmd_track(args) -> int:
    cfg = _cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_scene_inputs(Path(args.scene))
    beta, _ = _load_fit(args.fit)
    static_rgb = read_png(Path(args.static) / "texture.png")
    t_static = Texture(static_rgb, np.ones(static_rgb.shape[:2]))
    cam, images, landmarks, _ = _load_clip_inputs(args.clip)
    track_cfg = tracking.TrackConfig(
        alpha_prior=cfg.get_float("track.alpha_prior", 1e-3),
        temporal_prior=cfg.get_float("track.temporal_prior", 1e-2),
        optimize_intrinsics=args.optimize_intrinsics,
    )
    result = tracking.track_sequence(images, landmarks, cam, model, beta,
                                     t_static, n_chunks=args.chunks,
                                     config=track_cfg, jobs=args.jobs)
    tracking.save_tracked_jsonl(out / "tracked.jsonl", result)
    print(f"tracked {len(result.frames)} frames "
          f"({len(result.gaps)} gaps) -> {out / 'tracked.jsonl'}")
    return 0


def cmd_train_dyntex(args) -> int:
    cfg = _cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_scene_inputs(Path(args.scene))
    beta, _ = _load_fit(args.fit)
    static_rgb = read_png(Path(args.static) / "texture.png")
    t_static = Texture(static_rgb, np.ones(static_rgb.shape[:2]))
    cam, images, _, _ = _load_clip_inputs(args.clip)
    tracked = tracking.load_tracked_jsonl(args.tracked)

    samples = []
    for f in tracked.frames:
        if f.frame_index < len(images):
            samples.append(dyntex.TrainingSample(images[f.frame_index], f, cam))

    size = t_static.rgb.shape[0]
    if size % 256 != 0 or size // 256 not in (1, 2):
        raise AvatarForgeError(f"texture size {size} needs a 256- or 512-texel atlas")
    # float32 throughout: the serialized weight precision, and far faster GEMMs.
    net = dyntex.cast_net(
        dyntex.init_dyntex_net(n_input=model.n_expr + 3,
                               upsample=size // 256, seed=args.seed),
        np.float32)
    blend_mask = fitting.bake_region_texel_mask(model, ["eyes", "mouth"],
                                                (size, size))
    train_cfg = dyntex.TrainConfig(
        beta=beta,
        blend_mask=blend_mask,
        lr=cfg.get_float("train.lr", 4e-4),
        iterations=args.iterations if args.iterations is not None
        else cfg.get_int("train.iterations", 2500),
        batch_size=cfg.get_int("train.batch_size", 4),
        perceptual_weight=cfg.get_float("train.perceptual_weight", 0.1),
        feather_sigma=cfg.get_float("train.feather_sigma", 4.0),
        seed=args.seed,
    )
    net, trace = dyntex.train(net, samples, model, t_static, train_cfg)
    dyntex.save_dyntex_net(net, out / "weights.avf")
    (out / "loss.csv").write_text(
        "step,loss\n" + "\n".join(f"{i},{v!r}" for i, v in enumerate(trace)) + "\n")
    print(f"trained {train_cfg.iterations} iterations; final loss "
          f"{trace[-1]:.5f} -> {out / 'weights.avf'}")
    return 0


def cmd_render(args) -> int:
    cfg = _cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_scene_inputs(Path(args.scene))
    beta, _ = _load_fit(args.fit)
    static_rgb = read_png(Path(args.static) / "texture.png")
    t_static = Texture(static_rgb, np.ones(static_rgb.shape[:2]))
    cam, _, _, names = _load_clip_inputs(args.clip)
    tracked = tracking.load_tracked_jsonl(args.tracked)

    net = None
    blend_mask = None
    if args.weights:
        net = dyntex.load_dyntex_net(args.weights)
        size = t_static.rgb.shape[0]
        blend_mask = fitting.bake_region_texel_mask(model, ["eyes", "mouth"],
                                                    (size, size))
    feather = cfg.get_float("train.feather_sigma", 4.0)
    for f in tracked.frames:
        mesh = evaluate(model, f.pose, beta, f.alpha)
        tex = t_static
        if net is not None:
            drive = dyntex.DrivingVector(f.alpha, dyntex.view_angle(f.pose, cam))
            tex = dyntex.blend(t_static, dyntex.forward(net, drive.vector()),
                               blend_mask, feather_sigma=feather)
        frame = rasterize(mesh, cam, tex, f.light)
        write_png(out / f"frame_{f.frame_index:04d}.png", frame.image)
        write_mask_png(out / f"mask_{f.frame_index:04d}.png", frame.mask)
    print(f"rendered {len(tracked.frames)} frames -> {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    target_dir = Path(args.target)
    names = sorted(p.name for p in pred_dir.glob("frame_*.png"))
    if not names:
        raise AvatarForgeError(f"no frame_*.png files under {pred_dir}")
    rows = []
    for name in names:
        a = read_png(pred_dir / name)
        b = read_png(target_dir / name)
        if args.mask:
            mask = read_mask_png(Path(args.mask) / name.replace("frame_", "mask_")) >= 0.5
        else:
            mask = np.ones(a.shape[:2], dtype=bool)
        rows.append({
            "frame": name,
            "psnr": harness.psnr(a, b, mask),
            "ssim": harness.ssim(a, b, mask),
        })
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    payload = {
        "frames": [{**r, "psnr": _json_float(r["psnr"])} for r in rows],
        "mean_psnr": _json_float(mean_psnr),
        "mean_ssim": mean_ssim,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=1))
    print(f"PSNR {mean_psnr:.3f} dB  SSIM {mean_ssim:.4f}  ({len(rows)} frames)")
    return 0


def _json_float(x: float):
    return "inf" if np.isinf(x) else float(x)


def cmd_export(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = _load_scene_inputs(Path(args.scene))
    beta, pose = _load_fit(args.fit)
    mesh = _fitted_world_mesh(model, beta, pose)
    static_png = Path(args.static) / "texture.png"
    (out / "texture.png").write_bytes(static_png.read_bytes())
    light_json = Path(args.static) / "light.json"
    if light_json.exists():
        save_light_json(out / "light.json", load_light_json(light_json))
    else:
        save_light_json(out / "light.json", SHLight.ambient(1.0))
    save_obj(mesh, out / "avatar.obj", texture_name="texture.png")
    if args.weights:
        (out / "dyntex.avf").write_bytes(Path(args.weights).read_bytes())
    print(f"exported engine assets -> {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avatarforge",
        description="Bake engine-ready head avatars from calibrated captures.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None, help="INI config file")
        p.add_argument("--jobs", type=int, default=None, help="max parallel workers")

    p = sub.add_parser("synth-scene", help="generate a synthetic capture bundle")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-frames", type=int, default=0,
                   help="also generate an expression clip with this many frames")
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("fit-identity", help="crop + rigid align + identity fit")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_identity)

    p = sub.add_parser("bake-static", help="unwrap + merge + de-light + outpaint")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bake_static)

    p = sub.add_parser("track", help="per-frame expression/pose/light recovery")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--static", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunks", type=int, default=1)
    p.add_argument("--optimize-intrinsics", action="store_true")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train-dyntex", help="train the dynamic-texture decoder")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--static", required=True)
    p.add_argument("--tracked", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_train_dyntex)

    p = sub.add_parser("render", help="render tracked frames with blended textures")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--static", required=True)
    p.add_argument("--tracked", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM between two frame directories")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--mask", default=None, help="directory of mask_*.png files")
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write OBJ + texture + light + weights")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--static", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AvatarForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
