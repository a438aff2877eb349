"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 4-7 and 9 run on the full-size toy denoiser trained through the
command-line pipeline (shared session fixture); criterion 9's wall clock
includes that training run.
"""

import json
import math
import time

import numpy as np
import pytest
from oracles import ACCEPTANCE, background_mae, central_differences, chain_cost, max_relative_error

from dancegen.backends import (
    AnalyticGaussianBackend,
    GaussianWorldSpec,
    GradientProbe,
    IdentityAutoencoder,
    analytic_gaussian_predict,
    check_gradient,
    gaussian_posterior_mean,
)
from dancegen.cli import main
from dancegen.compose import compose_scene, generate_augmentations
from dancegen.diffusion import (
    GuidanceConfig,
    cfg_epsilon,
    ddim_invert_step,
    ddim_sample_step,
    make_schedule,
    tweedie_estimate,
)
from dancegen.embeddings import GeneralizationBatch, JointObjective, invert_augmented, optimize_generalizable
from dancegen.guidance import ConsistencyTarget, FrameCost, generate_frame, guidance_gradient
from dancegen.inversion import (
    EMBEDDINGS_HEADER,
    TimestepEmbeddings,
    load_embeddings,
    optimize_null_text,
    pose_aware_invert,
    reconstruct,
)
from dancegen.metrics import harmonic_mean, map_from_table, oks
from dancegen.pose import DEFAULT_K, NUM_KEYPOINTS, OKSParams, PoseSkeleton, rasterize_pose, template_pose

pytestmark = pytest.mark.slow

SCENE_SEEDS = (99, 5, 7)


@pytest.fixture
def criterion(request):
    def record(number, ok, detail):
        line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash.setdefault(ACCEPTANCE, []).append(line)
        with request.getfixturevalue("capsys").disabled():
            print("\n" + line)
        assert ok, line

    return record


def toy_scene(world, seed, persons=2):
    rng = np.random.default_rng(seed)
    spec, bg, slots = world.random_scene(rng, num_persons=persons)
    return spec, compose_scene(spec), world.prompt_embedding(bg, slots)


# --- 1 ----------------------------------------------------------------------


def test_c1_exact_inversion(criterion):
    t0 = time.perf_counter()
    schedule = make_schedule(50)
    rng = np.random.default_rng(0)
    mean = rng.uniform(0.2, 0.8, size=(3, 8, 8))
    backend = AnalyticGaussianBackend(GaussianWorldSpec(mean, 0.05), schedule, mean.shape)
    ae = IdentityAutoencoder((8, 8, 3))
    x0 = np.clip(np.moveaxis(mean, 0, -1) + rng.normal(scale=0.2, size=(8, 8, 3)), 0, 1)
    emb = TimestepEmbeddings.constant(np.zeros(4), np.zeros(4), 50)
    unit = GuidanceConfig(guidance_scale=1.0)
    traj = pose_aware_invert(x0, np.zeros(4), None, backend, ae, schedule, fixed_point_iters=10)
    err = float(np.max(np.abs(reconstruct(traj.start, emb, None, backend, ae, schedule, unit) - x0)))
    seconds = time.perf_counter() - t0
    plain = pose_aware_invert(x0, np.zeros(4), None, backend, ae, schedule)
    gap = float(np.max(np.abs(reconstruct(plain.start, emb, None, backend, ae, schedule, unit) - x0)))
    criterion(
        1,
        err <= 1e-3 and seconds < 10,
        f"fixed-point inversion max|x^-x0| = {err:.2e} (<= 1e-3) in {seconds:.2f}s; "
        f"single-evaluation inversion leaves {gap:.2e}",
    )


# --- 2 ----------------------------------------------------------------------


def test_c2_tweedie_oracle(criterion):
    schedule = make_schedule(50)
    rng = np.random.default_rng(1)
    spec = GaussianWorldSpec(rng.normal(size=12), 0.3)
    worst = 0.0
    for t in rng.choice(np.arange(1, 51), size=10, replace=False):
        z = rng.normal(size=12)
        est = tweedie_estimate(z, analytic_gaussian_predict(z, int(t), spec, schedule), schedule, int(t))
        worst = max(worst, float(np.max(np.abs(est - gaussian_posterior_mean(z, int(t), spec, schedule)))))
    criterion(2, worst <= 1e-6, f"max |tweedie - posterior mean| over 10 timesteps = {worst:.2e} (<= 1e-6)")


# --- 3 ----------------------------------------------------------------------


def test_c3_algebraic_identities(criterion, small_model, world):
    schedule = make_schedule(50)
    rng = np.random.default_rng(2)
    # DDIM invert/sample with a shared prediction
    rt = 0.0
    for t in range(1, 51):
        z, eps = rng.normal(size=20), rng.normal(size=20)
        rt = max(rt, float(np.max(np.abs(ddim_sample_step(ddim_invert_step(z, eps, schedule, t - 1), eps, schedule, t) - z))))
    # eps <-> x0 parameterizations
    par = 0.0
    for t in (1, 17, 50):
        ab = schedule.alpha_bar(t)
        z, eps = rng.normal(size=20), rng.normal(size=20)
        x0 = tweedie_estimate(z, eps, schedule, t)
        par = max(par, float(np.max(np.abs((z - math.sqrt(ab) * x0) / math.sqrt(1 - ab) - eps))))
    # joint embedding objective = reference + weighted generalization terms
    spec, scene, c = toy_scene(world, 3)
    ae = IdentityAutoencoder()
    ref = pose_aware_invert(scene.image, c, rasterize_pose(scene.poses, (32, 32)), small_model, ae, schedule)
    augs = invert_augmented(generate_augmentations(spec, 3, seed=1), c, small_model, ae, schedule)
    trajs = [ref] + augs
    t = 40
    z_hat = np.stack([ref.start] * 4)
    controls = np.stack([tr.control for tr in trajs])
    targets = np.stack([tr.latents[t - 1] for tr in trajs])
    obj = JointObjective(small_model, z_hat, controls, targets, t, schedule, 7.5, 1.0)
    null = world.empty_embedding()
    r = obj.residuals(null, c)
    terms = [float(np.mean(x**2)) for x in r]
    joint = abs(obj.value(r) - (terms[0] + sum(terms[1:]) / 3))
    # consistency cost = weighted background + keypoint terms
    target = ConsistencyTarget.from_scene(scene)
    moved = [p.copy(keypoints=p.keypoints + np.array([1.0, 1.0, 0.0])) for p in scene.poses]
    cost = FrameCost.build(target, moved, GuidanceConfig())
    img = rng.random((32, 32, 3))
    bg = np.sum(((scene.image - img) * scene.background_mask[..., None]) ** 2)
    kp = np.sum(((cost.assigned - img) * cost.keypoint_mask[..., None]) ** 2)
    guid = abs(cost.value(img) - (100 * bg + 2000 * kp)) / max(1.0, cost.value(img))
    worst = max(rt, par, joint / max(1.0, obj.value(r)), guid)
    criterion(
        3,
        worst <= 1e-10,
        f"round trip {rt:.1e}, eps/x0 {par:.1e}, joint objective {joint:.1e}, guidance cost {guid:.1e} (<= 1e-10)",
    )


# --- 4 ----------------------------------------------------------------------


def test_c4_gradient_contract(criterion, toy_model, world):
    schedule = toy_model.schedule
    ae = IdentityAutoencoder()
    spec, scene, c = toy_scene(world, 4)
    ctrl = rasterize_pose(scene.poses, (32, 32))
    traj = pose_aware_invert(scene.image, c, ctrl, toy_model, ae, schedule)
    backend_err = 0.0
    for t in (3, 25, 50):
        for sel in ("latent", "embedding"):
            e = c if sel == "latent" else world.empty_embedding() + 0.1
            probe = GradientProbe(traj.latents[t], t, e, ctrl, num_coordinates=32, seed=t)
            backend_err = max(backend_err, check_gradient(toy_model, probe, sel))
    moved = generate_augmentations(spec, 1, seed=9)[0].poses
    cost = FrameCost.build(ConsistencyTarget.from_scene(scene), moved, GuidanceConfig())
    hc = rasterize_pose(moved, (32, 32))
    null = world.empty_embedding()
    chain_err = 0.0
    rng = np.random.default_rng(4)
    for t in (5, 25, 45):
        z = traj.latents[t]
        eps = cfg_epsilon(toy_model.predict(z, t, c, hc), toy_model.predict(z, t, null, hc), 7.5)
        _, grad = guidance_gradient(z, t, eps, null, c, hc, cost, toy_model, ae, schedule, GuidanceConfig())
        coords = rng.choice(z.size, 32, replace=False)
        fd = central_differences(lambda x: chain_cost(x, t, null, c, hc, cost, toy_model, ae, schedule, 7.5), z, coords, 1e-5)
        chain_err = max(chain_err, max_relative_error(grad.reshape(-1)[coords], fd))
    criterion(
        4,
        backend_err <= 1e-4 and chain_err <= 1e-3,
        f"backend rel. error {backend_err:.1e} (<= 1e-4), Tweedie-decode-cost chain {chain_err:.1e} (<= 1e-3), 32 coords",
    )


# --- 5 and 7 share the null-text runs -------------------------------------


@pytest.fixture(scope="module")
def null_runs(toy_model, world):
    schedule = toy_model.schedule
    ae = IdentityAutoencoder()
    runs = []
    for seed in SCENE_SEEDS:
        spec, scene, c = toy_scene(world, seed)
        ctrl = rasterize_pose(scene.poses, (32, 32))
        t0 = time.perf_counter()
        traj = pose_aware_invert(scene.image, c, ctrl, toy_model, ae, schedule)
        emb = optimize_null_text(traj, toy_model, schedule, GuidanceConfig())
        runs.append({"spec": spec, "scene": scene, "c": c, "ctrl": ctrl, "traj": traj, "emb": emb,
                     "seconds": time.perf_counter() - t0})  # fmt: skip
    return runs


def test_c5_null_text_optimization(criterion, null_runs, toy_model, world):
    schedule = toy_model.schedule
    ae = IdentityAutoencoder()
    details, ok = [], True
    for run in null_runs:
        emb, traj, scene = run["emb"], run["traj"], run["scene"]
        monotone = sum(h.end <= h.start for h in emb.history)
        plain = TimestepEmbeddings.constant(world.empty_embedding(), run["c"], 50)
        mae = np.mean(np.abs(reconstruct(traj.start, emb, run["ctrl"], toy_model, ae, schedule) - scene.image))
        base = np.mean(np.abs(reconstruct(traj.start, plain, run["ctrl"], toy_model, ae, schedule) - scene.image))
        ok &= monotone == 50 and mae < base and run["seconds"] < 300
        details.append(f"{monotone}/50 monotone, MAE {mae:.4f} vs CFG {base:.4f}, {run['seconds']:.0f}s")
    criterion(5, ok, "; ".join(details))


def test_c7_consistency_guidance(criterion, null_runs, toy_model):
    schedule = toy_model.schedule
    ae = IdentityAutoencoder()
    wins, total, identical = 0, 0, True
    on = GuidanceConfig()
    off = GuidanceConfig(background_weight=0.0, keypoint_weight=0.0)
    for run in null_runs:
        target = ConsistencyTarget.from_scene(run["scene"])
        for held in generate_augmentations(run["spec"], 4, seed=77):
            hc = rasterize_pose(held.poses, (32, 32))
            cost = FrameCost.build(target, held.poses, on)
            args = (run["traj"].start, run["emb"], hc, target, held.poses, toy_model, ae, schedule)
            guided = cost.value(generate_frame(*args, on))
            unguided_img = generate_frame(*args, off)
            wins += guided < cost.value(unguided_img)
            total += 1
            if total == 1:
                plain = reconstruct(run["traj"].start, run["emb"], hc, toy_model, ae, schedule)
                identical = np.array_equal(unguided_img, plain)
    criterion(7, wins == total == 12 and identical,
              f"guided L < unguided L on {wins}/{total} pairs; lambda2=lambda3=0 bit-identical: {identical}")  # fmt: skip


# --- 6 ----------------------------------------------------------------------


def test_c6_generalizable_embeddings(criterion, null_runs, toy_model):
    schedule = toy_model.schedule
    ae = IdentityAutoencoder()
    run = null_runs[0]
    cfg = GuidanceConfig()
    augs = generate_augmentations(run["spec"], cfg.num_augmented, seed=1)
    batch = GeneralizationBatch(run["traj"], invert_augmented(augs, run["c"], toy_model, ae, schedule))
    gen = optimize_generalizable(batch, run["c"], toy_model, schedule, cfg, null_init=run["emb"])
    monotone = sum(h.end <= h.start for h in gen.history)
    wins, errs = 0, []
    for held in generate_augmentations(run["spec"], 8, seed=1234):
        hc = rasterize_pose(held.poses, (32, 32))
        g = background_mae(reconstruct(run["traj"].start, gen, hc, toy_model, ae, schedule), held.image, held.background_mask)
        n = background_mae(reconstruct(run["traj"].start, run["emb"], hc, toy_model, ae, schedule), held.image, held.background_mask)
        wins += g < n
        errs.append((g, n))
    mean_g, mean_n = np.mean(errs, axis=0)
    criterion(6, monotone == 50 and wins >= 6,
              f"{monotone}/50 monotone; background closer than null-only on {wins}/8 held-out poses "
              f"(mean background MAE {mean_g:.4f} vs {mean_n:.4f})")  # fmt: skip


# --- 8 ----------------------------------------------------------------------


def test_c8_metric_arithmetic(criterion):
    h = round(harmonic_mean(0.83, 0.91), 2)
    gt = template_pose()
    same = oks(gt, gt.copy())
    kp_g, kp_d = np.zeros((NUM_KEYPOINTS, 3)), np.zeros((NUM_KEYPOINTS, 3))
    s, k = 3.0, DEFAULT_K[0]
    kp_g[0] = (10, 10, 2)
    kp_d[0] = (10 + s * k * math.sqrt(2), 10, 2)
    single = oks(PoseSkeleton(kp_g), PoseSkeleton(kp_d), OKSParams(object_scale_rule=s))
    m = map_from_table(np.full((8, 2), 0.7))
    ok = h == 0.87 and same == 1.0 and abs(single - math.exp(-1)) <= 1e-9 and m == 0.5
    criterion(8, ok, f"H(0.83, 0.91) = {h:.2f}; OKS(gt, gt) = {same}; d = s*k*sqrt(2) -> {single:.12f}; mAP(0.7) = {m}")


# --- 9 and 10 ---------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(trained_pipeline):
    root = trained_pipeline["root"]
    cfg = trained_pipeline["config"]
    comp = trained_pipeline["compose"]
    t0 = time.perf_counter()
    steps = [
        ["invert", "--config", cfg, "--scenes", comp, "--checkpoint", trained_pipeline["checkpoint"],
         "--mode", "generalizable", "--out", root / "invert"],
        ["generate", "--config", cfg, "--inversion", root / "invert", "--poses", comp / "driving_poses.json",
         "--frames", 8, "--out", root / "guided"],
        ["generate", "--config", cfg, "--inversion", root / "invert", "--poses", comp / "driving_poses.json",
         "--frames", 8, "--no-guidance", "--out", root / "unguided"],
    ]  # fmt: skip
    for name in ("guided", "unguided"):
        steps.append(["evaluate", "--frames", root / name, "--reference", comp / "scene_000" / "image.png",
                      "--poses", root / name / "poses.json", "--out", root / f"eval_{name}"])  # fmt: skip
    codes = [main([str(a) for a in argv]) for argv in steps]
    return {
        "root": root,
        "codes": codes,
        "seconds": trained_pipeline["seconds"] + time.perf_counter() - t0,
        "guided": json.loads((root / "eval_guided" / "report.json").read_text()) if not any(codes) else None,
        "unguided": json.loads((root / "eval_unguided" / "report.json").read_text()) if not any(codes) else None,
    }


def test_c9_end_to_end_pipeline(criterion, pipeline):
    if any(pipeline["codes"]):
        criterion(9, False, f"pipeline exit codes {pipeline['codes']}")
    g, u = pipeline["guided"], pipeline["unguided"]
    err16 = g["keypoint_error"] * 16 / 32
    ok = pipeline["seconds"] < 1800 and g["map"] >= u["map"] and err16 <= 2.0
    criterion(
        9,
        ok,
        f"{pipeline['seconds'] / 60:.1f} min; mAP guided {g['map']:.3f} vs unguided {u['map']:.3f}; "
        f"keypoint error {g['keypoint_error']:.2f}px at 32 = {err16:.2f}px at 16 (<= 2)",
    )


def test_c10_embeddings_file_is_backend_free(criterion, pipeline, toy_model):
    path = pipeline["root"] / "invert" / "embeddings.bin"
    emb = load_embeddings(path)
    T, E = emb.num_steps, emb.embedding_dim
    size = path.stat().st_size
    bound = T * 2 * E * 4 + EMBEDDINGS_HEADER.size
    params = sum(p.size for p in toy_model.params.values())
    criterion(10, size <= bound and size < params * 4,
              f"{size} bytes <= T*2*E*4 + header = {bound}; backend has {params} parameters ({params * 4} bytes as float32)")  # fmt: skip
