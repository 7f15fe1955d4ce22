"""Acceptance criteria 1-10.

Each test prints one ``[criterion N] PASS|FAIL ...`` line. Pipeline fits for
criteria 3-6 are computed once, in parallel across CPU cores, and shared.
"""
from __future__ import annotations

import functools
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from npbg import autodiff as ad
from npbg import fitting as ft
from npbg import rendernet as rn
from npbg.estimator import evaluate_views
from npbg.geometry import Camera, PointCloud, RigidTransform, camera_scale, read_cameras, read_ply, \
    voxel_downsample, write_cameras, write_ply
from npbg.raster import (DescriptorSet, load_descriptors, merge_rasters, rasterize, rasterize_aa,
                         rasterize_backward, rasterize_pyramid, save_descriptors)
from npbg.sceneio import (SceneDataset, SynthSpec, compose_scenes, generate_synthetic, load_scene,
                          plane_cameras, quantize, read_png, save_scene, write_png)

from conftest import (brute_force_raster, central_difference, check_gradients, random_camera,
                      random_raster_instance, random_rotation, relative_error)

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
FULL_STEPS = 2000
TREND_STEPS = 1000
VOXELS = {"small": 0.06, "medium": 0.035}
RUNTIME_LIMIT = 20 * 60

_clock: dict[str, float] = {}


@pytest.fixture(scope="module", autouse=True)
def suite_clock():
    _clock.setdefault("start", time.perf_counter())
    yield


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    assert ok, detail


# pipeline fits -------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def cube_scene() -> SceneDataset:
    return generate_synthetic(SynthSpec(preset="cube"), seed=0).dataset


def scene_variant(name: str) -> SceneDataset:
    scene = cube_scene()
    if name not in VOXELS:
        return scene
    return SceneDataset(voxel_downsample(scene.cloud, VOXELS[name]), scene.views, scene.split)


def run_fit(job: tuple) -> dict:
    """One pipeline fit; returns losses and holdout PSNRs at the requested steps."""
    name, variant, seed, steps, m, features = job
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(1)
    except ImportError:  # pragma: no cover
        limiter = None
    scene = scene_variant(variant)
    net = rn.RenderNetConfig(in_channels=3 if features == "colors" else m)
    config = ft.FitConfig(steps=steps, seed=seed, point_features=features)
    params = rn.build(net, seed=seed)
    checkpoints = {s for s in (TREND_STEPS, FULL_STEPS) if s <= steps}
    psnrs = {}

    def callback(step, loss, result):
        if step + 1 in checkpoints:
            table = ft.point_table(scene, config, result.descriptors[0])
            report_ = evaluate_views(result.params, scene, table)
            psnrs[step + 1] = float(np.median([r["psnr"] for r in report_["views"]]))

    t0 = time.perf_counter()
    result = ft.fit([scene], params, config, callback=callback)
    if limiter is not None:
        limiter.unregister()
    hist = np.asarray(result.history)
    return {"name": name, "seed": seed, "points": len(scene.cloud), "initial": float(hist[0]),
            "final": float(hist[-100:].mean()), "psnr": psnrs, "seconds": time.perf_counter() - t0,
            "finite": bool(np.isfinite(hist).all())}


def fit_jobs() -> list[tuple]:
    jobs = []
    for seed in SEEDS:
        jobs.append(("descriptors", "full", seed, FULL_STEPS, 8, "descriptors"))
        jobs.append(("colors", "full", seed, FULL_STEPS, 8, "colors"))
        jobs.append(("M4", "full", seed, TREND_STEPS, 4, "descriptors"))
        for v in VOXELS:
            jobs.append((v, v, seed, TREND_STEPS, 8, "descriptors"))
    return jobs


@pytest.fixture(scope="module")
def fits():
    jobs = fit_jobs()
    workers = min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        # longest jobs first so the pool drains evenly
        jobs.sort(key=lambda j: -j[3])
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_fit, jobs))
    else:
        results = [run_fit(j) for j in jobs]
    table: dict[str, dict[int, dict]] = {}
    for r in results:
        table.setdefault(r["name"], {})[r["seed"]] = r
    return table


def median_psnr(runs: dict, step: int) -> float:
    return float(np.median([runs[s]["psnr"][step] for s in SEEDS]))


# 1 ----------------------------------------------------------------------------------------

def test_criterion_1_rasterizer_oracle(capsys):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        cloud, values, cam = random_raster_instance(rng, 500, 64)
        raw = rasterize(cloud, values, cam)
        image, winner, depth = brute_force_raster(cloud, values, cam)
        same = (np.array_equal(raw.winner, winner) and np.array_equal(raw.depth, depth)
                and raw.values.dtype == image.dtype and np.array_equal(raw.values, image))
        mismatches += not same
    elapsed = time.perf_counter() - t0
    report(capsys, 1, mismatches == 0 and elapsed < 10,
           f"rasterizer vs brute force: {200 - mismatches}/200 bitwise equal in {elapsed:.1f}s (limit 10s)")


# 2 ----------------------------------------------------------------------------------------

def _op_cases(rng):
    def leaf(*shape):
        return ad.Tensor(rng.standard_normal(shape), requires_grad=True)

    def weight_of(t):
        return ad.Tensor(rng.standard_normal(t.shape))

    def wrap(fn, *tensors):
        probe = weight_of(fn(*tensors))
        return lambda: ad.total(ad.mul(fn(*tensors), probe)), list(tensors)

    a, b = leaf(3, 6, 8), leaf(3, 6, 8)
    cases = {
        "add": wrap(ad.add, a, b),
        "sub": wrap(ad.sub, a, b),
        "mul": wrap(ad.mul, a, b),
        "scale": wrap(lambda t: ad.scale(t, -1.7), a),
        "relu": wrap(ad.relu, a),
        "elu": wrap(ad.elu, a),
        "sigmoid": wrap(ad.sigmoid, a),
        "absolute": wrap(ad.absolute, a),
        "mean": (lambda: ad.mean(ad.mul(a, a)), [a]),
        "total": (lambda: ad.total(ad.mul(a, b)), [a, b]),
        "downsample2x": wrap(ad.downsample2x, a),
        "upsample2x": wrap(ad.upsample2x, a),
        "concat_channels": wrap(ad.concat_channels, a, leaf(2, 6, 8)),
    }
    x = leaf(3, 7, 7)
    w, bias = leaf(4, 3, 3, 3), leaf(4)
    cases["conv2d"] = wrap(lambda *t: ad.conv2d(*t, stride=1, padding=1), x, w, bias)
    cases["conv2d_stride2"] = wrap(lambda *t: ad.conv2d(*t, stride=2, padding=1), x, w, bias)
    gw, gb = leaf(4, 3, 3, 3), leaf(4)
    cases["gated_conv"] = wrap(lambda *t: ad.gated_conv(*t, stride=1, padding=1), x, w, gw, bias, gb)
    table = leaf(10, 4)
    index = rng.integers(-1, 10, size=(5, 6))
    cases["gather_rows"] = wrap(lambda t: ad.gather_rows(t, index), table)
    return cases


def test_criterion_2_gradient_suite(capsys):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = {}
    with ad.precision(np.float64):
        for name, (fn, tensors) in _op_cases(rng).items():
            worst[name] = check_gradients(fn, tensors, rng, probes=20)

        cfg = rn.RenderNetConfig()
        params = rn.build(cfg, seed=5, dtype=np.float64)
        for t in params.values():
            if t.data.ndim == 1:
                t.data[:] = rng.standard_normal(t.shape) * 0.1
        raw = [ad.Tensor(rng.standard_normal((8, 32 >> i, 32 >> i)), requires_grad=True) for i in range(4)]
        probe = ad.Tensor(rng.standard_normal((3, 32, 32)))
        names = list(rng.choice(sorted(params), size=4, replace=False)) + ["enc1.0.fw", "out.w"]
        worst["render network"] = check_gradients(
            lambda: ad.total(ad.mul(rn.forward(params, raw), probe)),
            [params[n] for n in names] + raw[:1], rng, probes=20)

        cam = random_camera(rng, width=32, height=32)
        cloud = PointCloud(rng.uniform(-1, 1, (400, 3)))
        desc = rng.standard_normal((400, 8))
        pyr = rasterize_pyramid(cloud, desc, cam, 4)
        ups = [rng.standard_normal(lvl.values.shape) for lvl in pyr]
        grad = rasterize_backward(pyr, ups, 400)
        seen = np.unique(np.concatenate([lvl.winner.ravel() for lvl in pyr]))
        seen = seen[seen >= 0]

        def scatter_loss():
            return sum(float(np.sum(lvl.values * u)) for lvl, u in zip(rasterize_pyramid(cloud, desc, cam, 4), ups))

        errs = []
        for _ in range(20):
            idx = (int(rng.choice(seen)), int(rng.integers(8)))
            errs.append(relative_error(grad[idx], central_difference(scatter_loss, desc, idx)))
        worst["descriptor scatter"] = max(errs)

        dt = ad.Tensor(desc, requires_grad=True)
        with ad.Tape():
            loss = ad.total(ad.mul(rn.render(params, pyr, dt), probe))
        ad.backward(loss)
        end_to_end = dt.grad.copy()
        errs = []
        for _ in range(20):
            idx = (int(rng.choice(seen)), int(rng.integers(8)))
            numeric = central_difference(lambda: ad.total(ad.mul(rn.render(params, pyr, dt), probe)).item(),
                                         dt.data, idx)
            errs.append(relative_error(end_to_end[idx], numeric))
        worst["network + scatter"] = max(errs)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    report(capsys, 2, not bad and elapsed < 120,
           f"{len(worst)} gradient checks, worst rel. err {max(worst.values()):.2e} "
           f"(limit 1e-4){', failing: ' + str(sorted(bad)) if bad else ''}; {elapsed:.1f}s (limit 120s)")


# 3-6 --------------------------------------------------------------------------------------

def test_criterion_3_overfit(capsys, fits):
    runs = fits["descriptors"]
    ratios = [runs[s]["final"] / runs[s]["initial"] for s in SEEDS]
    psnr = median_psnr(runs, FULL_STEPS)
    longest = max(r["seconds"] for r in runs.values())
    ok = all(r < 0.25 for r in ratios) and psnr >= 22 and all(runs[s]["finite"] for s in SEEDS)
    report(capsys, 3, ok,
           f"loss ratio final/initial {', '.join(f'{r:.3f}' for r in ratios)} (need < 0.25); "
           f"median holdout PSNR {psnr:.2f} dB (need >= 22); longest fit {longest:.0f}s")


def test_criterion_4_descriptors_beat_colors(capsys, fits):
    ours, base = median_psnr(fits["descriptors"], FULL_STEPS), median_psnr(fits["colors"], FULL_STEPS)
    report(capsys, 4, ours - base >= 0,
           f"descriptors {ours:.2f} dB vs point colors {base:.2f} dB (margin {ours - base:+.2f}, need >= 0)")


def test_criterion_5_density_trend(capsys, fits):
    small = median_psnr(fits["small"], TREND_STEPS)
    medium = median_psnr(fits["medium"], TREND_STEPS)
    large = median_psnr(fits["descriptors"], TREND_STEPS)
    counts = [fits[k][0]["points"] for k in ("small", "medium", "descriptors")]
    report(capsys, 5, small <= medium <= large,
           f"median holdout PSNR small/medium/large ({'/'.join(map(str, counts))} points): "
           f"{small:.2f} / {medium:.2f} / {large:.2f} dB (need non-decreasing)")


def test_criterion_6_descriptor_size(capsys, fits):
    m8, m4 = median_psnr(fits["descriptors"], TREND_STEPS), median_psnr(fits["M4"], TREND_STEPS)
    report(capsys, 6, m8 >= m4 - 0.2, f"PSNR M=8 {m8:.2f} dB vs M=4 {m4:.2f} dB (need M8 >= M4 - 0.2)")


# 7 ----------------------------------------------------------------------------------------

def test_criterion_7_bleeding(capsys):
    synth = generate_synthetic(SynthSpec(preset="two-planes", views=1), seed=7)
    cloud, labels = synth.dataset.cloud, synth.labels
    rng = np.random.default_rng(707)
    cams = plane_cameras(rng, 20, 3.0, 128, 128)
    zeros = np.zeros((len(cloud), 1))
    monotone, first = 0, []
    for cam in cams:
        frac = []
        for lvl in rasterize_pyramid(cloud, zeros, cam, 4):
            won = lvl.winner[lvl.winner >= 0]
            frac.append(np.sum(labels[won] == 1) / lvl.winner.size)
        monotone += all(b <= a for a, b in zip(frac, frac[1:]))
        first.append(frac[0])
    report(capsys, 7, monotone == 20,
           f"far-plane winner fraction non-increasing over 4 levels in {monotone}/20 draws "
           f"(level-1 fraction {min(first):.3f}..{max(first):.3f})")


# 8 ----------------------------------------------------------------------------------------

def test_criterion_8_composition(capsys):
    rng = np.random.default_rng(808)
    equal = 0
    for _ in range(50):
        na, nb, m = int(rng.integers(0, 400)), int(rng.integers(0, 400)), int(rng.integers(1, 9))

        def scene(n):
            return SceneDataset(PointCloud(rng.uniform(-1, 1, (n, 3))), [], {"train": [], "holdout": []},
                                DescriptorSet(rng.standard_normal((n, m)).astype(np.float32)))

        a, b = scene(na), scene(nb)
        tf = RigidTransform(random_rotation(rng), rng.standard_normal(3) * 0.5)
        cam = random_camera(rng, width=int(rng.choice([16, 32, 64])), height=32)
        composed = compose_scenes(a, b, tf)
        moved = PointCloud(composed.cloud.positions[na:])
        merged = merge_rasters(rasterize(a.cloud, a.desc, cam), rasterize(moved, b.desc, cam), b_offset=na)
        equal += merged == rasterize(composed.cloud, composed.desc, cam)
    report(capsys, 8, equal == 50, f"composed-scene raster equals merged rasters: {equal}/50 bitwise")


# 9 ----------------------------------------------------------------------------------------

def test_criterion_9_antialiasing(capsys):
    rng = np.random.default_rng(909)
    equal = 0
    for _ in range(50):
        cloud, values, cam = random_raster_instance(rng, 500, 64)
        big = rasterize(cloud, values, camera_scale(cam, 2))
        want = ad.downsample2x(ad.Tensor(big.values)).data
        got = rasterize_aa(cloud, values, cam, 2).values
        equal += got.dtype == want.dtype and np.array_equal(got, want)
    report(capsys, 9, equal == 50, f"rasterize_aa(k=2) equals 2x raster + downsample2x: {equal}/50 bitwise")


# 10 ---------------------------------------------------------------------------------------

def test_criterion_10_determinism_round_trips_runtime(capsys, tmp_path):
    checks = {}
    scene = cube_scene()
    config = ft.FitConfig(steps=25, seed=4)
    runs = [ft.fit([scene], rn.build(rn.RenderNetConfig(), seed=4), config) for _ in range(2)]
    checks["fit history"] = runs[0].history == runs[1].history
    checks["fitted state"] = (runs[0].params.equal(runs[1].params)
                              and runs[0].descriptors[0] == runs[1].descriptors[0])
    spec = SynthSpec(n_points=1000, views=4, width=64, height=64)
    checks["synthetic scene"] = generate_synthetic(spec, 9).dataset == generate_synthetic(spec, 9).dataset

    params = runs[0].params
    rn.save(tmp_path / "net.ckpt", params)
    checks["NPBGCKPT"] = rn.load(tmp_path / "net.ckpt").equal(params)
    save_descriptors(tmp_path / "d.npbd", runs[0].descriptors[0])
    checks["NPBD"] = load_descriptors(tmp_path / "d.npbd") == runs[0].descriptors[0]
    write_ply(tmp_path / "p.ply", scene.cloud)
    checks["PLY"] = read_ply(tmp_path / "p.ply") == scene.cloud
    views = [(v.name, v.camera) for v in scene.views]
    write_cameras(tmp_path / "cams.json", views)
    checks["cameras JSON"] = read_cameras(tmp_path / "cams.json") == views
    img = scene.views[0].image
    write_png(tmp_path / "i.png", img)
    checks["PNG"] = np.array_equal(read_png(tmp_path / "i.png"), img) and np.array_equal(img, quantize(img))
    tf = RigidTransform(random_rotation(np.random.default_rng(1)), [0.1, 0.2, 0.3])
    checks["transform JSON"] = all(np.array_equal(getattr(RigidTransform.from_dict(tf.to_dict()), k),
                                                  getattr(tf, k)) for k in ("rotation", "translation"))
    cam = scene.views[0].camera
    checks["camera dict"] = Camera.from_dict(cam.to_dict()) == cam
    with_desc = SceneDataset(scene.cloud, scene.views, scene.split, runs[0].descriptors[0])
    save_scene(tmp_path / "scene", with_desc)
    checks["scene directory"] = load_scene(tmp_path / "scene") == with_desc

    elapsed = time.perf_counter() - _clock["start"]
    failed = sorted(k for k, v in checks.items() if not v)
    ok = not failed and elapsed < RUNTIME_LIMIT
    report(capsys, 10, ok,
           f"{len(checks) - len(failed)}/{len(checks)} determinism and round-trip checks"
           f"{' (failed: ' + ', '.join(failed) + ')' if failed else ''}; acceptance suite "
           f"{elapsed / 60:.1f} min on {os.cpu_count()} core(s) (limit 20 min)")
