"""End-to-end acceptance gate: eleven numbered criteria.

Each criterion test appends one "criterion N: PASS/FAIL" line to the
terminal summary (see conftest) so the whole gate reads at a glance. The
expensive inputs (a 650-scene dataset, the stage-1/stage-2 training runs)
are session fixtures shared across criteria; every fixture records its own
build time so each criterion can account for the work attributed to it.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from cg2real.cli import main as cli_main
from cg2real.config import PipelineConfig, config_text, parse_config_text
from cg2real.datagen import (
    DatasetManifest,
    SceneSpec,
    build_datasets,
    load_pair,
    render_pair,
    save_pair,
)
from cg2real.features import default_feature_extractor
from cg2real.metrics import (
    FeatureStats,
    TaskConfig,
    depth_metrics,
    depth_task_loss,
    embed_images,
    evaluate_task,
    frechet_distance,
    normal_metrics,
    normal_task_loss,
    train_task_net,
)
from cg2real.nets import (
    DecompNetSpec,
    DiscriminatorSpec,
    build_decomp_net,
    build_discriminator,
)
from cg2real.ops import (
    GuidedFilterParams,
    compose,
    from_log_shading,
    guided_filter,
    to_log_shading,
)
from cg2real.pipeline import PipelineReport, load_real_images
from cg2real.stage1 import (
    Stage1Config,
    Stage1Result,
    lsgan_d_loss,
    lsgan_g_loss,
    pairs_to_tensors,
    perceptual_loss,
    train_stage1,
)
from cg2real.stage2 import (
    DecompConfig,
    DecompResult,
    Stage2Config,
    TranslationSet,
    backward_cycle_loss,
    build_stage2_nets,
    decomp_triples_from_pairs,
    decomposition_loss,
    forward_cycle_loss,
    pretrain_decomposition,
    train_stage2,
    translate_stage2,
)
from reference import central_diff_grad, grad_rel_error, guided_filter_loop

RESOLUTION = 64
SPP = 512
BOUNCES = 3
ROOT_SEED = 1
SEEDS = (0, 1, 2)

MINUTE = 60.0


@pytest.fixture(scope="session")
def report(request):
    def _record(criterion: int, passed: bool, detail: str) -> None:
        status = "PASS" if passed else "FAIL"
        request.config.acceptance_lines.append(
            f"criterion {criterion:2d}: {status} - {detail}")
    return _record


def _load_split(manifest: DatasetManifest, split: str):
    return [load_pair(d) for d in manifest.scene_dirs(split)]


def _median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=np.float64)))


@dataclass
class DatasetRun:
    manifest: DatasetManifest
    seconds: float


@pytest.fixture(scope="session")
def dataset(tmp_path_factory) -> DatasetRun:
    root = tmp_path_factory.mktemp("acceptance-data")
    t0 = time.perf_counter()
    manifest = build_datasets(200, 200, 200, 50, root_seed=ROOT_SEED,
                              out_root=root, resolution=RESOLUTION, spp=SPP,
                              bounces=BOUNCES)
    return DatasetRun(manifest, time.perf_counter() - t0)


@dataclass
class Stage1Runs:
    results: list[Stage1Result]
    heldout_identity: float
    seconds: float


@pytest.fixture(scope="session")
def stage1_runs(dataset) -> Stage1Runs:
    pairs = _load_split(dataset.manifest, "stage1")
    heldout = _load_split(dataset.manifest, "test")
    held = pairs_to_tensors(heldout)
    identity = float((held["s_o"] - held["s_p"]).abs().mean())
    t0 = time.perf_counter()
    results = [train_stage1(pairs, Stage1Config(epochs=30, seed=seed),
                            heldout=heldout) for seed in SEEDS]
    return Stage1Runs(results, identity, time.perf_counter() - t0)


@dataclass
class DecompRun:
    result: DecompResult
    train_triples: list
    held_triples: list
    seconds: float


@pytest.fixture(scope="session")
def decomp_run(dataset, stage1_runs) -> DecompRun:
    gen = stage1_runs.results[0].generator
    train_triples = decomp_triples_from_pairs(
        _load_split(dataset.manifest, "stage2"), gen)
    held_triples = decomp_triples_from_pairs(
        _load_split(dataset.manifest, "test"), gen)
    t0 = time.perf_counter()
    result = pretrain_decomposition(train_triples, DecompConfig(epochs=30),
                                    heldout=held_triples)
    return DecompRun(result, train_triples, held_triples,
                     time.perf_counter() - t0)


@dataclass
class Stage2Runs:
    results: list
    pbr: TranslationSet
    real: torch.Tensor
    translated: list[torch.Tensor]
    seconds: float


@pytest.fixture(scope="session")
def stage2_runs(dataset, stage1_runs, decomp_run) -> Stage2Runs:
    gen = stage1_runs.results[0].generator
    pbr = TranslationSet.from_pairs(_load_split(dataset.manifest, "stage2"),
                                    gen)
    real = torch.stack([img.to_tensor()
                        for img in load_real_images(dataset.manifest, "real")])
    t0 = time.perf_counter()
    results = [train_stage2(pbr, real, decomp_run.result.net,
                            Stage2Config(epochs=30, seed=seed))
               for seed in SEEDS]
    translated = [translate_stage2(r.nets, pbr)["image"] for r in results]
    return Stage2Runs(results, pbr, real, translated,
                      time.perf_counter() - t0)


def test_criterion_01_guided_filter_matches_loop_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        h = int(rng.integers(8, 33))
        w = int(rng.integers(8, 33))
        radius = int(rng.choice([1, 2, 4]))
        eps = float(rng.choice([1e-4, 1e-2, 1e-1]))
        g = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
        s = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
        got = guided_filter(
            torch.from_numpy(np.ascontiguousarray(g.transpose(2, 0, 1))),
            torch.from_numpy(np.ascontiguousarray(s.transpose(2, 0, 1))),
            GuidedFilterParams(radius, eps))
        want = guided_filter_loop(g, s, radius=radius, eps=eps)
        err = float(np.abs(got.numpy().transpose(1, 2, 0) - want).max())
        worst = max(worst, err)
    ones = torch.ones(3, 16, 16)
    exact = torch.equal(guided_filter(ones, ones, GuidedFilterParams(4, 0.01)),
                        ones)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and exact and elapsed <= 10
    report(1, ok, f"50 images, max abs err {worst:.2e} <= 1e-5, constants "
                  f"exact: {exact} ({elapsed:.1f}s <= 10s)")
    assert ok


def _autograd_vs_central_diff(make_scalar, x0: np.ndarray,
                              subset: int | None = None,
                              eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    With subset set, only that many randomly chosen coordinates are probed
    and a smaller step is used: those cases run whole networks, where a
    wide step risks stepping across a ReLU kink into the next linear
    region. float64 keeps the small step well above roundoff.
    """
    x = torch.from_numpy(x0.copy()).double().requires_grad_(True)
    make_scalar(x).backward()
    analytic = x.grad.numpy()

    def f(arr):
        with torch.no_grad():
            return float(make_scalar(torch.from_numpy(arr).double()))

    if subset is None:
        return grad_rel_error(analytic, central_diff_grad(f, x0))
    eps = 1e-8
    rng = np.random.default_rng(17)
    coords = rng.choice(x0.size, size=min(subset, x0.size), replace=False)
    numeric = np.zeros(coords.size)
    for j, k in enumerate(coords):
        xp = x0.reshape(-1).copy()
        xm = x0.reshape(-1).copy()
        xp[k] += eps
        xm[k] -= eps
        numeric[j] = (f(xp.reshape(x0.shape))
                      - f(xm.reshape(x0.shape))) / (2 * eps)
    return grad_rel_error(analytic.reshape(-1)[coords], numeric)


def test_criterion_02_gradients_match_finite_differences(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    small = (1, 3, 6, 6)
    errs = {}

    g0 = rng.uniform(0.1, 0.9, (3, 6, 6))
    s0 = rng.uniform(0.1, 0.9, (3, 6, 6))
    wt = torch.from_numpy(rng.normal(size=(3, 6, 6))).double()
    params = GuidedFilterParams(radius=2, epsilon=0.01)
    g_t = torch.from_numpy(g0).double()
    s_t = torch.from_numpy(s0).double()
    errs["guided_filter/guide"] = _autograd_vs_central_diff(
        lambda x: (wt * guided_filter(x, s_t, params)).sum(), g0)
    errs["guided_filter/src"] = _autograd_vs_central_diff(
        lambda x: (wt * guided_filter(g_t, x, params)).sum(), s0)
    errs["to_log_shading"] = _autograd_vs_central_diff(
        lambda x: (wt * to_log_shading(x)).sum(), s0)
    errs["from_log_shading"] = _autograd_vs_central_diff(
        lambda x: (wt * from_log_shading(x)).sum(),
        rng.normal(size=(3, 6, 6)) * 0.5)
    errs["compose/albedo"] = _autograd_vs_central_diff(
        lambda x: (wt * compose(x, s_t)).sum(), g0)
    errs["compose/shading"] = _autograd_vs_central_diff(
        lambda x: (wt * compose(g_t, x)).sum(), s0)

    extractor = default_feature_extractor(in_channels=3).double()
    target = torch.from_numpy(rng.uniform(0.1, 0.9, small)).double()
    errs["perceptual_loss"] = _autograd_vs_central_diff(
        lambda x: perceptual_loss(x, target, extractor),
        rng.uniform(0.1, 0.9, small))

    disc = build_discriminator(DiscriminatorSpec(), seed=3).double()
    wide = (1, 3, 16, 16)
    fake = torch.from_numpy(rng.uniform(0.1, 0.9, wide)).double()
    errs["lsgan_g_loss"] = _autograd_vs_central_diff(
        lambda x: lsgan_g_loss(disc, x), rng.uniform(0.1, 0.9, wide),
        subset=40)
    errs["lsgan_d_loss/real"] = _autograd_vs_central_diff(
        lambda x: lsgan_d_loss(disc, x, fake), rng.uniform(0.1, 0.9, wide),
        subset=40)

    nets = build_stage2_nets(Stage2Config(seed=5))
    gen_albedo = nets.gen_albedo.double()
    gen_shading = nets.gen_shading.double()
    gen_backward = nets.gen_backward.double()
    decomp = build_decomp_net(DecompNetSpec(), seed=6).double()
    i_p = torch.from_numpy(rng.uniform(0.1, 0.9, (1, 3, 8, 8))).double()
    errs["forward_cycle_loss"] = _autograd_vs_central_diff(
        lambda x: forward_cycle_loss(gen_backward, x, i_p),
        rng.uniform(0.1, 0.9, (1, 3, 8, 8)), subset=40)
    errs["backward_cycle_loss"] = _autograd_vs_central_diff(
        lambda x: backward_cycle_loss(gen_albedo, gen_shading, gen_backward,
                                      decomp, x),
        rng.uniform(0.1, 0.9, wide), subset=24)

    a_gt = torch.from_numpy(rng.uniform(0.1, 0.9, small)).double()
    s_gt = torch.from_numpy(rng.uniform(0.1, 0.9, small)).double()
    s_pred = torch.from_numpy(rng.uniform(0.1, 0.9, small)).double()
    errs["decomposition_loss/albedo"] = _autograd_vs_central_diff(
        lambda x: decomposition_loss(x, s_pred, a_gt, s_gt),
        rng.uniform(0.1, 0.9, small))
    errs["decomposition_loss/shading"] = _autograd_vs_central_diff(
        lambda x: decomposition_loss(a_gt, x, a_gt, s_gt),
        rng.uniform(0.1, 0.9, small))

    n_gt = torch.from_numpy(rng.normal(size=small)).double()
    n_gt = n_gt / n_gt.norm(dim=1, keepdim=True)
    errs["normal_task_loss"] = _autograd_vs_central_diff(
        lambda x: normal_task_loss(x, n_gt),
        rng.normal(size=small) + np.array([0, 0, 2]).reshape(1, 3, 1, 1))
    d_gt = torch.from_numpy(rng.uniform(0.5, 3.0, (1, 1, 6, 6))).double()
    errs["depth_task_loss"] = _autograd_vs_central_diff(
        lambda x: depth_task_loss(x, d_gt),
        rng.normal(size=(1, 1, 6, 6)) * 0.5)

    worst_name, worst = max(errs.items(), key=lambda kv: kv[1])
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed <= 2 * MINUTE
    report(2, ok, f"{len(errs)} ops at float64, max rel err {worst:.2e} "
                  f"({worst_name}) <= 1e-4 ({elapsed:.0f}s <= 120s)")
    assert ok, errs


def test_criterion_03_dataset_invariants_and_regeneration(
        dataset, report, tmp_path_factory):
    t0 = time.perf_counter()
    manifest = dataset.manifest
    dirs = manifest.scene_dirs("stage1")
    worst_closure = 0.0
    worst_normal = 0.0
    for d in dirs:
        pair = load_pair(d)
        for image, shading in ((pair.image_gl, pair.shading_gl),
                               (pair.image_pbr, pair.shading_pbr)):
            err = np.abs(image.data - pair.albedo.data * shading.data).max()
            worst_closure = max(worst_closure, float(err))
        norms = np.linalg.norm(pair.normal.data, axis=2)
        worst_normal = max(worst_normal, float(np.abs(norms - 1.0).max()))

    regen_root = tmp_path_factory.mktemp("acceptance-regen")
    identical = True
    for d, seed in zip(dirs, manifest.scene_seeds("stage1")):
        pair = render_pair(SceneSpec.sample(seed), resolution=RESOLUTION,
                           spp=SPP, bounces=BOUNCES)
        out = regen_root / d.name
        save_pair(out, pair)
        for f in sorted(d.iterdir()):
            if (out / f.name).read_bytes() != f.read_bytes():
                identical = False

    elapsed = time.perf_counter() - t0
    ok = (worst_closure <= 1e-5 and worst_normal <= 1e-4 and identical
          and elapsed <= 5 * MINUTE)
    report(3, ok, f"200 scenes: closure {worst_closure:.2e} <= 1e-5, "
                  f"normals off unit by {worst_normal:.2e} <= 1e-4, "
                  f"regeneration byte-identical: {identical} "
                  f"({elapsed/MINUTE:.1f}min <= 5min)")
    assert ok


def test_criterion_04_receptive_field_footprints(report):
    t0 = time.perf_counter()
    nets = build_stage2_nets(Stage2Config(seed=11))
    gen_albedo = nets.gen_albedo.eval()
    gen_shading = nets.gen_shading.eval()
    rng = np.random.default_rng(4)
    base_in = torch.from_numpy(
        rng.uniform(0.1, 0.9, (1, 3, 64, 64)).astype(np.float32))

    max_reach = 0
    hits = 0
    with torch.no_grad():
        base_out = gen_albedo(base_in)
        for _ in range(100):
            y = int(rng.integers(0, 64))
            x = int(rng.integers(0, 64))
            c = int(rng.integers(0, 3))
            probe = base_in.clone()
            probe[0, c, y, x] += 0.25
            diff = (gen_albedo(probe) - base_out).abs().amax(dim=1)[0]
            ys, xs = torch.nonzero(diff, as_tuple=True)
            if len(ys):
                hits += 1
                reach = int(torch.maximum((ys - y).abs(),
                                          (xs - x).abs()).max())
                max_reach = max(max_reach, reach)

        shade_in = torch.from_numpy(
            rng.uniform(0.2, 0.9, (1, 3, 64, 64)).astype(np.float32))
        shade_base = gen_shading(shade_in)
        probe = shade_in.clone()
        probe[0, 1, 32, 32] += 0.25
        diff = (gen_shading(probe) - shade_base).abs().amax(dim=1)[0]
        ys, xs = torch.nonzero(diff, as_tuple=True)
        diameter = 0
        if len(ys):
            diameter = max(int(ys.max() - ys.min()) + 1,
                           int(xs.max() - xs.min()) + 1)

    elapsed = time.perf_counter() - t0
    albedo_ok = hits >= 90 and max_reach <= 10
    shading_ok = diameter > 42
    ok = albedo_ok and shading_ok and elapsed <= MINUTE
    report(4, ok, f"albedo footprint reach {max_reach}px <= 10 "
                  f"(window 21, {hits}/100 probes visible); shading "
                  f"footprint diameter {diameter}px > 42 "
                  f"({elapsed:.0f}s <= 60s)")
    assert ok


def test_criterion_05_stage1_beats_identity_baseline(stage1_runs, report):
    t0 = time.perf_counter()
    ratios = [r.history[-1]["heldout_L1"] / stage1_runs.heldout_identity
              for r in stage1_runs.results]
    median = _median(ratios)
    elapsed = stage1_runs.seconds + time.perf_counter() - t0
    ok = median <= 0.60 and elapsed <= 25 * MINUTE
    report(5, ok, f"median held-out shading L1 ratio {median:.3f} <= 0.60 "
                  f"(seeds {[round(r, 3) for r in ratios]}) "
                  f"({elapsed/MINUTE:.1f}min <= 25min)")
    assert ok


def test_criterion_06_decomposition_beats_mean_baseline(decomp_run, report):
    t0 = time.perf_counter()
    result = decomp_run.result
    train_a = torch.stack([t[1].to_tensor() for t in decomp_run.train_triples])
    train_s = torch.stack([t[2].to_tensor() for t in decomp_run.train_triples])
    held_a = torch.stack([t[1].to_tensor() for t in decomp_run.held_triples])
    held_s = torch.stack([t[2].to_tensor() for t in decomp_run.held_triples])
    base_a = float(((held_a - train_a.mean(dim=(0, 2, 3),
                                           keepdim=True)) ** 2).mean())
    base_s = float(((held_s - train_s.mean(dim=(0, 2, 3),
                                           keepdim=True)) ** 2).mean())
    heads_ok = (result.heldout_albedo_mse <= 0.5 * base_a
                and result.heldout_shading_mse <= 0.5 * base_s)
    scale_gap = float(decomposition_loss(2 * held_a, held_s / 2,
                                         held_a, held_s)
                      - decomposition_loss(held_a, held_s, held_a, held_s))
    elapsed = decomp_run.seconds + time.perf_counter() - t0
    ok = heads_ok and scale_gap > 0 and elapsed <= 10 * MINUTE
    report(6, ok, f"held-out MSE albedo {result.heldout_albedo_mse:.4f} vs "
                  f"0.5*baseline {0.5 * base_a:.4f}, shading "
                  f"{result.heldout_shading_mse:.4f} vs {0.5 * base_s:.4f}; "
                  f"scale-variance gap {scale_gap:.4f} > 0 "
                  f"({elapsed/MINUTE:.1f}min <= 10min)")
    assert ok


def test_criterion_07_translation_fid_ordering(dataset, stage2_runs, report):
    t0 = time.perf_counter()
    pairs = _load_split(dataset.manifest, "stage2")
    gl = torch.stack([p.image_gl.to_tensor() for p in pairs])
    real_stats = embed_images(stage2_runs.real, seed=0)
    fid_gl = frechet_distance(embed_images(gl, seed=0), real_stats)
    fid_s1 = frechet_distance(embed_images(stage2_runs.pbr.image, seed=0),
                              real_stats)
    fid_s2 = _median(frechet_distance(embed_images(t, seed=0), real_stats)
                     for t in stage2_runs.translated)
    elapsed = stage2_runs.seconds + time.perf_counter() - t0
    ok = fid_s2 < fid_s1 < fid_gl and elapsed <= 40 * MINUTE
    report(7, ok, f"FID stage-2 {fid_s2:.2f} < stage-1 {fid_s1:.2f} < "
                  f"untranslated {fid_gl:.2f} "
                  f"({elapsed/MINUTE:.1f}min <= 40min)")
    assert ok


def test_criterion_08_channel_ratio_gap_recovery(stage2_runs, report):
    def ratio(images: torch.Tensor) -> float:
        return float(images[:, 0].mean() / images[:, 2].mean())

    source = ratio(stage2_runs.pbr.image)
    target = ratio(stage2_runs.real)
    recoveries = [(ratio(t) - source) / (target - source)
                  for t in stage2_runs.translated]
    median = _median(recoveries)
    ok = median >= 0.5
    report(8, ok, f"median R/B gap recovery {median:.2f} >= 0.50 "
                  f"(ratio {source:.3f} -> {target:.3f}, per seed "
                  f"{[round(r, 2) for r in recoveries]})")
    assert ok


def test_criterion_09_task_nets_order_by_training_domain(
        dataset, stage2_runs, report):
    manifest = dataset.manifest
    pairs = _load_split(manifest, "stage2")
    variants = {
        "gl": torch.stack([p.image_gl.to_tensor() for p in pairs]),
        "stage1": stage2_runs.pbr.image,
        "stage2": stage2_runs.translated[0],
    }
    labels = {
        "normal": torch.stack([p.normal.to_tensor() for p in pairs]),
        "depth": torch.stack([p.depth.to_tensor() for p in pairs]),
    }
    test_pairs = _load_split(manifest, "test")
    test_real = torch.stack([img.to_tensor()
                             for img in load_real_images(manifest, "test")])
    test_labels = {
        "normal": torch.stack([p.normal.to_tensor() for p in test_pairs]),
        "depth": torch.stack([p.depth.to_tensor() for p in test_pairs]),
    }

    ok = True
    details = []
    for task in ("normal", "depth"):
        t0 = time.perf_counter()
        medians = {}
        for name, images in variants.items():
            scores = []
            for seed in SEEDS:
                result = train_task_net(images, labels[task],
                                        TaskConfig(task=task, epochs=12,
                                                   seed=seed))
                metrics = evaluate_task(result, test_real, test_labels[task])
                scores.append(metrics.mean_angle if task == "normal"
                              else metrics.rmse)
            medians[name] = _median(scores)
        elapsed = time.perf_counter() - t0
        if task == "normal":
            task_ok = (medians["stage2"] < medians["gl"] - 1.0
                       and medians["stage1"] < medians["gl"])
        else:
            task_ok = (medians["stage2"] < medians["gl"]
                       and medians["stage1"] < medians["gl"])
        task_ok = task_ok and elapsed <= 30 * MINUTE
        ok = ok and task_ok
        details.append(f"{task} gl {medians['gl']:.3f} / stage1 "
                       f"{medians['stage1']:.3f} / stage2 "
                       f"{medians['stage2']:.3f} "
                       f"({elapsed/MINUTE:.1f}min <= 30min)")
    report(9, ok, "; ".join(details))
    assert ok


def test_criterion_10_metric_unit_suite(report):
    t0 = time.perf_counter()

    def stats(mu, sigma):
        return FeatureStats(np.asarray(mu, dtype=np.float64),
                            np.asarray(sigma, dtype=np.float64), n=500)

    worst = 0.0
    p = stats([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    worst = max(worst, abs(frechet_distance(p, p)))
    worst = max(worst, abs(frechet_distance(
        stats([0.0], [[1.0]]), stats([1.0], [[1.0]])) - 1.0))
    worst = max(worst, abs(frechet_distance(
        stats([0.0], [[4.0]]), stats([0.0], [[1.0]])) - 1.0))
    want = 0.25 + (2.0 - 1.0) ** 2 + (3.0 - 1.0) ** 2
    worst = max(worst, abs(frechet_distance(
        stats([0.5, 0.0], [[4.0, 0.0], [0.0, 9.0]]),
        stats([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])) - want))

    e_x = torch.tensor([1.0, 0.0, 0.0]).view(1, 3, 1, 1)
    e_y = torch.tensor([0.0, 1.0, 0.0]).view(1, 3, 1, 1)
    ones = torch.ones(1, 3, 4, 4)
    nm = normal_metrics(e_x * ones, e_x * ones)
    worst = max(worst, abs(nm.mean_angle), abs(nm.pct_below_11_25 - 100.0))
    nm = normal_metrics(e_x * ones, e_y * ones)
    worst = max(worst, abs(nm.mean_angle - 90.0), abs(nm.pct_below_30))
    nm = normal_metrics(-e_x * ones, e_x * ones)
    worst = max(worst, abs(nm.mean_angle - 180.0))

    gt = torch.ones(1, 1, 4, 4)
    dm = depth_metrics(gt.clone(), gt)
    worst = max(worst, abs(dm.rmse), abs(dm.rmse_log),
                abs(dm.pct_delta_1 - 100.0))
    dm = depth_metrics(2 * gt, gt)
    worst = max(worst, abs(dm.rmse - 1.0),
                abs(dm.rmse_log - float(np.log(2.0))), abs(dm.pct_delta_3))

    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed <= 5
    report(10, ok, f"closed-form FID and task-metric cases, max dev "
                   f"{worst:.2e} <= 1e-6 ({elapsed:.1f}s <= 5s)")
    assert ok


def _micro_config() -> PipelineConfig:
    c = PipelineConfig()
    c.data.n_stage1 = 5
    c.data.n_stage2 = 5
    c.data.n_real = 5
    c.data.n_test = 3
    c.data.resolution = 16
    c.data.spp = 8
    c.data.bounces = 2
    for section in (c.stage1, c.decomp, c.stage2, c.task):
        section.epochs = 2
        section.batch_size = 4
    c.stage2.pool_size = 4
    c.task.depth = 3
    return c


@pytest.mark.filterwarnings("ignore:.*rank deficient")
def test_criterion_11_run_all_is_deterministic(tmp_path, report):
    t0 = time.perf_counter()
    text = config_text(_micro_config())
    config_path = tmp_path / "micro.cfg"
    config_path.write_text(text)
    reports = []
    codes = []
    for name in ("first", "second"):
        out = tmp_path / name
        codes.append(cli_main(["run-all", "--config", str(config_path),
                               "--out", str(out)]))
        reports.append(PipelineReport.from_csv(
            (out / "eval" / "report.csv").read_text()))
    worst = max(abs(reports[0].rows[r][c] - reports[1].rows[r][c])
                for r in reports[0].rows for c in reports[0].rows[r])
    round_trip = config_text(parse_config_text(text)) == text
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and worst <= 1e-6 and round_trip
    report(11, ok, f"two runs agree within {worst:.2e} <= 1e-6 on every "
                   f"metric; config round-trip byte-identical: {round_trip} "
                   f"({elapsed/MINUTE:.1f}min)")
    assert ok
