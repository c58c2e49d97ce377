"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line.

Criterion 8 trains 18 models (about 20 minutes on one core).
"""

import time
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from framediff import curriculum as cu
from framediff import dfgn
from framediff import diffusion as df
from framediff import metrics as mt
from framediff import numcore as nc
from framediff import training as tr
from framediff.cli import ablate
from framediff.config import RunConfig, load_config
from framediff.masks import cluster_frames, make_condition_mask
from framediff.spritegen import SpriteConfig, generate_dataset, sample_clip

from gradcases import OP_CASES
from test_masks import brute_force_wcss

SEEDS = range(10)


# ------------------------------------------------------------------ 1

def _composition_probe(seed, temporal):
    """masked_loss(denoise(...)) as a function of each parameter tensor in turn."""
    rng = np.random.default_rng(seed)
    cfg = dfgn.DenoiserConfig(d=4, blocks=2, temporal=temporal, max_frames=4)
    sched = df.DiffusionSchedule.linear(200)
    params = dfgn.init_params(cfg, rng)
    for k in params:  # move off the zero-init fuse so every path carries gradient
        if ".fuse." in k:
            params[k] = nc.Tensor(0.3 * rng.standard_normal(params[k].shape), requires_grad=True)
    frames = rng.random((2, 8, 8, 1))
    eps = rng.standard_normal(frames.shape)
    t = int(rng.integers(1, 201))
    noisy = df.forward_noise(frames, t, eps, sched).x_t
    cmask = replace(make_condition_mask("GRT", 3, rng), keep=np.array([True, False]))
    caption = [3, 8, 11]
    worst = 0.0
    for name in params:
        def f(value, name=name):
            p = OrderedDict(params)
            p[name] = value
            pack = dfgn.pack_guidance(noisy, frames, cmask, t, dfgn.embed_text(caption, p))
            return df.masked_loss(dfgn.denoise(pack, p, cfg), eps, np.array([0.0, 1.0]))
        size = params[name].data.size
        coords = None if size <= 24 else rng.choice(size, 6, replace=False)
        worst = max(worst, nc.gradcheck(f, params[name].data, eps=1e-5, coords=coords))
    return worst


def test_criterion_1_gradient_fidelity(acceptance):
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, case in sorted(OP_CASES.items()):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            shape, f = case(rng)
            err = nc.gradcheck(f, rng.normal(size=shape), eps=1e-5)
            if err > worst_op:
                worst_op, worst_name = err, f"{name}/seed{seed}"
    worst_comp = max(_composition_probe(seed, temporal) for seed in SEEDS for temporal in ("sti", "conv3d"))
    elapsed = time.perf_counter() - start
    ok = worst_op < 1e-4 and worst_comp < 1e-4 and elapsed < 120
    acceptance(1, "gradient fidelity", ok,
               f"{len(OP_CASES)} ops x 10 seeds worst {worst_op:.2e} at {worst_name}; "
               f"masked_loss o denoise worst {worst_comp:.2e}; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2

def test_criterion_2_diffusion_oracle(acceptance):
    sched = df.DiffusionSchedule.linear(200)
    worst = {1: 0.0, 25: 0.0}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x0 = rng.random((8, 8, 8, 1))
        eps = rng.standard_normal(x0.shape)
        x_t = df.forward_noise(x0, 200, eps, sched).x_t
        for n_steps in worst:
            out = df.ddim_sample(lambda x, t: eps, x0.shape, sched, n_steps, x_init=x_t)
            worst[n_steps] = max(worst[n_steps], float(np.abs(out - x0).max()))
    ok = max(worst.values()) < 1e-8
    acceptance(2, "DDIM true-noise oracle", ok, f"max |x0 err| 1-step {worst[1]:.1e}, 25-step {worst[25]:.1e}")
    assert ok


# ------------------------------------------------------------------ 3

def _is_lloyd_fixed_point(x, clustering):
    labels, centers = clustering.assignment, clustering.centroids
    d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    if not np.array_equal(np.argmin(d, axis=1), labels):
        return False
    return all(np.allclose(centers[j], x[labels == j].mean(0), atol=1e-12) for j in range(clustering.k))


def test_criterion_3_clustering_oracle(acceptance):
    rng = np.random.default_rng(2024)
    cfg = SpriteConfig(n_min=3, n_max=8, tail=0.0)
    optimal = fixed_point = failed = 0
    identity_ok = True
    for _ in range(100):
        clip = sample_clip(rng, cfg)
        x = clip.frames.reshape(clip.frame_count, -1)
        for k in range(3, clip.frame_count + 1):
            c = cluster_frames(clip, k, rng)
            opt = brute_force_wcss(x, k)
            if c.wcss <= opt + 1e-9:
                optimal += 1
            elif _is_lloyd_fixed_point(x, c) and c.wcss <= 1.05 * opt:
                fixed_point += 1
            else:
                failed += 1
            if k == clip.frame_count:
                identity_ok &= c.wcss == 0.0 and c.representatives.tolist() == list(range(k))
    ok = failed == 0 and identity_ok
    acceptance(3, "k-means vs exhaustive partitions", ok,
               f"{optimal} optimal, {fixed_point} Lloyd fixed points within 5%, {failed} failures; "
               f"k=N identity {'held' if identity_ok else 'broken'}")
    assert ok


# ------------------------------------------------------------------ 4

def _realized_trace(losses, total):
    """Fused-target bookkeeping alone (no sampling), fed an arbitrary loss trace."""
    state = cu.CurriculumState.create(total, 3, 12)
    out = []
    for t, loss in enumerate(losses):
        static = cu.static_entropy(cu.static_grid(t, total, 3, 12), state.intrinsic)
        _, realized = cu.fused_target(state, static, cu.adaptive_entropy(state, static, state.p_star))
        out.append(realized)
        state.p_star = cu.pid_update(state.pid, cu.loss_deviation(state, loss))
    return np.array(out)


def test_criterion_4_curriculum_monotonicity(acceptance):
    total = RunConfig().steps
    ent = cu.IntrinsicEntropy.default(3, 12)
    h_bar = np.array([cu.static_entropy(cu.static_grid(t, total, 3, 12), ent) for t in range(total + 1)])
    strict = bool(np.all(np.diff(h_bar) > 0))

    rng = np.random.default_rng(7)
    monotone = 0
    for _ in range(100):
        scale = rng.uniform(0.1, 5.0)
        losses = scale * rng.random(total)
        monotone += bool(np.all(np.diff(_realized_trace(losses, total)) >= 0))

    sched = cu.CurriculumScheduler("dcl", total, 3, 12, kp=0.0, ki=0.0, kd=0.0)
    draw = np.random.default_rng(8)
    exact = True
    for t in range(total):
        plan = sched.plan(draw)
        grid = cu.static_grid(t, total, 3, 12)
        exact &= plan.realized_h == cu.static_entropy(grid, ent) and np.array_equal(plan.support, grid.probs)
        sched.observe(draw.random())
    ok = strict and monotone == 100 and exact
    acceptance(4, "curriculum monotonicity", ok,
               f"H static strictly increasing: {strict} (min step {np.diff(h_bar).min():.1e}); "
               f"realized non-decreasing in {monotone}/100 traces; zero-gain bit-exact: {exact}")
    assert ok


# ------------------------------------------------------------------ 5

def test_criterion_5_pid_contract(acceptance):
    delta = cu.CurriculumState.create(10, 3, 12).delta
    checked = []
    ok = True
    for ki, kp, kd, dev in [(0.05, 1.0, 0.25, 0.2), (0.05, 1.0, 0.25, 3.0), (0.5, 0.0, 0.0, 0.05),
                            (2.0, 0.3, 1.0, 0.01), (1e-3, 1.0, 0.25, 1.0)]:
        pid = cu.PidState(kp, ki, kd, bound=cu.windup_bound(ki, delta))
        outs, clamped = [], None
        for i in range(100_000):
            outs.append(cu.pid_update(pid, dev))
            if pid.integral == -pid.bound:
                clamped = i
                break
        outs.extend(cu.pid_update(pid, dev) for _ in range(5))
        decreasing = all(b < a for a, b in zip(outs[:clamped + 1], outs[1:clamped + 1]))
        flat = len(set(outs[clamped:])) == 1
        ok &= clamped is not None and decreasing and flat
        checked.append(clamped)
    zero = cu.PidState(0.0, 0.0, 0.0, bound=cu.windup_bound(0.0, delta))
    zero_ok = all(cu.pid_update(zero, d) == 0.0 for d in np.random.default_rng(1).normal(0, 5, 1000))
    ok &= zero_ok
    acceptance(5, "PID contract", ok,
               f"strictly decreasing until windup at steps {checked}, flat afterwards; zero gains give 0: {zero_ok}")
    assert ok


# ------------------------------------------------------------------ 6

def test_criterion_6_sampler_tilt(acceptance):
    ent = cu.IntrinsicEntropy.default(3, 12)
    h = ent.table()
    worst = 0.0
    for t in (0, 250, 1000, 1750, 2000):
        grid = cu.static_grid(t, 2000, 3, 12)
        lo = np.sum(cu._tilt(np.log(grid.probs), h, cu.BETA_BRACKET[0]) * h)
        hi = np.sum(cu._tilt(np.log(grid.probs), h, cu.BETA_BRACKET[1]) * h)
        for target in np.linspace(h.min() - 1, h.max() + 1, 41):
            q, _ = cu.tilted_distribution(grid, ent, target)
            worst = max(worst, abs(float(np.sum(q * h)) - min(max(target, lo), hi)))

    grid = cu.static_grid(600, 2000, 3, 12)
    q, beta = cu.tilted_distribution(grid, ent, cu.static_entropy(grid, ent) + 0.5)
    rng = np.random.default_rng(11)
    draws = 100_000
    counts = np.zeros_like(q)
    for _ in range(draws):
        task, n = cu.draw_cell(q, 3, rng)
        counts[cu.TASKS.index(task), n - 3] += 1
    z = np.abs(counts - draws * q) / np.sqrt(draws * q * (1 - q))
    ok = worst < 1e-3 and bool(np.all(z <= 3))
    acceptance(6, "sampler tilt", ok,
               f"worst |E_Q[h] - clamped target| {worst:.1e}; 1e5 draws max |z| {z.max():.2f} over {q.size} cells")
    assert ok


# ------------------------------------------------------------------ 7

def test_criterion_7_metric_sanity(acceptance):
    rng = np.random.default_rng(3)
    spec = mt.FeatureSpec.create(8 * 8 * 8, m=16, seed=0)
    a = [rng.random((8, 8, 8, 1)) for _ in range(60)]
    b = [rng.random((8, 8, 8, 1)) ** 2 for _ in range(50)]
    v = rng.normal(0, 0.05, size=(8, 8, 8, 1))
    delta = spec.projection @ v.reshape(-1)
    same = mt.toy_fvd(a, a, spec)
    shift = abs(mt.toy_fvd(a, [c + v for c in a], spec) - float(delta @ delta))
    sym = abs(mt.toy_fvd(a, b, spec) - mt.toy_fvd(b, a, spec))
    ok = same <= 1e-8 and shift <= 1e-6 and sym <= 1e-8
    acceptance(7, "metric sanity", ok, f"fvd(X,X) {same:.1e}; mean-shift err {shift:.1e}; asymmetry {sym:.1e}")
    assert ok


# ------------------------------------------------------------------ 8

SLACK = 1.02


@pytest.mark.slow
def test_criterion_8_directional_ablation(acceptance):
    cfg = RunConfig()  # 8x8x1 sprites, N in [3, 12], 2000 steps
    start = time.perf_counter()
    table = ablate(cfg, seeds=(0, 1, 2))
    elapsed = time.perf_counter() - start
    cell = {(row[0], row[1]): row for row in table}
    loss = {s: cell["sti", s][2] for s in ("none", "lcl", "dcl")}
    smooth = {s: cell["sti", s][4] for s in ("lcl", "dcl")}
    fvd = {t: cell[t, "dcl"][3] for t in ("sti", "conv3d")}
    checks = {
        "loss dcl<=lcl": loss["dcl"] <= SLACK * loss["lcl"],
        "loss lcl<=none": loss["lcl"] <= SLACK * loss["none"],
        "smooth dcl<=lcl": smooth["dcl"] <= SLACK * smooth["lcl"],
        "fvd sti<=conv3d": fvd["sti"] <= SLACK * fvd["conv3d"],
        "time per cell < 30 min": elapsed / len(table) < 1800,
    }
    for row in table:
        print("  ", *(f"{v:.5g}" if isinstance(v, float) else v for v in row[:5]))
    ok = all(checks.values())
    acceptance(8, "directional ablation", ok,
               f"median eval loss none {loss['none']:.4f} lcl {loss['lcl']:.4f} dcl {loss['dcl']:.4f}; "
               f"smoothness lcl {smooth['lcl']:.4f} dcl {smooth['dcl']:.4f}; "
               f"toy_fvd sti {fvd['sti']:.3f} conv3d {fvd['conv3d']:.3f}; {elapsed / 60:.1f} min total; "
               + ", ".join(k for k, v in checks.items() if not v) + (" failed" if not ok else "all within 2%"))
    assert ok, checks


# ------------------------------------------------------------------ 9

def test_criterion_9_determinism_and_persistence(acceptance, tiny_config, tmp_path):
    cfg = load_config(tiny_config)
    _, clips = generate_dataset(cfg.count, cfg.sprite_config(), cfg.seed)
    runs = [tr.Trainer(cfg, clips) for _ in range(2)]
    logs = [tr.log_to_csv(r.run()) for r in runs]
    same_log = logs[0] == logs[1]

    clip = next(c for c in clips if c.frame_count == cfg.n_max)
    dumps = []
    for r in runs:
        cmask = make_condition_mask("PDT", clip.frame_count, 5)
        dumps.append(tr.generate(r.params, cfg, "PDT", clip.frames, clip.caption, 9, cmask=cmask).tobytes())
    same_dump = dumps[0] == dumps[1]

    part = tr.Trainer(cfg, clips)
    part.run(until=cfg.steps // 2)
    resumed = tr.Trainer.resume(part.save(tmp_path / "half.ckpt"), clips)
    resumed.run()
    same_resume = tr.log_to_csv(part.log + resumed.log) == logs[0] and all(
        resumed.params[k].data.tobytes() == runs[0].params[k].data.tobytes() for k in resumed.params)
    ok = same_log and same_dump and same_resume
    acceptance(9, "determinism and persistence", ok,
               f"train logs identical: {same_log}; sample dumps identical: {same_dump}; "
               f"resume bit-exact: {same_resume}")
    assert ok
