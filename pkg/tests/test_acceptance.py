"""The eight acceptance criteria, one test each, each emitting a PASS/FAIL line."""
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import ACCEPTANCE_LINES
from oracles import (audit_transform, assd_oracle, dense_transformer_oracle, finite_difference_check,
                     node_recall_oracle, overlap_oracle, random_mask_pair)

from lnddpm.conditions import build_anatomy_mask, one_hot, transform_condition
from lnddpm.denoiser import DenoiserConfig, DenoiserState, SpatialTransformer, assemble_input, forward
from lnddpm.diffusion import p_sample_step, q_sample, q_step
from lnddpm.metrics import assd, node_recall, voxel_overlap_metrics
from lnddpm.phantom import PhantomSpec, generate_phantom
from lnddpm.schedule import make_cosine_schedule
from lnddpm.volumes import ConditionStack

ROOT = Path(__file__).resolve().parent.parent

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(number, name):
    detail = {}
    start = time.perf_counter()
    ok = False
    try:
        yield detail
        ok = True
    finally:
        secs = time.perf_counter() - start
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({secs:.1f}s{', ' + extra if extra else ''})"
        ACCEPTANCE_LINES.append(line)
        print(line)


def test_1_schedule_suite():
    with criterion(1, "cosine schedule invariants") as d:
        t0 = time.perf_counter()
        sched = make_cosine_schedule(300, 0.008)
        ab = sched.alpha_bar
        assert np.all(np.diff(ab) < 0)
        cum = np.cumprod(sched.alpha)
        rel = float(np.max(np.abs(cum - ab) / ab))
        assert rel <= 1e-12
        assert ab[-1] < 0.01
        assert np.all(sched.beta <= 0.999) and np.all(sched.beta > 0)
        elapsed = time.perf_counter() - t0
        d.update(alpha_bar_T=f"{ab[-1]:.2e}", cumprod_rel=f"{rel:.1e}", runtime=f"{elapsed:.3f}s")
        assert elapsed < 1.0


def test_2_diffusion_algebra():
    with criterion(2, "forward/reverse algebra and Monte-Carlo marginal") as d:
        t0 = time.perf_counter()
        sched = make_cosine_schedule(100)
        rng = np.random.default_rng(0)
        x0 = rng.uniform(-1, 1, (8, 8, 8))
        eps = rng.standard_normal((8, 8, 8))
        x1 = q_sample(x0, 1, eps, sched)
        rec = p_sample_step(x1, eps, 1, np.zeros_like(x0), sched)
        linf = float(np.max(np.abs(rec - x0)))
        assert linf < 1e-5
        worst = 0.0
        n = 10_000
        for t in (1, 10, 50):
            base = rng.uniform(-1, 1, (2, 2, 2))
            batch = np.broadcast_to(base, (n, 2, 2, 2))
            closed = q_sample(batch, t, rng.standard_normal(batch.shape), sched)
            x = batch.copy()
            for s in range(1, t + 1):
                x = q_step(x, s, rng.standard_normal(x.shape), sched)
            var = 1 - sched.alpha_bar[t - 1]
            se = math.sqrt(var / n)
            z = np.abs(closed.mean(0) - x.mean(0)) / (math.sqrt(2) * se)
            z_true = np.abs(x.mean(0) - math.sqrt(sched.alpha_bar[t - 1]) * base) / se
            worst = max(worst, float(z.max()), float(z_true.max()))
        elapsed = time.perf_counter() - t0
        d.update(inversion_linf=f"{linf:.1e}", worst_z=f"{worst:.2f}", runtime=f"{elapsed:.1f}s")
        assert worst < 3.0
        assert elapsed < 30.0


TOY = dict(patch_shape=(8, 8, 8), base_channels=8, channel_multipliers=(1, 2), anatomy_channels=2,
           attention_resolution=4, num_heads=2, context_dim=8)


def test_3_conditioning_mechanics():
    with criterion(3, "conditioning mechanics") as d:
        x = torch.zeros(1, 1, 8, 8, 8)
        assert assemble_input(x, torch.zeros(1, 2, 8, 8, 8), x).shape[1] == 2 + 2
        assert assemble_input(torch.zeros(128, 128, 128), torch.zeros(14, 128, 128, 128),
                              torch.zeros(128, 128, 128)).shape[0] == 14 + 2

        state = DenoiserState.create(DenoiserConfig(**TOY), seed=0)
        with torch.no_grad():
            for name, p in state.ema_model.named_parameters():
                if "proj_out" in name:
                    p.copy_(torch.randn_like(p) * 0.3)
        g = torch.Generator().manual_seed(1)
        x_t = torch.randn((1, 1, 8, 8, 8), generator=g)
        labels = torch.randint(0, 3, (8, 8, 8), generator=g)
        anatomy = torch.stack([(labels == 1).float(), (labels == 2).float()])[None]
        zero = torch.zeros(1, 1, 8, 8, 8)
        with torch.no_grad():
            noop = torch.equal(forward(state, x_t, (anatomy, zero), 9),
                               forward(state, x_t, (anatomy, zero), 9, zero_transformer=True))
        assert noop

        torch.manual_seed(2)
        blk = SpatialTransformer(4, 3, 1, groups=2).double()
        with torch.no_grad():
            for p in blk.parameters():
                p.copy_(torch.randn_like(p) * 0.5)
        h = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64)
        tok = torch.randn(1, 8, 3, dtype=torch.float64)
        ones = torch.ones(1, 2, 2, 2)
        with torch.no_grad():
            saturation = torch.equal(blk(h, tok, ones, "LD"), blk(h, tok, ones, "GA"))
            gate = (torch.rand(1, 2, 2, 2, generator=g) < 0.5).double()
            gate[0, 0, 0, 0] = 1
            err = 0.0
            for mode in ("LD", "GA", "LA"):
                got = blk(h, tok, gate, mode)[0].numpy()
                ref = dense_transformer_oracle(blk, h[0].numpy(), tok[0].numpy(), gate[0].numpy(), mode)
                err = max(err, float(np.max(np.abs(got - ref))))
        d.update(ld_noop_bitwise=noop, ld_ones_equals_ga=saturation, oracle_err=f"{err:.1e}")
        assert saturation
        assert err < 1e-5


def test_4_gradient_check():
    with criterion(4, "finite-difference gradient check") as d:
        t0 = time.perf_counter()
        results = finite_difference_check(n_params=10, h=1e-3, seed=0)
        worst = max(r[-1] for r in results)
        elapsed = time.perf_counter() - t0
        d.update(params=len(results), worst_rel=f"{worst:.1e}", runtime=f"{elapsed:.1f}s")
        assert len(results) >= 10
        assert worst < 1e-2
        assert elapsed < 120


def _phantom_stack(seed):
    spec = PhantomSpec(organ_count=3, node_count_range=(1, 3), rng_seed=seed)
    image, anatomy, ln = generate_phantom(spec)
    lab = build_anatomy_mask(anatomy, image, [1, 2, 3], channels=5)
    return ConditionStack(one_hot(lab, 5), ln.data)


def test_5_condition_transforms():
    with criterion(5, "500 seeded condition transforms") as d:
        overlap = changed = law = 0
        removed = 0
        for case in range(50):
            stack = _phantom_stack(10_000 + case)
            for k in range(10):
                out = transform_condition(stack, case * 100 + k)
                a = audit_transform(stack, out)
                overlap += a["overlap_voxels"] > 0
                changed += a["anatomy_changed"]
                law += a["count_law"]
                removed += a["n_out"] == a["n_in"] - 1
        d.update(calls=500, overlap_violations=overlap, anatomy_changes=changed, count_law_violations=law,
                 removals=removed)
        assert overlap == 0 and changed == 0 and law == 0


def test_6_metric_oracles():
    with criterion(6, "metric oracles on 100 random mask pairs") as d:
        rng = np.random.default_rng(2024)
        bad_overlap = bad_assd = bad_nr = bad_identity = 0
        for _ in range(100):
            a, b = random_mask_pair(rng)
            sp = tuple(rng.uniform(0.5, 2.0, 3))
            got = voxel_overlap_metrics(a, b)
            bad_overlap += not np.allclose(got, overlap_oracle(a, b), rtol=0, atol=1e-9)
            bad_assd += abs(assd(a, b, sp) - assd_oracle(a, b, sp)) > 1e-9
            bad_nr += node_recall(a, b) != node_recall_oracle(a, b)
            bad_identity += abs(got[0] - 2 * got[1] / (1 + got[1])) > 1e-9
        d.update(overlap_mismatch=bad_overlap, assd_mismatch=bad_assd, node_recall_mismatch=bad_nr,
                 dice_jaccard_violations=bad_identity)
        assert bad_overlap == bad_assd == bad_nr == bad_identity == 0


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    from lnddpm.experiment import run_desk_experiment
    work = tmp_path_factory.mktemp("desk")
    result = run_desk_experiment(work, ROOT / "configs" / "desk.yaml", ROOT / "configs" / "desk_phantom.yaml",
                                 n_cases=8, n_samples=8, seed=0)
    return work, result


@pytest.mark.slow
def test_7_desk_experiment(desk):
    with criterion(7, "desk experiment sample fidelity") as d:
        work, r = desk
        log = np.loadtxt(work / "diffusion" / "train_log.csv", delimiter=",", skiprows=1)
        ratio = r["sample_gap_mean"] / r["train_gap"]
        d.update(iterations=int(log[-1, 0]), train_gap=f"{r['train_gap']:.3f}",
                 sample_gap=f"{r['sample_gap_mean']:.3f}", ratio=f"{ratio:.2f}",
                 in_range=f"{r['fraction_in_range']:.4f}", finite=r["finite"])
        assert int(log[-1, 0]) == 2000
        assert r["finite"]
        assert r["fraction_in_range"] >= 0.99
        assert ratio >= 0.25


@pytest.mark.slow
def test_8_segmentation_strategies(desk, tmp_path):
    from lnddpm.cli import main
    with criterion(8, "segmentation strategies and evaluation") as d:
        work, _ = desk
        real, synt = work / "prepared", work / "synthetic"
        cfg = ROOT / "configs" / "desk.yaml"
        drops = {}
        for strategy in ("real", "synt", "real+synt"):
            out = tmp_path / strategy.replace("+", "_")
            args = ["train-seg", "--strategy", strategy, "--multiplier", "10", "--config", str(cfg), "--out", str(out)]
            if strategy != "synt":
                args += ["--real", str(real)]
            if strategy != "real":
                args += ["--synt", str(synt)]
            assert main(args) == 0
            losses = np.loadtxt(out / "seg_train_log.csv", delimiter=",", skiprows=1)[:, 1]
            drops[strategy] = (float(losses[:10].mean()), float(losses[-10:].mean()))
        assert main(["infer-seg", "--checkpoint", str(tmp_path / "real_synt" / "segmenter.pt"),
                     "--data", str(real), "--out", str(tmp_path / "pred")]) == 0
        assert main(["evaluate", "--pred", str(tmp_path / "pred"), "--gt", str(real),
                     "--out", str(tmp_path / "report")]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        metrics = ("dsc", "iou", "recall", "precision", "assd_mm", "node_recall")

        composition = {}
        for m in (5, 10, 20):
            out = tmp_path / f"mult{m}"
            assert main(["train-seg", "--strategy", "real+synt", "--multiplier", str(m), "--config", str(cfg),
                         "--real", str(real), "--synt", str(synt), "--iterations", "1", "--out", str(out)]) == 0
            plan = json.loads((out / "epoch_plan.json").read_text())["plan"]
            composition[m] = (sum(s == "real" for s, _ in plan), sum(s == "synt" for s, _ in plan))
        d.update(loss_first_last={k: f"{a:.3f}->{b:.3f}" for k, (a, b) in drops.items()},
                 metrics=",".join(m for m in metrics if m in report),
                 composition={m: f"{r}r+{s}s" for m, (r, s) in composition.items()})
        assert all(b < a for a, b in drops.values())
        assert all(m in report for m in metrics)
        assert all(s == m * r for m, (r, s) in composition.items())
