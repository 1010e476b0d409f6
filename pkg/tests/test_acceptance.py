"""The nine headline criteria, each at its stated tolerance and runtime budget."""
import math
import statistics
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from diffguide.data import Dataset, GridMaskSpec, gen_gridmask_dataset, split
from diffguide.denoiser import AnalyticDenoiser, GmmSpec, MlpDenoiser, gmm_score
from diffguide.diffusion import estimate_x0, noising
from diffguide.evaluation import MomentSummary, cas, class_fidelity, frechet_distance, miou, train_oracle_classifier
from diffguide.guidance import (AnalyticGuidance, GuidanceConfig, analytic_posterior_gradient, clean_image_guidance,
                                guidance_gradient, train_clean_classifier, train_few_shot)
from diffguide.pipelines import load_config, run_experiment
from diffguide.samplers import SamplerConfig, sample_loop
from diffguide.schedule import build_linear

from conftest import ACCEPTANCE, rel_err
from test_denoiser import mc_score
from test_guidance import fd_gradient, gmm_marginal_at, guided_loglik

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SYM = GmmSpec([0.5, 0.5], [[-3.0, 0.0], [3.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])
STD2 = GmmSpec([1.0], [[0.0, 0.0]], [[1.0, 1.0]])


@contextmanager
def criterion(k, budget_s):
    """Record a PASS/FAIL line for criterion ``k``; the body sets ``checks`` entries and details."""
    rec = {"checks": {}, "detail": ""}
    t0 = time.time()
    try:
        yield rec
    finally:
        dt = time.time() - t0
        rec["checks"][f"runtime {dt:.0f}s < {budget_s}s"] = dt < budget_s
        ok = bool(rec["checks"]) and all(rec["checks"].values())
        failed = [k2 for k2, v in rec["checks"].items() if not v]
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {rec['detail']}  ({dt:.1f}s)"
        if failed:
            line += "  failed: " + "; ".join(failed)
        ACCEPTANCE[k] = line
        print(line)
    assert all(rec["checks"].values()), line


def run_metrics(name, tmp_path):
    rows = run_experiment(load_config(CONFIGS / f"{name}.json"), tmp_path / name)
    out: dict[int, dict[str, float]] = {}
    for r in rows:
        out.setdefault(r["seed"], {})[r["metric"]] = r["value"]
    return out


def test_criterion_1_round_trip():
    with criterion(1, 5) as rec:
        s = build_linear(1000)
        g = np.random.default_rng(0)
        x0, eps = g.standard_normal((10_000, 2)), g.standard_normal((10_000, 2))
        ts = g.integers(1, 1001, 10_000)
        err = 0.0
        for t in np.unique(ts):
            sel = ts == t
            err = max(err, np.max(np.abs(estimate_x0(s, noising(s, x0[sel], int(t), eps[sel]), int(t),
                                                     eps[sel]) - x0[sel])))
        rec["checks"]["max error < 1e-5"] = err < 1e-5
        rec["detail"] = f"max round-trip error {err:.2e}"


def test_criterion_2_sampler_against_analytic_truth():
    with criterion(2, 120) as rec:
        s = build_linear(100)
        d = AnalyticDenoiser(STD2, s)
        x, _ = sample_loop(d, s, SamplerConfig(method="ddpm", seed=0, chains=10_000))
        mean, var = np.abs(x.mean(0)).max(), np.abs(x.var(0) - 1).max()
        rec["checks"]["|mean| < 0.05"] = mean < 0.05
        rec["checks"]["|var - 1| < 0.1"] = var < 0.1
        m = MlpDenoiser.init((2,), 100, hidden=(32, 32, 32), seed=0)
        cfg = SamplerConfig(method="ddim", num_steps=50, eta=0.0, seed=7, chains=1000)
        rec["checks"]["ddim eta=0 bit-reproducible"] = np.array_equal(sample_loop(m, s, cfg)[0],
                                                                     sample_loop(m, s, cfg)[0])
        y, _ = sample_loop(d, s, SamplerConfig(method="ddim", eta=1.0, seed=1, chains=10_000))
        p = min(stats.ks_2samp(x[:, j], y[:, j]).pvalue for j in range(2))
        rec["checks"]["KS p > 0.01"] = p > 0.01
        rec["detail"] = f"max|mean| {mean:.4f}, max|var-1| {var:.4f}, KS p {p:.3f}"


def test_criterion_3_score_and_guidance_math():
    with criterion(3, 120) as rec:
        g = GmmSpec([0.3, 0.7], [[-2.0, 1.0], [1.5, -0.5]], [[0.5, 1.0], [1.0, 0.3]])
        s = build_linear(1000)
        t = 250
        mc = max(np.linalg.norm(gmm_score(g, s, x[None], t)[0] - mc_score(g, float(s.alpha_bar(t)), x, seed=i))
                 / np.linalg.norm(mc_score(g, float(s.alpha_bar(t)), x, seed=i))
                 for i, x in enumerate(np.array([[1.5, 1.0], [-2.5, -0.5], [0.0, 1.5], [2.0, -1.5]])))
        rec["checks"]["score vs Monte Carlo < 1%"] = mc < 0.01

        s100 = build_linear(100)
        m = MlpDenoiser.init((2,), 100, hidden=(16, 16, 16), seed=0, schedule_ref=s100.to_config())
        xs, ys = SYM.sample(200, np.random.default_rng(1))
        feat = train_few_shot(m, xs, ys, GuidanceConfig(t_feat=40), steps=20, seed=0, s=s100)
        clean = train_clean_classifier(xs, ys, steps=20, seed=0, s=s100)
        fd = 0.0
        r = np.random.default_rng(3)
        for _ in range(50):
            x = r.normal(0, 2, (1, 2))
            tt, k = int(r.integers(1, 101)), int(r.integers(0, 2))
            for fn, clf in ((guidance_gradient, feat), (clean_image_guidance, clean)):
                got = fn(m, clf, s100, x, tt, k)
                ref = fd_gradient(guided_loglik(m, clf, s100, tt, np.array([k])), x)
                if np.max(np.abs(ref)) > 1e-6:
                    fd = max(fd, rel_err(got, ref))
        rec["checks"]["guidance vs finite differences < 1e-4"] = fd < 1e-4

        from diffguide.denoiser import component_score, responsibilities
        ident = 0.0
        for seed in range(20):
            g0 = np.random.default_rng(seed)
            gg = GmmSpec([0.4, 0.6], g0.normal(0, 2, (2, 2)), g0.uniform(0.3, 2, (2, 2)))
            x = g0.normal(0, 2, (50, 2))
            tt = int(g0.integers(1, 101))
            resp = responsibilities(gmm_marginal_at(gg, s100, tt), x)
            lhs = sum(resp[:, [k]] * analytic_posterior_gradient(gg, s100, x, tt, k) for k in range(2))
            lhs = lhs + gmm_score(gg, s100, x, tt)
            rhs = sum(resp[:, [k]] * component_score(gg, s100, x, tt, k) for k in range(2))
            ident = max(ident, np.max(np.abs(lhs - rhs)))
        rec["checks"]["posterior gradient identity < 1e-8"] = ident < 1e-8
        rec["detail"] = f"MC rel err {mc:.4f}, FD rel err {fd:.1e}, identity err {ident:.1e}"


def test_criterion_4_analytic_guided_sampling():
    with criterion(4, 180) as rec:
        s = build_linear(100, 1e-3, 0.2)
        hook = AnalyticGuidance(SYM, s, 1, lam=1.0)
        x, _ = sample_loop(AnalyticDenoiser(SYM, s), s, SamplerConfig(method="ddpm", seed=0, chains=10_000), hook)
        ref, _ = SYM.component(1).sample(10_000, np.random.default_rng(1))
        fid = class_fidelity(x, SYM, 1)
        fd = frechet_distance(MomentSummary.from_samples(x), MomentSummary.from_samples(ref))
        rec["checks"]["class_fidelity >= 0.99"] = fid >= 0.99
        rec["checks"]["frechet < 0.1"] = fd < 0.1
        rec["detail"] = f"fidelity {fid:.4f}, frechet {fd:.4f}"


@pytest.mark.slow
def test_criterion_5_feature_guidance_beats_clean_baseline(tmp_path):
    with criterion(5, 15 * 60) as rec:
        res = run_metrics("bench_attr", tmp_path)
        parts = []
        for seed, m in sorted(res.items()):
            ff, cf = m["guide/feature@100/class_fidelity"], m["guide/clean@100/class_fidelity"]
            fd_f, fd_c = m["guide/feature@100/frechet"], m["guide/clean@100/frechet"]
            rec["checks"][f"seed {seed}: fidelities >= 0.9"] = ff >= 0.9 and cf >= 0.9
            rec["checks"][f"seed {seed}: feature frechet < clean frechet"] = fd_f < fd_c
            parts.append(f"s{seed} fid {ff:.3f}/{cf:.3f} FD {fd_f:.4f}<{fd_c:.4f}")
        rec["checks"]["three seeds"] = len(res) == 3
        rec["detail"] = "; ".join(parts)


@pytest.mark.slow
def test_criterion_6_mask_guidance(tmp_path):
    with criterion(6, 20 * 60) as rec:
        res = run_metrics("bench_mask", tmp_path)
        parts = []
        for seed, m in sorted(res.items()):
            a, b = m["guide/feature@10/miou"], m["guide/feature@100/miou"]
            rec["checks"][f"seed {seed}: 10-step mIoU >= 0.6"] = a >= 0.6
            rec["checks"][f"seed {seed}: 100-step > 10-step"] = b > a
            parts.append(f"s{seed} mIoU {a:.3f} -> {b:.3f}")
        rec["checks"]["three seeds"] = len(res) == 3
        rec["detail"] = "; ".join(parts)


@pytest.mark.slow
def test_criterion_7_rejection_improves_cas(tmp_path):
    with criterion(7, 30 * 60) as rec:
        res = run_metrics("bench_augment", tmp_path)
        parts = []
        for seed, m in sorted(res.items()):
            f, c, ft = m["cas/filtered"], m["cas/cfg"], m["cas/finetune"]
            rec["checks"][f"seed {seed}: filtered > cfg"] = f > c
            rec["checks"][f"seed {seed}: cfg >= finetune"] = c >= ft
            rec["checks"][f"seed {seed}: filtered - cfg >= 0.02"] = f - c >= 0.02
            parts.append(f"s{seed} filt {f:.4f} cfg {c:.4f} ft {ft:.4f}")
        rec["checks"]["three seeds"] = len(res) == 3
        rec["detail"] = "; ".join(parts)


@pytest.mark.slow
def test_criterion_8_augmentation_sweep(tmp_path):
    with criterion(8, 45 * 60) as rec:
        res = run_metrics("bench_augment_sweep", tmp_path)
        med = [statistics.median(m[f"sweep/accuracy@{k}x"] for m in res.values()) for k in range(4)]
        gains = np.diff(med)
        for k in (1, 2, 3):
            rec["checks"][f"real+{k}x >= real-only"] = med[k] >= med[0]
        rec["checks"]["gains non-increasing"] = bool(gains[0] >= gains[1] >= gains[2])
        rec["checks"]["three seeds"] = len(res) == 3
        rec["detail"] = "median accuracy " + " ".join(f"{k}x {a:.4f}" for k, a in enumerate(med))


def test_criterion_9_metric_units():
    with criterion(9, 300) as rec:
        one = frechet_distance(MomentSummary(np.zeros(1), np.eye(1), 10), MomentSummary(np.ones(1), np.eye(1), 10))
        rec["checks"]["1-D frechet == 1.0"] = one == 1.0
        mi = miou(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
        rec["checks"]["2x2 miou == 7/12"] = math.isclose(mi, 7 / 12, rel_tol=0, abs_tol=1e-15)
        train, val = split(gen_gridmask_dataset(GridMaskSpec(), 3000, 0), (0.5, 0.5), seed=0)
        ref = train_oracle_classifier(train, 3, seed=0).accuracy(val.x, val.labels)
        copy = cas(Dataset(train.x.copy(), train.labels.copy()), val, 3, seed=0)
        chance = cas(Dataset(train.x, np.random.default_rng(0).permutation(train.labels)), val, 3, seed=0)
        rec["checks"]["copy-of-real within 0.02"] = abs(copy - ref) <= 0.02
        rec["checks"]["shuffled labels at chance +-0.05"] = abs(chance - 1 / 3) <= 0.05
        rec["detail"] = f"frechet {one}, miou {mi:.6f}, copy {copy:.4f} vs ref {ref:.4f}, shuffled {chance:.4f}"
