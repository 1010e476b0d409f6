import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from diffguide.denoiser import (AnalyticDenoiser, GmmSpec, MlpDenoiser, TrainConfig, component_score, gmm_score,
                                responsibilities, train_denoiser)
from diffguide.evaluation import MomentSummary, class_fidelity, frechet_distance
from diffguide.guidance import (AnalyticGuidance, ClassifierGuidance, GuidanceClassifier, GuidanceConfig,
                                analytic_posterior_gradient, apply_guidance, clean_image_guidance, guidance_gradient,
                                rejection_filter, train_classifier, train_clean_classifier, train_few_shot)
from diffguide.samplers import SamplerConfig, sample_loop
from diffguide.schedule import _from_alphas, build_linear

from conftest import rel_err

SYM = GmmSpec([0.5, 0.5], [[-3.0, 0.0], [3.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])


@pytest.fixture(scope="module")
def gmm_model():
    s = build_linear(1000)
    x, y = SYM.sample(20_000, np.random.default_rng(0))
    m = MlpDenoiser.init((2,), 1000, seed=0, schedule_ref=s.to_config())
    train_denoiser(m, x, s, TrainConfig(steps=4000, batch_size=128, seed=0))
    return s, m, x, y


def few_shot(x, y, per=50):
    idx = np.concatenate([np.flatnonzero(y == k)[:per] for k in (0, 1)])
    return x[idx], y[idx]


def test_apply_guidance_examples():
    s = _from_alphas("custom", np.array([0.75]), {})
    assert apply_guidance(np.array([0.5]), np.array([2.0]), s, 1, 1.0)[0] == pytest.approx(-0.5)
    e = np.array([0.1, -0.2])
    np.testing.assert_array_equal(apply_guidance(e, np.array([3.0, 4.0]), s, 1, 0.0), e)
    np.testing.assert_array_equal(apply_guidance(e, np.zeros(2), s, 1, 2.0), e)
    with pytest.raises(ValueError):
        apply_guidance(e, np.zeros(3), s, 1, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(-3, 3), st.floats(0, 4), st.integers(1, 100))
def test_apply_guidance_linear_in_grad(g1, g2, a, lam, t):
    s = build_linear(100)
    e = np.array([0.3, -0.1, 0.2])
    g1, g2 = np.array(g1), np.array(g2)
    lhs = apply_guidance(e, a * g1 + g2, s, t, lam) - e
    rhs = a * (apply_guidance(e, g1, s, t, lam) - e) + (apply_guidance(e, g2, s, t, lam) - e)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_analytic_posterior_gradient_examples():
    s = build_linear(100)
    x = np.random.default_rng(0).standard_normal((10, 2))
    one = GmmSpec([1.0], [[0.5, 0.5]], [[2.0, 1.0]])
    np.testing.assert_allclose(analytic_posterior_gradient(one, s, x, 30, 0), 0, atol=1e-12)
    g = GmmSpec([0.5, 0.5], [[-2.0], [2.0]], [[1.0], [1.0]])
    t = 20
    ab = s.alpha_bar(t)
    mt, vt = math.sqrt(ab) * 2.0, ab + (1 - ab)
    grad = analytic_posterior_gradient(g, s, np.zeros((1, 1)), t, 1)
    assert grad[0, 0] == pytest.approx(mt / vt, rel=1e-10)
    with pytest.raises(ValueError):
        analytic_posterior_gradient(g, s, x[:, :1], t, 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 100))
def test_posterior_gradient_identity(seed, t):
    g0 = np.random.default_rng(seed)
    K = int(g0.integers(2, 4))
    w = g0.uniform(0.2, 1, K)
    g = GmmSpec(w / w.sum(), g0.normal(0, 2, (K, 2)), g0.uniform(0.3, 2, (K, 2)))
    s = build_linear(100)
    x = g0.normal(0, 2, (20, 2))
    r = responsibilities(gmm_marginal_at(g, s, t), x)
    lhs = sum(r[:, [k]] * analytic_posterior_gradient(g, s, x, t, k) for k in range(K)) + gmm_score(g, s, x, t)
    rhs = sum(r[:, [k]] * component_score(g, s, x, t, k) for k in range(K))
    np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def gmm_marginal_at(g, s, t):
    from diffguide.denoiser import gmm_marginal

    return gmm_marginal(g, s, t)


def test_rejection_filter_examples():
    keep, rate = rejection_filter([0.1, 0.25, 0.9], 0.2)
    assert keep.tolist() == [False, True, True] and rate == pytest.approx(2 / 3)
    assert rejection_filter([0.0, 0.3], 0.0)[0].all()
    with pytest.warns(RuntimeWarning):
        keep, rate = rejection_filter([0.5, 1.0], 1.0 + 1e-9)
    assert rate == 0.0 and not keep.any()
    with pytest.raises(ValueError):
        rejection_filter([1.2], 0.2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_rejection_filter_monotone(scores, a, b):
    lo, hi = sorted((a, b))
    assert rejection_filter(scores, hi)[1] <= rejection_filter(scores, lo)[1]


def test_few_shot_training_accuracy(gmm_model):
    s, m, x, y = gmm_model
    fx, fy = few_shot(x, y)
    clf = train_few_shot(m, fx, fy, GuidanceConfig(t_feat=350), steps=100, seed=0, s=s)
    acc = np.mean(clf.predict_proba(m, s, fx).argmax(1) == fy)
    assert acc >= 0.9


def test_zero_steps_keeps_the_seeded_initialisation(gmm_model):
    s, m, x, y = gmm_model
    fx, fy = few_shot(x, y)
    a = train_few_shot(m, fx, fy, GuidanceConfig(t_feat=350), steps=0, seed=0, s=s)
    b = train_few_shot(m, fx, fy, GuidanceConfig(t_feat=350), steps=0, seed=0, s=s)
    trained = train_few_shot(m, fx, fy, GuidanceConfig(t_feat=350), steps=1, seed=0, s=s)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not all(np.array_equal(p, q) for p, q in zip(a.params, trained.params))
    np.testing.assert_allclose(a.predict_proba(m, s, fx).sum(1), 1, atol=1e-6)


def test_duplicate_examples_are_memorised(gmm_model):
    s, m, _, _ = gmm_model
    fx = np.array([[-2.0, 0.5], [2.5, -0.3]])
    clf = train_few_shot(m, fx, np.array([0, 1]), GuidanceConfig(t_feat=100, noising_mode="deterministic_zero"),
                         steps=200, seed=0, s=s)
    assert np.array_equal(clf.predict_proba(m, s, fx).argmax(1), [0, 1])


def test_few_shot_errors(gmm_model):
    s, m, x, y = gmm_model
    with pytest.raises(ValueError):
        train_few_shot(m, x[y == 0][:5], np.zeros(5, int), GuidanceConfig(t_feat=100), s=s, num_classes=2)
    with pytest.raises(ValueError):
        train_classifier(m, s, x[:4], y[:4], t_feats=())


def zero_head(clf):
    clf.params[-2] = np.zeros_like(clf.params[-2])
    clf.params[-1] = np.zeros_like(clf.params[-1])
    return clf


def test_constant_logits_give_zero_gradient(gmm_model):
    s, m, x, y = gmm_model
    fx, fy = few_shot(x, y, 10)
    xt = np.random.default_rng(0).standard_normal((5, 2))
    feat = zero_head(train_few_shot(m, fx, fy, GuidanceConfig(t_feat=350), steps=5, s=s))
    clean = zero_head(train_clean_classifier(fx, fy, steps=5, s=s))
    np.testing.assert_array_equal(guidance_gradient(m, feat, s, xt, 400, 1), 0)
    np.testing.assert_array_equal(clean_image_guidance(m, clean, s, xt, 400, 1), 0)
    with pytest.raises(ValueError):
        clean_image_guidance(m, feat, s, xt, 400, 1)
    with pytest.raises(TypeError):
        guidance_gradient(AnalyticDenoiser(SYM, s), feat, s, xt, 400, 1)


def fd_gradient(f, x, h=1e-3):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def guided_loglik(m, clf, s, t, target):
    def f(x):
        x0 = (x - math.sqrt(1 - s.alpha_bar(t)) * m.predict_epsilon(x, t)) / math.sqrt(s.alpha_bar(t))
        lp = clf.predict_log_proba(m, s, x0)
        return lp[np.arange(len(x)), target].sum()
    return f


@pytest.fixture(scope="module")
def small_setup():
    s = build_linear(100)
    m = MlpDenoiser.init((2,), 100, hidden=(16, 16, 16), seed=0, schedule_ref=s.to_config())
    x, y = SYM.sample(200, np.random.default_rng(1))
    feat = train_few_shot(m, x, y, GuidanceConfig(t_feat=40), steps=20, seed=0, s=s)
    clean = train_clean_classifier(x, y, steps=20, seed=0, s=s)
    return s, m, feat, clean


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 100), st.integers(0, 1), st.booleans())
def test_guidance_gradient_matches_finite_differences(small_setup, seed, t, target, clean):
    s, m, feat, cl = small_setup
    clf = cl if clean else feat
    x = np.random.default_rng(seed).normal(0, 2, (1, 2))
    g = (clean_image_guidance if clean else guidance_gradient)(m, clf, s, x, t, target)
    fd = fd_gradient(guided_loglik(m, clf, s, t, np.array([target])), x)
    assert rel_err(g, fd) < 1e-4 or np.max(np.abs(g - fd)) < 1e-6


def test_learned_gradient_agrees_with_analytic(gmm_model):
    s, m, x, y = gmm_model
    fx, fy = few_shot(x, y)
    clf = train_few_shot(m, fx, fy, GuidanceConfig(t_feat=350), steps=100, seed=0, s=s)
    g0 = np.random.default_rng(5)
    ts = g0.integers(1, 1001, 1000)
    pts = g0.normal(0, 3, (1000, 2))
    agree = 0
    for t in np.unique(ts):
        sel = ts == t
        learned = guidance_gradient(m, clf, s, pts[sel], int(t), 1)
        exact = analytic_posterior_gradient(SYM, s, pts[sel], int(t), 1)
        agree += np.sum(np.sum(learned * exact, axis=1) > 0)
    assert agree >= 900


def test_analytic_guidance_sampling_soundness():
    s = build_linear(100, 1e-3, 0.2)
    hook = AnalyticGuidance(SYM, s, 1, lam=1.0)
    x, _ = sample_loop(AnalyticDenoiser(SYM, s), s, SamplerConfig(method="ddpm", seed=0, chains=10_000), hook)
    ref, _ = SYM.component(1).sample(10_000, np.random.default_rng(1))
    assert class_fidelity(x, SYM, 1) >= 0.99
    assert frechet_distance(MomentSummary.from_samples(x), MomentSummary.from_samples(ref)) < 0.1


def test_guided_ddim_eta_one_matches_guided_ddpm(small_setup):
    s, m, feat, _ = small_setup
    hook = ClassifierGuidance(m, feat, s, 1, 1.0)
    a, _ = sample_loop(m, s, SamplerConfig(method="ddpm", seed=0, chains=3000), hook)
    b, _ = sample_loop(m, s, SamplerConfig(method="ddim", eta=1.0, seed=1, chains=3000), hook)
    for j in range(2):
        assert stats.ks_2samp(a[:, j], b[:, j]).pvalue > 0.01


def test_classifier_checkpoint_round_trip(tmp_path, small_setup):
    s, m, feat, _ = small_setup
    feat.save(tmp_path / "c.ckpt")
    back = GuidanceClassifier.load(tmp_path / "c.ckpt")
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(back.predict_proba(m, s, x), feat.predict_proba(m, s, x))
    assert (back.t_feats, back.taps, back.noising_mode) == (feat.t_feats, feat.taps, feat.noising_mode)


def test_per_cell_head_shapes():
    s = build_linear(50)
    m = MlpDenoiser.init((4, 4), 50, hidden=(16, 16, 16), seed=0, schedule_ref=s.to_config())
    g0 = np.random.default_rng(0)
    x = g0.uniform(size=(6, 4, 4))
    masks = g0.integers(0, 3, (6, 4, 4))
    clf = train_few_shot(m, x, masks, GuidanceConfig(t_feat=10), steps=3, s=s, num_classes=3, optimizer="adam",
                         lr=1e-2)
    assert clf.head == "per_cell" and clf.cells == 16
    assert clf.predict_proba(m, s, x).shape == (6, 16, 3)
    g = guidance_gradient(m, clf, s, x, 20, masks)
    assert g.shape == x.shape
    fd = fd_gradient(lambda v: float(np.mean(np.take_along_axis(
        clf.predict_log_proba(m, s, (v - math.sqrt(1 - s.alpha_bar(20)) * m.predict_epsilon(v, 20))
                              / math.sqrt(s.alpha_bar(20))), masks[:1].reshape(1, 16, 1), -1)[..., 0], axis=1).sum()),
        x[:1].copy())
    g1 = guidance_gradient(m, clf, s, x[:1], 20, masks[:1])
    assert rel_err(g1, fd) < 1e-4 or np.max(np.abs(g1 - fd)) < 1e-6
