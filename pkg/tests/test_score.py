import math

import numpy as np
import pytest

from mrisde.errors import DivergenceError, ParameterError
from mrisde.grid import Rng
from mrisde.schedule import NoiseSchedule, sigma_of_t
from mrisde.score import (
    AnalyticGaussianScore,
    AnalyticGmmScore,
    ConvDenoiser,
    LearnedScore,
    TrainConfig,
    _init_params,
    corrector_step_size,
    dsm_loss,
    train_dsm,
    warmup_lr,
)


# ---------------------------------------------------------------------------
# finite-difference oracles (test-local, independent of the package code)


def _fd_gradient(logp, x, eps=1e-5):
    out = np.zeros_like(x, dtype=float)
    for idx in np.ndindex(x.shape):
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        out[idx] = (logp(xp) - logp(xm)) / (2 * eps)
    return out


def _gauss_logpdf(x, mean, var):
    var = np.broadcast_to(np.asarray(var, float), x.shape)
    return float(-0.5 * np.sum((x - mean) ** 2 / var + np.log(2 * math.pi * var)))


# ---------------------------------------------------------------------------
# analytic Gaussian score


def test_gaussian_score_near_zero_sigma_is_standard_normal_score():
    model = AnalyticGaussianScore(0.0, 1.0)
    x = Rng(0).generator().standard_normal((5, 5))
    assert np.allclose(model.score(x, 1e-8), -x, atol=1e-6)


def test_gaussian_score_single_pixel_value():
    model = AnalyticGaussianScore(0.0, 3.0)
    x = np.zeros((3, 3))
    x[1, 1] = 2.0
    out = model.score(x, 1.0)
    assert out[1, 1] == pytest.approx(-0.5)  # -2 / (3 + 1)


def test_gaussian_score_matches_finite_differences():
    g = Rng(1).generator()
    mean = g.standard_normal((4, 4))
    var = 0.5 + g.random((4, 4))
    model = AnalyticGaussianScore(mean, var)
    x = g.standard_normal((4, 4))
    sigma = 0.7
    fd = _fd_gradient(lambda v: _gauss_logpdf(v, mean, var + sigma**2), x)
    assert np.max(np.abs(model.score(x, sigma) - fd)) <= 1e-4


def test_gaussian_score_rejects_bad_variance():
    with pytest.raises(ParameterError):
        AnalyticGaussianScore(0.0, 0.0)


# ---------------------------------------------------------------------------
# analytic mixture score


def test_gmm_single_component_equals_gaussian():
    g = Rng(2).generator()
    mean = g.standard_normal((3, 3))
    gmm = AnalyticGmmScore([1.0], mean[None], [0.8])
    gauss = AnalyticGaussianScore(mean, 0.8)
    x = g.standard_normal((3, 3))
    assert np.max(np.abs(gmm.score(x, 0.5) - gauss.score(x, 0.5))) <= 1e-12


def test_gmm_symmetric_two_component_zero_at_origin():
    gmm = AnalyticGmmScore([0.5, 0.5], np.array([[[-2.0]], [[2.0]]]), [0.3, 0.3])
    assert gmm.score(np.zeros((1, 1)), 0.4)[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_gmm_score_matches_finite_differences():
    weights = np.array([0.3, 0.5, 0.2])
    means = np.array([[[-1.5]], [[0.2]], [[2.0]]])
    variances = np.array([0.2, 0.5, 0.3])
    gmm = AnalyticGmmScore(weights, means, variances)
    sigma = 0.6

    def logp(x):
        logs = [
            math.log(w) + _gauss_logpdf(x, m, v + sigma**2)
            for w, m, v in zip(weights, means, variances)
        ]
        mx = max(logs)
        return mx + math.log(sum(math.exp(l - mx) for l in logs))

    for x0 in (-2.2, -0.3, 0.9, 2.5):
        x = np.array([[x0]])
        fd = _fd_gradient(logp, x)
        assert abs(gmm.score(x, sigma)[0, 0] - fd[0, 0]) <= 1e-4


def test_gmm_batched_evaluation_matches_loop():
    gmm = AnalyticGmmScore([0.4, 0.6], np.array([[[-1.0]], [[1.0]]]), [0.5, 0.5])
    g = Rng(3).generator()
    batch = g.standard_normal((7, 1, 1))
    got = gmm.score(batch, 0.8)
    ref = np.stack([gmm.score(b, 0.8) for b in batch])
    assert np.max(np.abs(got - ref)) <= 1e-12


def test_gmm_rejects_bad_mixtures():
    with pytest.raises(Exception):
        AnalyticGmmScore([], np.zeros((0, 1, 1)), [])
    with pytest.raises(ParameterError):
        AnalyticGmmScore([0.5, 0.6], np.zeros((2, 1, 1)), [1.0, 1.0])


# ---------------------------------------------------------------------------
# corrector step size


def test_step_size_known_value():
    assert corrector_step_size(1.0, 1.0, 0.16) == pytest.approx(0.32)


def test_step_size_zero_score_guard():
    assert corrector_step_size(5.0, 0.0, 0.16) == 0.0


def test_step_size_linear_in_r():
    a = corrector_step_size(2.0, 3.0, 0.16)
    b = corrector_step_size(2.0, 3.0, 0.32)
    assert b == pytest.approx(2 * a)


# ---------------------------------------------------------------------------
# conv denoiser internals


def test_conv_backprop_matches_finite_differences():
    params = _init_params(Rng(7))
    net = ConvDenoiser(params, 0.01, 10.0)
    g = Rng(8).generator()
    x = g.standard_normal((2, 4, 5))
    sig = np.array([0.3, 2.0])
    z = g.standard_normal((2, 4, 5))

    def loss_fn():
        out, _ = net.forward(x, sig)
        return float(np.mean(np.sum((out + z) ** 2, axis=(1, 2))))

    out, cache = net.forward(x, sig)
    grads = net.backward(2.0 * (out + z) / len(x), cache)
    eps = 1e-6
    for key in ("W1", "b1", "W2", "b2", "W3", "b3"):
        p = params[key]
        flat = p.ravel()
        for j in range(0, flat.size, max(1, flat.size // 5)):  # spot-check entries
            orig = flat[j]
            flat[j] = orig + eps; lp = loss_fn()
            flat[j] = orig - eps; lm = loss_fn()
            flat[j] = orig
            num = (lp - lm) / (2 * eps)
            assert grads[key].ravel()[j] == pytest.approx(num, rel=1e-4, abs=1e-8)


def test_learned_score_fast_path_matches_training_forward():
    net = ConvDenoiser(_init_params(Rng(9)), 0.01, 10.0)
    model = LearnedScore(net)
    g = Rng(10).generator()
    x = g.standard_normal((3, 8, 8))
    sigma = 0.45
    ref, _ = net.forward(x, np.full(3, sigma))
    fast = model.score(x, sigma) * sigma
    assert np.max(np.abs(fast - ref)) <= 1e-5 * np.max(np.abs(ref))


def test_learned_score_shape_preserved_and_pure():
    model = LearnedScore(ConvDenoiser(_init_params(Rng(11)), 0.01, 10.0))
    x = Rng(12).generator().standard_normal((6, 7))
    a = model.score(x, 0.5)
    b = model.score(x, 0.5)
    assert a.shape == x.shape
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# DSM loss


SCHED = NoiseSchedule(sigma_min=0.01, sigma_max=5.0, N=100)


def test_dsm_loss_zero_for_kernel_oracle():
    g = Rng(13).generator()
    x0 = g.standard_normal((1, 6, 6))

    class KernelOracle:
        def score(self, x, sigma):
            return -(x - x0[0]) / sigma**2

    loss, draw = dsm_loss(KernelOracle(), x0, SCHED, Rng(14))
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_dsm_loss_zero_model_gives_noise_norm():
    x0 = np.zeros((4, 6, 6))

    class ZeroModel:
        def score(self, x, sigma):
            return np.zeros_like(x)

    loss, draw = dsm_loss(ZeroModel(), x0, SCHED, Rng(15))
    expected = float(np.mean(np.sum(draw.z**2, axis=(1, 2))))
    assert loss == pytest.approx(expected)
    # expectation over draws is the pixel count
    losses = [dsm_loss(ZeroModel(), x0, SCHED, Rng(16, s))[0] for s in range(300)]
    assert np.mean(losses) == pytest.approx(36, rel=0.1)


def test_dsm_training_loss_decreases():
    g = Rng(17).generator()
    data = g.standard_normal((256, 8, 8))
    cfg = TrainConfig(batch_size=8, epochs=64)  # 2048 steps
    model = train_dsm(data, SCHED, cfg, Rng(18))
    # smoothed early-vs-late comparison via fresh loss draws
    early = LearnedScore(ConvDenoiser(_init_params(Rng(cfg.init_seed)), 0.01, 5.0))
    l_init = np.mean([dsm_loss(early, data[:8], SCHED, Rng(19, s))[0] for s in range(40)])
    l_final = np.mean([dsm_loss(model, data[:8], SCHED, Rng(19, s))[0] for s in range(40)])
    assert l_final < l_init


def test_trained_score_approaches_analytic_oracle_loosely():
    # short-budget smoke: the strict 0.15 gate runs in the acceptance suite
    g = Rng(20).generator()
    data = g.standard_normal((512, 8, 8))
    model = train_dsm(data, SCHED, TrainConfig(batch_size=16, epochs=94), Rng(21))
    ge = Rng(22).generator()
    rels = []
    for s in (0.5, 2.0):
        for _ in range(30):
            x = ge.standard_normal((8, 8)) * math.sqrt(1 + s**2)
            ref = -x / (1 + s**2)
            rels.append(np.linalg.norm(model.score(x, s) - ref) / np.linalg.norm(ref))
    assert np.mean(rels) <= 0.35


def test_warmup_half_at_midpoint():
    assert warmup_lr(2500, 2e-4, 5000) == pytest.approx(1e-4)
    assert warmup_lr(5000, 2e-4, 5000) == pytest.approx(2e-4)
    assert warmup_lr(80000, 2e-4, 5000) == pytest.approx(2e-4)


def test_ema_rate_zero_tracks_last_iterate():
    g = Rng(23).generator()
    data = g.standard_normal((32, 4, 4))
    base = dict(batch_size=4, epochs=2, warmup_steps=2)
    m0 = train_dsm(data, SCHED, TrainConfig(ema_rate=0.0, **base), Rng(24))
    # run the same training but read the raw (non-EMA) parameters through a
    # second model trained identically with EMA so slow it stays at the init
    m_frozen = train_dsm(data, SCHED, TrainConfig(ema_rate=1.0 - 1e-12, **base), Rng(24))
    init = _init_params(Rng(0))
    for k in init:
        assert np.allclose(m_frozen.net.params[k], init[k], atol=1e-6)
        assert not np.allclose(m0.net.params[k], init[k])


def test_training_rejects_empty_dataset():
    with pytest.raises(Exception):
        train_dsm(np.zeros((0, 4, 4)), SCHED, TrainConfig(), Rng(0))


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(beta1=1.5)
    with pytest.raises(ParameterError):
        TrainConfig(grad_clip=0.0)


def test_training_divergence_guard():
    data = np.full((4, 4, 4), np.inf)  # non-finite inputs poison the loss
    with pytest.raises(DivergenceError):
        train_dsm(data, SCHED, TrainConfig(batch_size=2, epochs=2), Rng(25))
