"""Score models: closed-form oracles and a small trainable denoiser.

A score model maps (image, sigma) to the gradient of the log density of the
sigma-perturbed data distribution.  Two analytic families (Gaussian and
Gaussian mixture) serve as exact references; the learnable model is a
three-layer 3x3 convolutional denoiser whose gradients are implemented
explicitly so every layer can be checked against finite differences.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError, ParameterError, ShapeMismatchError
from .grid import Rng
from .schedule import NoiseSchedule, sigma_of_t


def corrector_step_size(z_norm: float, score_norm: float, r: float) -> float:
    """Langevin step size 2 r ||z|| / ||s||; returns 0 for a vanishing score."""
    if score_norm < 0:
        raise ParameterError("score_norm must be nonnegative")
    if score_norm < 1e-12:
        return 0.0
    return 2.0 * r * z_norm / score_norm


# ---------------------------------------------------------------------------
# analytic oracles


class AnalyticGaussianScore:
    """Exact score of a Gaussian prior N(mean, var) perturbed by N(0, sigma^2):
    score(x, sigma) = -(x - mean) / (var + sigma^2)."""

    def __init__(self, mean, var):
        self.mean = np.asarray(mean, dtype=float)
        self.var = np.asarray(var, dtype=float)
        if np.any(self.var <= 0):
            raise ParameterError("variance must be positive everywhere")

    def score(self, x, sigma):
        x = np.asarray(x, dtype=float)
        return -(x - self.mean) / (self.var + sigma**2)


def analytic_gaussian_score(mean, var) -> AnalyticGaussianScore:
    return AnalyticGaussianScore(mean, var)


class AnalyticGmmScore:
    """Exact score of a Gaussian-mixture prior perturbed by N(0, sigma^2).

    Responsibilities are computed with log-sum-exp over components; the score
    is the responsibility-weighted sum of per-component Gaussian scores.
    Accepts batched inputs of shape (..., H, W).
    """

    def __init__(self, weights, means, variances):
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.size == 0:
            raise ConfigurationError("mixture needs at least one component")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ParameterError("weights must be positive and sum to 1")
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:  # scalar components on a 1x1 grid
            means = means[:, None, None]
        self.means = means
        variances = np.asarray(variances, dtype=float)
        if np.any(variances <= 0):
            raise ParameterError("variances must be positive")
        if variances.ndim == 1:
            variances = variances[:, None, None]
        self.variances = variances
        if len(self.means) != len(self.weights):
            raise ShapeMismatchError("one mean per weight required")

    @property
    def image_shape(self):
        return self.means.shape[1:]

    def score(self, x, sigma):
        x = np.asarray(x, dtype=float)
        h, w = self.image_shape
        if x.shape[-2:] != (h, w):
            raise ShapeMismatchError(f"expected grid {(h, w)}, got {x.shape[-2:]}")
        xb = x[..., None, :, :]  # (..., 1, H, W)
        var = self.variances + sigma**2  # (K, H, W) broadcastable
        diff = xb - self.means
        loglik = -0.5 * np.sum(diff**2 / var + np.log(2 * math.pi * var), axis=(-2, -1))
        logw = loglik + np.log(self.weights)  # (..., K)
        logw = logw - np.max(logw, axis=-1, keepdims=True)
        resp = np.exp(logw)
        resp = resp / resp.sum(axis=-1, keepdims=True)
        comp_scores = -diff / var  # (..., K, H, W)
        return np.sum(resp[..., None, None] * comp_scores, axis=-3)


def analytic_gmm_score(weights, means, variances) -> AnalyticGmmScore:
    return AnalyticGmmScore(weights, means, variances)


# ---------------------------------------------------------------------------
# explicit-backprop convolutional denoiser

_CHANNELS = (2, 32, 32, 1)
_KSIZE = 3


def _init_params(rng: Rng):
    """Fan-in-scaled uniform initialization for every layer."""
    g = rng.generator()
    params = {}
    for i in range(3):
        cin, cout = _CHANNELS[i], _CHANNELS[i + 1]
        bound = 1.0 / math.sqrt(cin * _KSIZE * _KSIZE)
        params[f"W{i + 1}"] = g.uniform(-bound, bound, size=(cout, cin, _KSIZE, _KSIZE))
        params[f"b{i + 1}"] = g.uniform(-bound, bound, size=(cout,))
    return params


def _im2col(x):
    """(B, C, H, W) -> (B, C*9, H*W) patches of the zero-padded input."""
    b, c, h, w = x.shape
    padded = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, k] = padded[:, :, dy:dy + h, dx:dx + w]
            k += 1
    return cols.reshape(b, c * 9, h * w)


def _col2im(dcols, c, h, w):
    """Adjoint of _im2col: scatter-add patch gradients back onto the grid."""
    b = dcols.shape[0]
    dcols = dcols.reshape(b, c, 9, h, w)
    dpad = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            dpad[:, :, dy:dy + h, dx:dx + w] += dcols[:, :, k]
            k += 1
    return dpad[:, :, 1:-1, 1:-1]


def _conv_forward(x, weight, bias):
    b, c, h, w = x.shape
    cols = _im2col(x)
    wf = weight.reshape(weight.shape[0], -1)
    out = np.matmul(wf, cols) + bias[:, None]
    return out.reshape(b, weight.shape[0], h, w), cols


def _conv_infer(x, weight, bias):
    """Cache-friendly conv for evaluation: im2col GEMM without keeping the
    column cache around (no gradient bookkeeping)."""
    out, _ = _conv_forward(x, weight, bias)
    return out


def _conv_backward(dout, cols, weight, in_shape):
    b, c, h, w = in_shape
    df = dout.reshape(b, weight.shape[0], h * w)
    wf = weight.reshape(weight.shape[0], -1)
    dweight = np.einsum("boi,bci->oc", df, cols).reshape(weight.shape)
    dbias = df.sum(axis=(0, 2))
    dcols = np.matmul(wf.T, df)
    return _col2im(dcols, c, h, w), dweight, dbias


class ConvDenoiser:
    """Three 3x3 conv layers (2 -> 32 -> 32 -> 1 channels) with tanh between.

    The first input channel is the image; the second is a constant plane
    holding the normalized log noise level.  The raw output estimates the
    negated noise, and dividing it by sigma yields the score.
    """

    def __init__(self, params, sigma_min, sigma_max):
        self.params = params
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)

    def noise_channel(self, sigma):
        return (math.log(sigma) - math.log(self.sigma_min)) / (
            math.log(self.sigma_max) - math.log(self.sigma_min)
        )

    def forward(self, x_batch, sigmas):
        """x_batch (B, H, W), sigmas (B,) -> raw outputs (B, H, W) + caches."""
        b, h, w = x_batch.shape
        levels = np.array([self.noise_channel(s) for s in np.atleast_1d(sigmas)])
        inp = np.stack(
            [x_batch, np.broadcast_to(levels[:, None, None], x_batch.shape)], axis=1
        )
        p = self.params
        a1, cols1 = _conv_forward(inp, p["W1"], p["b1"])
        h1 = np.tanh(a1)
        a2, cols2 = _conv_forward(h1, p["W2"], p["b2"])
        h2 = np.tanh(a2)
        out, cols3 = _conv_forward(h2, p["W3"], p["b3"])
        cache = (inp.shape, cols1, h1, cols2, h2, cols3)
        return out[:, 0], cache

    def backward(self, dout, cache):
        """Gradients of a scalar loss w.r.t. all parameters, given d loss/d out."""
        inp_shape, cols1, h1, cols2, h2, cols3 = cache
        p = self.params
        d3 = dout[:, None]
        dh2, dW3, db3 = _conv_backward(d3, cols3, p["W3"], h2.shape)
        da2 = dh2 * (1.0 - h2**2)
        dh1, dW2, db2 = _conv_backward(da2, cols2, p["W2"], h1.shape)
        da1 = dh1 * (1.0 - h1**2)
        _, dW1, db1 = _conv_backward(da1, cols1, p["W1"], inp_shape)
        return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2, "W3": dW3, "b3": db3}


class LearnedScore:
    """Score model backed by a trained ConvDenoiser: s(x, sigma) = net(x) / sigma.

    Evaluation runs a lean float32 path (weights cast once at construction);
    training keeps float64 so gradients check against finite differences.
    """

    def __init__(self, net: ConvDenoiser):
        self.net = net
        self._w32 = {k: v.astype(np.float32) for k, v in net.params.items()}

    _CHUNK = 1  # images per inference pass; keeps column buffers cache-sized

    def _infer(self, xb, level):
        inp = np.stack([xb, np.full_like(xb, level)], axis=1)
        p = self._w32
        h1 = np.tanh(_conv_infer(inp, p["W1"], p["b1"]))
        h2 = np.tanh(_conv_infer(h1, p["W2"], p["b2"]))
        return _conv_infer(h2, p["W3"], p["b3"])[:, 0]

    def score(self, x, sigma):
        x = np.asarray(x)
        batched = x.ndim == 3
        xb = (x if batched else x[None]).astype(np.float32)
        level = np.float32(self.net.noise_channel(float(sigma)))
        pieces = [
            self._infer(xb[lo:lo + self._CHUNK], level)
            for lo in range(0, len(xb), self._CHUNK)
        ]
        out = np.concatenate(pieces).astype(float) / float(sigma)
        return out if batched else out[0]


# ---------------------------------------------------------------------------
# denoising score matching


@dataclass(frozen=True)
class TrainConfig:
    learning_rate_peak: float = 2e-4
    warmup_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    ema_rate: float = 0.999
    batch_size: int = 1
    epochs: int = 1
    t_eps: float = 1e-5
    init_seed: int = 0

    def __post_init__(self):
        for name in ("beta1", "beta2", "ema_rate"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ParameterError(f"{name}={v} outside [0, 1)")
        if self.grad_clip <= 0:
            raise ParameterError("grad_clip must be positive")


@dataclass(frozen=True)
class DsmDraw:
    """Perturbation draw backing one loss evaluation."""

    t: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    x_t: np.ndarray
    scores: np.ndarray


def _draw_dsm_batch(x0_batch, sched: NoiseSchedule, g):
    b = x0_batch.shape[0]
    t = g.uniform(sched.t_eps, 1.0, size=b)
    sigma = sigma_of_t(sched, t)
    z = g.standard_normal(x0_batch.shape)
    x_t = x0_batch + sigma[:, None, None] * z
    return t, sigma, z, x_t


def dsm_loss(model, x0_batch, sched: NoiseSchedule, rng: Rng):
    """Noise-weighted denoising score matching loss on one batch.

    Per sample the loss is ||sigma(t) * s(x_t, sigma(t)) + z||^2 with
    x_t = x0 + sigma(t) z, averaged over the batch.  With a perfect kernel
    score the loss is exactly zero; with a zero model it equals E||z||^2.
    """
    x0_batch = np.asarray(x0_batch, dtype=float)
    if x0_batch.ndim == 2:
        x0_batch = x0_batch[None]
    t, sigma, z, x_t = _draw_dsm_batch(x0_batch, sched, rng.generator())
    scores = np.stack([model.score(x_t[i], sigma[i]) for i in range(len(t))])
    resid = sigma[:, None, None] * scores + z
    loss = float(np.mean(np.sum(resid**2, axis=(1, 2))))
    return loss, DsmDraw(t, sigma, z, x_t, scores)


@dataclass
class _AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def _adam_update(params, grads, state, lr, beta1, beta2, eps=1e-8):
    state.step += 1
    for k, g in grads.items():
        state.m[k] = beta1 * state.m.get(k, 0.0) + (1 - beta1) * g
        state.v[k] = beta2 * state.v.get(k, 0.0) + (1 - beta2) * g**2
        mhat = state.m[k] / (1 - beta1**state.step)
        vhat = state.v[k] / (1 - beta2**state.step)
        params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)


def _clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def warmup_lr(step: int, peak: float, warmup_steps: int) -> float:
    """Linear warmup: lr ramps from 0 to peak over the first warmup_steps."""
    if warmup_steps <= 0:
        return peak
    return peak * min(1.0, step / warmup_steps)


def train_dsm(dataset, sched: NoiseSchedule, cfg: TrainConfig, rng: Rng) -> LearnedScore:
    """Train the conv denoiser with denoising score matching.

    Adam with linear warmup, global gradient-norm clipping, and an
    exponential moving average of the parameters; the EMA weights become the
    returned model.  Aborts if the loss goes non-finite.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 3 or len(data) == 0:
        raise ConfigurationError("dataset must be a nonempty (n, H, W) stack")
    n = len(data)

    params = _init_params(Rng(cfg.init_seed))
    ema = {k: v.copy() for k, v in params.items()}
    net = ConvDenoiser(params, sched.sigma_min, sched.sigma_max)
    adam = _AdamState()
    g = rng.generator()
    train_sched = NoiseSchedule(
        kind="VE", sigma_min=sched.sigma_min, sigma_max=sched.sigma_max,
        N=sched.N, t_eps=cfg.t_eps,
    )

    step = 0
    for _epoch in range(cfg.epochs):
        order = g.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = data[order[lo:lo + cfg.batch_size]]
            b = len(batch)
            _t, sigma, z, x_t = _draw_dsm_batch(batch, train_sched, g)
            out, cache = net.forward(x_t, sigma)
            resid = out + z  # sigma * score == raw output by construction
            loss = float(np.mean(np.sum(resid**2, axis=(1, 2))))
            if not math.isfinite(loss):
                raise DivergenceError(f"training loss non-finite at step {step}", step=step)
            grads = net.backward(2.0 * resid / b, cache)
            _clip_global_norm(grads, cfg.grad_clip)
            step += 1
            lr = warmup_lr(step, cfg.learning_rate_peak, cfg.warmup_steps)
            _adam_update(params, grads, adam, lr, cfg.beta1, cfg.beta2)
            for k in ema:
                ema[k] = cfg.ema_rate * ema[k] + (1 - cfg.ema_rate) * params[k]

    return LearnedScore(ConvDenoiser(ema, sched.sigma_min, sched.sigma_max))
