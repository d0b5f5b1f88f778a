"""Reverse-time samplers: unconditional predictor-corrector generation and
the conditional reconstruction chains built on it.

All chains share the same step anatomy: a predictor move between adjacent
noise levels, an optional k-space data-consistency update, and M corrector
(Langevin) moves each followed by the same consistency update.  Conditional
variants differ in how the complex image is split across score evaluations
and how multiple coils are tied together.

Every sampler is a pure function of (inputs, config, rng); per-coil chains
and ensemble members receive child RNG streams so parallel and serial
execution produce identical results.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DivergenceError, ParameterError, ShapeMismatchError
from .grid import Rng
from .measurement import (
    MultiCoilKspace,
    SamplingMask,
    SensitivityMaps,
    adjoint,
    data_consistency,
    forward,
)
from .schedule import NoiseSchedule, discretize
from .score import corrector_step_size


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs of the reverse-time chains; defaults follow the shipped setup."""

    N: int = 2000
    M: int = 1
    r: float = 0.16
    lambda_start: float = 1.0
    lambda_end: float = 0.2
    m: int = 5
    n_prime_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ParameterError("N must be >= 1")
        if self.M < 0:
            raise ParameterError("M must be >= 0")
        if not (0 <= self.lambda_start <= 1 and 0 <= self.lambda_end <= 1):
            raise ParameterError("lambda annealing endpoints must lie in [0, 1]")
        if self.m < 1:
            raise ParameterError("aggregation interval m must be >= 1")
        if not 0 < self.n_prime_fraction <= 1:
            raise ParameterError("n_prime_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class ReconResult:
    image: np.ndarray
    kspace_residual: float
    chain_seed: str
    steps_used: int


@dataclass(frozen=True)
class EnsembleResult:
    samples: list
    mean_image: np.ndarray
    std_image: np.ndarray


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MRISDE_THREADS", "1")))
    except ValueError:
        return 1


def _check_finite(x, step, sigma):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(
            f"non-finite state at step {step} (sigma={sigma:.6g})", step=step, sigma=sigma
        )


def predictor_ve(x, sigma_i, sigma_ip1, model, rng_or_gen):
    """One reverse-diffusion move from level sigma_{i+1} down to sigma_i."""
    if not 0 < sigma_i < sigma_ip1:
        raise ParameterError("need sigma_ip1 > sigma_i > 0")
    g = rng_or_gen.generator() if isinstance(rng_or_gen, Rng) else rng_or_gen
    delta = sigma_ip1**2 - sigma_i**2
    z = g.standard_normal(np.shape(x))
    return x + delta * model.score(x, sigma_ip1) + np.sqrt(delta) * z


def corrector_langevin(x, sigma_i, model, r, rng_or_gen):
    """One Langevin correction at level sigma_i with the adaptive step size."""
    if sigma_i <= 0:
        raise ParameterError("sigma_i must be positive")
    g = rng_or_gen.generator() if isinstance(rng_or_gen, Rng) else rng_or_gen
    z = g.standard_normal(np.shape(x))
    s = model.score(x, sigma_i)
    eps = corrector_step_size(
        float(np.linalg.norm(z)), float(np.linalg.norm(s)), r
    )
    return x + eps * s + np.sqrt(2.0 * eps) * z


def pc_sample(model, sched: NoiseSchedule, cfg: SamplerConfig, shape, rng: Rng):
    """Unconditional predictor-corrector sampling of a real-valued image."""
    sigmas = discretize(replace_n(sched, cfg.N))
    g = rng.generator()
    x = sigmas[-1] * g.standard_normal(shape)
    for i in range(cfg.N - 1, -1, -1):
        x = predictor_ve(x, sigmas[i], sigmas[i + 1], model, g)
        for _ in range(cfg.M):
            x = corrector_langevin(x, sigmas[i], model, cfg.r, g)
        _check_finite(x, i, sigmas[i])
    return x


def replace_n(sched: NoiseSchedule, n: int) -> NoiseSchedule:
    """Schedule with the discretization step count swapped out."""
    return sched if sched.N == n else replace(sched, N=n)


def _residual(x, y: MultiCoilKspace, maps) -> float:
    num = np.linalg.norm(forward(x, y.mask, maps).data - y.data)
    den = np.linalg.norm(y.data)
    return float(num / den) if den > 0 else float(num)


def _coil_residual(coil_imgs, y: MultiCoilKspace) -> float:
    num = 0.0
    for k in range(y.coils):
        yk = forward(coil_imgs[k], y.mask).data[0]
        num += float(np.sum(np.abs(yk - y.data[k]) ** 2))
    den = np.linalg.norm(y.data)
    return float(np.sqrt(num) / den) if den > 0 else float(np.sqrt(num))


def _single_coil(y: MultiCoilKspace) -> MultiCoilKspace:
    if y.coils != 1:
        raise ShapeMismatchError(f"expected single-coil k-space, got {y.coils} coils")
    return y


def _real_chain(y, model, sched, cfg, g, x_start, start_index, sigmas):
    """Shared body of the real-valued conditional chain (full and tail runs)."""
    x = x_start
    for i in range(start_index - 1, -1, -1):
        x = predictor_ve(x, sigmas[i], sigmas[i + 1], model, g)
        x = np.real(data_consistency(x, y, None, 1.0))
        for _ in range(cfg.M):
            x = corrector_langevin(x, sigmas[i], model, cfg.r, g)
            x = np.real(data_consistency(x, y, None, 1.0))
        _check_finite(x, i, sigmas[i])
    return x


def _stack_step(xs, i, sigmas, model, cfg, gens, dc):
    """One outer step of the split real/imaginary chain on a coil stack.

    ``xs`` is a complex (c, H, W) stack, ``gens`` one generator per coil, and
    ``dc`` maps a stack to its data-consistent version.  Score evaluations of
    all parts and coils are batched into single model calls; each coil's
    noise comes from its own stream, in the same order as coil-serial
    execution, so results are independent of the batching."""
    c, h, w = xs.shape
    parts = np.stack([xs.real, xs.imag], axis=1)  # (c, 2, H, W)

    zs = np.stack([g.standard_normal((2, h, w)) for g in gens])
    scores = model.score(parts.reshape(2 * c, h, w), sigmas[i + 1]).reshape(c, 2, h, w)
    delta = sigmas[i + 1] ** 2 - sigmas[i] ** 2
    parts = parts + delta * scores + np.sqrt(delta) * zs
    xs = dc(parts[:, 0] + 1j * parts[:, 1])

    for _ in range(cfg.M):
        parts = np.stack([xs.real, xs.imag], axis=1)
        zs = np.stack([g.standard_normal((2, h, w)) for g in gens])
        scores = model.score(parts.reshape(2 * c, h, w), sigmas[i]).reshape(c, 2, h, w)
        eps = np.empty((c, 2, 1, 1))
        for k in range(c):
            for p in range(2):
                eps[k, p, 0, 0] = corrector_step_size(
                    float(np.linalg.norm(zs[k, p])),
                    float(np.linalg.norm(scores[k, p])),
                    cfg.r,
                )
        parts = parts + eps * scores + np.sqrt(2.0 * eps) * zs
        xs = dc(parts[:, 0] + 1j * parts[:, 1])
    return xs


def recon_real(y: MultiCoilKspace, mask: SamplingMask, model, sched: NoiseSchedule,
               cfg: SamplerConfig, rng: Rng) -> ReconResult:
    """Conditional chain for real-valued targets: every predictor and
    corrector move is followed by exact k-space replacement and a projection
    onto real values."""
    y = _single_coil(y)
    sigmas = discretize(replace_n(sched, cfg.N))
    g = rng.generator()
    x = sigmas[-1] * g.standard_normal(mask.shape)
    x = _real_chain(y, model, sched, cfg, g, x, cfg.N, sigmas)
    return ReconResult(x, _residual(x, y, None), rng.label(), cfg.N)


def _complex_chain(y, maps, model, cfg, g, x, start_index, sigmas):
    """Shared body of the split real/imaginary chain (full and tail runs)."""

    def dc(stack):
        return data_consistency(stack[0], y, maps, 1.0)[None]

    xs = np.asarray(x, dtype=complex)[None]
    for i in range(start_index - 1, -1, -1):
        xs = _stack_step(xs, i, sigmas, model, cfg, [g], dc)
        _check_finite(xs, i, sigmas[i])
    return xs[0]


def recon_complex(y: MultiCoilKspace, mask: SamplingMask, maps: SensitivityMaps | None,
                  model, sched: NoiseSchedule, cfg: SamplerConfig, rng: Rng) -> ReconResult:
    """Conditional chain for complex targets: the score model (trained on
    real-valued images) is applied to the real and imaginary parts
    independently, recombined, then pulled onto the measurements."""
    sigmas = discretize(replace_n(sched, cfg.N))
    g = rng.generator()
    x = sigmas[-1] * (g.standard_normal(mask.shape) + 1j * g.standard_normal(mask.shape))
    x = _complex_chain(y, maps, model, cfg, g, x, cfg.N, sigmas)
    return ReconResult(x, _residual(x, y, maps), rng.label(), cfg.N)


def _per_coil_chains(y, model, sched, cfg, rng, aggregate=None):
    """Per-coil split chains with single-coil consistency; ``aggregate`` is an
    optional hook called as aggregate(coil_stack, i) after each outer step."""
    sigmas = discretize(replace_n(sched, cfg.N))
    gens = [rng.child(k).generator() for k in range(y.coils)]
    coil_ys = [MultiCoilKspace(y.data[k][None], y.mask) for k in range(y.coils)]
    xs = np.stack([
        sigmas[-1] * (g.standard_normal(y.mask.shape) + 1j * g.standard_normal(y.mask.shape))
        for g in gens
    ])

    def dc(stack):
        return np.stack([
            data_consistency(stack[k], coil_ys[k], None, 1.0) for k in range(y.coils)
        ])

    for i in range(cfg.N - 1, -1, -1):
        xs = _stack_step(xs, i, sigmas, model, cfg, gens, dc)
        _check_finite(xs, i, sigmas[i])
        if aggregate is not None:
            xs = aggregate(xs, i)
    return xs


def _ssos(coil_imgs) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(np.asarray(coil_imgs)) ** 2, axis=0))


def recon_ssos(y: MultiCoilKspace, model, sched: NoiseSchedule, cfg: SamplerConfig,
               rng: Rng) -> ReconResult:
    """Coil-by-coil reconstruction without sensitivity maps, combined by the
    root-sum-of-squares of the per-coil results."""
    xs = _per_coil_chains(y, model, sched, cfg, rng)
    return ReconResult(_ssos(xs), _coil_residual(xs, y), rng.label(), cfg.N)


def recon_hybrid(y: MultiCoilKspace, maps: SensitivityMaps, model, sched: NoiseSchedule,
                 cfg: SamplerConfig, rng: Rng) -> ReconResult:
    """Per-coil chains with a periodic cross-coil consistency update.

    Every cfg.m-th outer step (skipping the final one) the coil stack is
    reduced to a single image through the conjugate maps, pulled toward the
    multi-coil measurements with an annealed weight, and redistributed.
    The weight decays linearly from lambda_start at the first step to
    lambda_end at the last."""
    if maps is None:
        raise ConfigurationError("hybrid reconstruction requires sensitivity maps")
    if maps.coils != y.coils:
        raise ShapeMismatchError(f"{maps.coils} maps for {y.coils} coils")
    n = cfg.N

    def lam_at(i):
        if n == 1:
            return cfg.lambda_start
        frac = i / (n - 1)  # i = N-1 -> start, i = 0 -> end
        return cfg.lambda_end + (cfg.lambda_start - cfg.lambda_end) * frac

    def aggregate(xs, i):
        if i == 0 or i % cfg.m != 0:
            return xs
        combined = np.sum(np.conj(maps.maps) * xs, axis=0)
        combined = data_consistency(combined, y, maps, lam_at(i))
        return maps.maps * combined

    xs = _per_coil_chains(y, model, sched, cfg, rng, aggregate=aggregate)
    return ReconResult(_ssos(xs), _coil_residual(xs, y), rng.label(), cfg.N)


def recon_ccdf(y: MultiCoilKspace, mask: SamplingMask, maps: SensitivityMaps | None,
               x_init, model, sched: NoiseSchedule, cfg: SamplerConfig, rng: Rng,
               mode: str = "real") -> ReconResult:
    """Accelerated reconstruction: forward-diffuse an initial image to the
    intermediate level sigma_{N'} in one shot, then run only the tail of the
    conditional chain (N' = round(n_prime_fraction * N) steps).

    ``x_init`` defaults to the zero-filled adjoint when None."""
    if mode not in ("real", "complex"):
        raise ParameterError(f"unknown ccdf mode: {mode!r}")
    sigmas = discretize(replace_n(sched, cfg.N))
    n_prime = int(round(cfg.n_prime_fraction * cfg.N))
    if n_prime < 1:
        raise ConfigurationError("n_prime_fraction leaves no steps to run")
    if x_init is None:
        x_init = adjoint(y, maps)
    g = rng.generator()
    if mode == "real":
        y = _single_coil(y)
        x = np.real(x_init) + sigmas[n_prime] * g.standard_normal(mask.shape)
        x = _real_chain(y, model, sched, cfg, g, x, n_prime, sigmas)
        return ReconResult(x, _residual(x, y, None), rng.label(), n_prime)
    z = g.standard_normal(mask.shape) + 1j * g.standard_normal(mask.shape)
    x = np.asarray(x_init, dtype=complex) + sigmas[n_prime] * z
    x = _complex_chain(y, maps, model, cfg, g, x, n_prime, sigmas)
    return ReconResult(x, _residual(x, y, maps), rng.label(), n_prime)


def ensemble(recon_op, count: int, base_seed: int, stream_ids=None) -> EnsembleResult:
    """Run ``count`` independent chains and collect pixelwise magnitude stats.

    ``recon_op`` is called once per chain with that chain's Rng.  Chains map
    to streams (base_seed, stream_id); passing explicit ``stream_ids`` allows
    deliberately duplicated chains."""
    if count < 2:
        raise ConfigurationError("ensemble needs at least 2 chains")
    ids = list(range(count)) if stream_ids is None else list(stream_ids)
    if len(ids) != count:
        raise ConfigurationError("one stream id per chain required")
    rngs = [Rng(base_seed, stream) for stream in ids]
    workers = min(_threads(), count)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(recon_op, rngs))
    else:
        samples = [recon_op(r) for r in rngs]
    mags = np.stack([np.abs(s.image) for s in samples])
    mean = mags.mean(axis=0)
    std = mags.std(axis=0)
    return EnsembleResult(samples, mean, std)
