"""Score-based diffusion sampling with k-space data consistency for
accelerated MRI reconstruction, at desk scale with verifiable oracles."""

__version__ = "0.1.0"

from .grid import Rng, dft_centered, dft2c, gaussian_noise, idft2c
from .measurement import (
    MultiCoilKspace,
    SamplingMask,
    SensitivityMaps,
    adjoint,
    data_consistency,
    forward,
    make_mask,
    nonexpansive_bound,
    normalize_sensitivities,
    shepp_logan,
    simulate_sensitivities,
    zero_filled,
    zero_filled_ssos,
)
from .metrics import MetricReport, pixelwise_stats, psnr, ssim
from .sampler import (
    EnsembleResult,
    ReconResult,
    SamplerConfig,
    corrector_langevin,
    ensemble,
    pc_sample,
    predictor_ve,
    recon_ccdf,
    recon_complex,
    recon_hybrid,
    recon_real,
    recon_ssos,
)
from .schedule import NoiseSchedule, discretize, drift_diffusion, kernel_score, perturb, sigma_of_t
from .score import (
    AnalyticGaussianScore,
    AnalyticGmmScore,
    LearnedScore,
    TrainConfig,
    analytic_gaussian_score,
    analytic_gmm_score,
    corrector_step_size,
    dsm_loss,
    train_dsm,
)
