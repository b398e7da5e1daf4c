"""Kernel-repulsive particle samplers with analytic diffusion priors."""

from ._accel import backend
from .schedule import DiffusionSchedule, WeightingSpec, lambda_weight, timestep_iter
from .priors import (
    DiffusedMixture,
    GaussianMixture,
    eps_predict,
    gaussian_posterior_oracle,
    log_pdf,
    ring_mixture,
    sample,
    score,
    toy_bimodal,
    tweedie,
)
from .kernels import FeatureMap, KernelSpec, median_bandwidth, rbf, repulsion_grad, repulsion_forces
from .ensemble import (
    GaussianState,
    NumericsError,
    ParticleEnsemble,
    UpdateRule,
    ancestral_sample,
    bw_flow_step,
    rsd_distill_step,
    run_rsd,
    run_svgd,
    run_wgf,
    svgd_step,
    wgf_repulsive_step,
)
from .inverse import (
    DecoderMap,
    ForwardOperator,
    InverseTask,
    apply_adjoint,
    apply_forward,
    calibrated_lambda,
    coupling_residual,
    rsd_inverse_solve,
)
from .metrics import ModeAssignment, assign_modes, diversity, energy_distance, pairwise_similarity, psnr

__version__ = "0.1.0"
