"""Latent visualization by optimization for latent diffusion models."""

from lvo.regularization import (
    RegularizerWeights,
    TransformRecord,
    apply_random_transform,
    moment_penalty,
    range_penalty,
    smooth_gradient,
    spectral_filter,
    total_penalty,
    tv_penalty,
)
from lvo.diffusion import (
    SchedulerTable,
    build_scheduler,
    forward_with_edit,
    forward_with_hook,
    inject_schedule_noise,
    sample,
)
from lvo.sae import SparseAutoencoder, TopKSAE, decode, encode, feature_activation, train_toy_sae
from lvo.activity import (
    ActivityAnalyzer,
    ActivityProfile,
    PeakSet,
    TopKRecord,
    active_timesteps,
    build_profiles,
    max_activation_profile,
    record_topk,
    select_peaks,
)
from lvo.steering import (
    FeatureTarget,
    SteeringSpec,
    apply_steering,
    generate_prior,
    steering_coefficient,
)
from lvo.optimizer import (
    LatentVisualizer,
    LvoConfig,
    VisualizationResult,
    lvo_run,
    objective,
    run_per_peak,
)

__version__ = "0.1.0"
