"""Multi-class visual anomaly detection via conditioned latent diffusion."""

__version__ = "0.1.0"

from .autoencoder import (
    AutoencoderConfig,
    KLAutoencoder,
    autoencoder_loss,
    sample_latent,
    train_autoencoder,
)
from .backbone import FeaturePyramid, ToyBackbone, extract_features, get_backbone
from .diffusion import (
    NoiseSchedule,
    build_linear_schedule,
    ddim_sample,
    ddpm_reverse_step,
    estimate_x0,
    forward_diffuse,
    training_loss,
)
from .guidance import (
    FeatureFusion,
    GuidedDenoiser,
    build_assembly,
    load_assembly,
    predict_noise,
    save_assembly,
    sff_fuse,
)
from .metrics import (
    EvalConfig,
    EvalRecord,
    MetricsReport,
    auroc,
    average_precision,
    dice,
    evaluate_dataset,
    f1max,
    pro,
)
from .scoring import (
    AnomalyResult,
    ScoringConfig,
    aggregate_maps,
    anomaly_map_per_scale,
    gaussian_smooth,
    image_score,
    reconstruct,
    score_image,
)
from .unet import DenoiserConfig, DenoisingUNet, predict_noise_ldm_baseline
