"""Interpretable latent dynamics of a simulated planar soft arm, learned from
rendered video.

The package couples a variational conv encoder with either a lifted linear
(Koopman-style) transition or a mass-spring-damper oscillator network in
latent space, and decodes through a plain deconvolution stack or an attention
broadcast decoder whose per-latent maps localize each latent's influence on
the image.
"""

from .autodiff import (
    GradCheckReport,
    finite_difference_gradient,
    forward_jvp,
    grad_check,
    reverse_gradient,
    run_verification,
)
from .data import (
    EpisodeDataset,
    build_episode_dataset,
    chronological_split,
    frame_window,
    read_dataset,
    write_dataset,
)
from .dynamics import (
    KoopmanDynamics,
    OscillatorDynamics,
    RolloutResult,
    group_oscillators,
    oscillator_step,
    rayleigh_damping,
    rollout,
    ungroup_oscillators,
)
from .errors import (
    BoundaryFrameError,
    DatasetFormatError,
    DegenerateMapError,
    DivergedError,
    NonFiniteError,
    ShapeError,
    UnsupportedVariantError,
    VidynError,
)
from .evaluate import (
    ExtrapolationResult,
    PredictionReport,
    evaluate_multistep,
    extrapolate,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    attention_consistency_loss,
    attention_coupling_loss,
    basic_loss,
    kl_divergence,
    normalized_observation_speed,
    steady_state_loss,
)
from .models import (
    AttentionBroadcastDecoder,
    ConvEncoder,
    StandardDecoder,
    attention_com,
    attention_com_velocity,
    coordinate_grid,
    latent_velocity,
)
from .synthetic import (
    ArmConfig,
    ArmState,
    InputTrajectory,
    arm_step,
    generate_inputs,
    render,
    simulate_episode,
)
from .training import (
    AdamState,
    TrainingConfig,
    TrainResult,
    adamw_step,
    config_from_ini,
    config_to_ini,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
)
from .variants import VARIANTS, VariantModel, build_variant
from .visualize import OverlaySpec, export_attention, overlay_spec, render_overlay

__version__ = "0.1.0"
