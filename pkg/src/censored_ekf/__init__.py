"""Extended Kalman filtering of ODE systems observed through censored channels."""

from .core import (
    DynamicsModel,
    FilterError,
    GaussianBelief,
    IntegrationDivergedError,
    IntegratorSettings,
    InvalidMatrixError,
    ObservationModel,
    SingularInnovationError,
    ekf_run,
    kalman_update,
    predict,
    repair_covariance,
)
from .truncnorm import TruncationResult, VanishingMassError, truncated_mvn_moments, truncated_normal_moments
from .censored import (
    CensoredHistory,
    ChannelObservation,
    FilterConfig,
    FilterResult,
    FilterStepError,
    PrunePolicy,
    conditioned_correction,
    filter_run,
    naive_step,
)
from .models import (
    ConfigurationError,
    HcvParams,
    HivParams,
    OscillatorParams,
    augment_for_dual_estimation,
    hcv_model,
    hcv_observation,
    hiv_model,
    hiv_observation,
    oscillator_model,
    oscillator_observation,
)
from .scenario import (
    Dataset,
    DatasetError,
    ScenarioConfig,
    build_scenario,
    load_config,
    make_observations,
    read_dataset,
    run_scenario,
    simulate_truth,
    write_dataset,
)

__version__ = "0.1.0"
