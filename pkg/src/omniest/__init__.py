"""Semi-parametric regression for clustered longitudinal outcomes truncated by death."""
from .data import (
    DesignView,
    LongitudinalDataset,
    ObservationRecord,
    build_dataset,
    check_within_hospital_variation,
    design_view,
    read_csv,
    write_csv,
)
from .dropout import (
    DropoutModelFit,
    DropoutSpec,
    WeightVector,
    build_weights,
    fit_dropout_model,
    observation_probabilities,
)
from .estimators import BaselineFit, OmniFit, fit_baseline, fit_omni, joint_wls_oracle, profile_theta
from .inference import (
    SandwichComponents,
    ThetaClustering,
    confidence_intervals,
    kmeans_fit,
    omni_inference,
    sandwich_variance,
    silhouette_score,
    stabilize_theta,
)
from .simulation import MonteCarloReport, ScenarioConfig, generate_replicate, run_monte_carlo

__version__ = "0.1.0"
