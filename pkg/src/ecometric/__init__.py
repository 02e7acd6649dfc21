"""Site-level mediation analysis for multi-site randomized trials with
ecometric (participant-reported) mediators."""

from .analysis import ALL_METHODS, AnalysisOptions, make_estimator, run_analysis
from .attenuation import (
    SimexConfig,
    apply_disattenuation,
    disattenuation_factors,
    estimate_icc,
    simex,
    zeta_factors,
)
from .data import (
    DatasetError,
    ParticipantRecord,
    SiteRecord,
    TrialDataset,
    from_records,
    make_dataset,
    mediator_site_means,
    read_participants_csv,
    validate_dataset,
)
from .pipeline import (
    MediationFit,
    phase1_local_effects,
    phase2_control_blups,
    phase3_mediation,
    site_moderators,
)
from .regression import ols, reml_hetvar, reml_random_intercept, wls
from .resampling import jackknife
from .simulation import SimulationConfig, default_toy_config, generate

__version__ = "0.1.0"
