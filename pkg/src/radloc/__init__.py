"""Multi-source radiation localization with a two-loop particle filter."""

from .model import (
    Measurement,
    SensorPose,
    SourceParams,
    dipole_flux_contribution,
    expected_intensity,
    flux_contribution,
    poisson_likelihood_normalized,
    sample_count,
)
from .scenario import Environment, PriorPointSet, Scenario, generate_measurements, lawnmower_trajectory
from .filter import FilterConfig, ParticleSet, ResolvedSource, init_particles, run_inner_loop
from .estimate import CandidateSource, Cluster, ahc_cluster, extract_candidates, id_cluster, mean_shift
from .labeler import ClusterConfig, LabelConfig, LocalizationResult, run_outer_loop

__version__ = "0.1.0"
