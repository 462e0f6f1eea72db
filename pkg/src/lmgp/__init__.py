"""Data fusion with latent-map Gaussian processes.

Multiple data sources of unknown relative fidelity are fused by tagging
each sample with a categorical source identifier and learning, jointly
with the usual GP hyperparameters, a 2-D latent position per source.
The squared latent distance between two sources attenuates their
cross-correlation, so the learned map doubles as a diagnostic of how
trustworthy each source is.  Low-fidelity sources may carry calibration
inputs whose best shared value is estimated during the same fit.

A modular Kennedy-O'Hagan two-source baseline and a repetition harness
over analytic benchmark problems round out the package.
"""

from .data import (
    EncodingStrategy,
    FusionDataset,
    Scaler,
    SourceDataset,
    assemble_fusion,
    read_source_csv,
    single_source_dataset,
    write_source_csv,
)
from .kernels import (
    build_correlation_matrix,
    calibration_correlation,
    encode_prior,
    gaussian_correlation,
    latent_positions,
    map_latent,
    mixed_correlation,
)
from .train import (
    FitResult,
    LmgpHyperParams,
    TrainConfig,
    canonicalize_latent,
    fit_lmgp,
    gradient_L,
    objective_L,
    profile_beta,
    profile_sigma2,
)
from .predict import LmgpModel
from .koh import (
    DiscrepancyParams,
    GpParams,
    KohData,
    KohModel,
    koh_assemble_joint,
    koh_fit,
    koh_objective,
    koh_profile_beta,
)
from .bench import (
    PROBLEMS,
    BenchmarkProblem,
    add_noise,
    eval_source,
    get_problem,
    mse,
    rrmse,
    sobol_points,
    source_accuracy,
)
from .harness import (
    MetricReport,
    RepetitionConfig,
    VariantSpec,
    latent_report,
    parse_variant,
    run_repetitions,
)

__version__ = "0.1.0"
