"""amortlab: measure what amortization costs a variational approximation.

The package fits three families to local-latent models: the factorized
(mean-field) family with free per-site factors, a constant-factor baseline
that shares one factor across sites, and an amortized family whose factors
come from a learned function of each site's observation window. Exact oracles
for the solvable models pin down the factorized optimum so the amortization
gap can be measured rather than eyeballed.
"""

from .gaussian import (
    DenseGaussian,
    DiagGaussian,
    NotSPDError,
    SymTridiag,
    diag_log_density,
    reparam_sample,
    sherman_morrison_inverse,
    spd_inverse_diagonal,
    spd_solve,
)
from .models import (
    Dataset,
    DecoderModel,
    HmmModel,
    HmmThetaModel,
    LinearModel,
    NonlinearModel,
    SawModel,
    StandardSiteModel,
    load_dataset_csv,
    make_model,
    save_dataset_csv,
    window_inputs,
)
from .families import (
    AmortizedState,
    ConstantFactorState,
    FactorizedState,
    MlpFn,
    PolynomialFn,
    embed_to_factorized,
    factor_for_site,
    load_state_csv,
    mlp_forward,
    save_state_csv,
)
from .elbo import ElboEstimate, NoiseBlock, NumericalAbortError, elbo_estimate, finite_diff_check
from .optim import (
    OptimizerConfig,
    RunRecord,
    adam_step,
    fit,
    load_run_csv,
    refine_with_fvi,
    save_run_csv,
)
from .oracles import (
    FviOptimum,
    ProbeResult,
    cavi_residual,
    hmm_exact_posterior,
    hmm_fvi_optimum,
    hmm_unbalanced_mean_series,
    linear_exact_posterior,
    linear_fvi_optimum,
    saw_cavi_factor,
    saw_fvi_optimum,
    well_posedness_probe,
)

from .cli import ExperimentConfig, GapReport, build_gap_report, mc_tolerance

__version__ = "0.1.0"
