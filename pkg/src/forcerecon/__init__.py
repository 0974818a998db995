"""Force reconstruction from low-mode observations: Sieve and Nudging on the torus."""
from .errors import (
    BlowUpError,
    ConfigError,
    ConvergenceError,
    ForceReconError,
    GridMismatchError,
    InfeasibleParametersError,
    ObservationGapError,
    SupportError,
)
from .spectral import ScalarField, VectorField, WaveGrid, project, seminorm
from .forcing import PowerLawTail, FourierwiseMap, QuasiFiniteForce, ZeroMap, raise_rank
from .solvers import NSEConfig, TDConfig, generate_truth
from .sieve import recover_large_scale_nse, recover_large_scale_td, run_sieve, stationary_sieve
from .conditions import (
    ConstantsTable,
    grashof_report,
    nudging_nse_params,
    nudging_td_params,
    sieve_nse_mu_interval,
    sieve_td_mu_interval,
    velocity_functionals,
)
from .harness import ErrorSeries, ExperimentConfig, fit_decay_rate, load_config, run_twin, sweep

__version__ = "0.1.0"
