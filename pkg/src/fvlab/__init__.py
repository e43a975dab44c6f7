"""Fleming-Viot particle systems for soft-killed Markov processes.

Event-driven simulation of the N-particle system, the crude Monte Carlo
baseline and a discrete-time resampling scheme, together with analytic
asymptotic variances and the statistical checks comparing the two.
"""
from .discrete import TimeMesh, mesh_from_survival, run_discrete, sigma_tilde, uniform_mesh
from .engine import RunResult, branch, qv_diagnostic, run_crude_mc, run_fleming_viot, write_event_log
from .estimators import (
    INDICATOR_F,
    Observable,
    ObservableSet,
    ReplicationSummary,
    clt_check,
    eta_clt_variance,
    eta_hat,
    gamma_hat,
    l2_bound_check,
    p_hat,
    replicate,
)
from .kernels import BACKEND
from .models import (
    constant_rate_model,
    finite_state_model,
    ou_diffusion_model,
    ruin_pdmp_model,
    two_state_model,
    two_state_oracle,
)
from .process import CEMETERY, AnalyticOracle, ModelSpec
from .rng import stream
from .variance import (
    ptn_exact_law,
    sigma2_final,
    sigma2_path,
    sigma2_two_state,
    variance_bounds,
)

__version__ = "0.1.0"

__all__ = [
    "AnalyticOracle",
    "BACKEND",
    "CEMETERY",
    "INDICATOR_F",
    "ModelSpec",
    "Observable",
    "ObservableSet",
    "ReplicationSummary",
    "RunResult",
    "TimeMesh",
    "branch",
    "clt_check",
    "constant_rate_model",
    "eta_clt_variance",
    "eta_hat",
    "finite_state_model",
    "gamma_hat",
    "l2_bound_check",
    "mesh_from_survival",
    "ou_diffusion_model",
    "p_hat",
    "ptn_exact_law",
    "qv_diagnostic",
    "replicate",
    "ruin_pdmp_model",
    "run_crude_mc",
    "run_discrete",
    "run_fleming_viot",
    "sigma2_final",
    "sigma2_path",
    "sigma2_two_state",
    "sigma_tilde",
    "stream",
    "two_state_model",
    "two_state_oracle",
    "uniform_mesh",
    "variance_bounds",
    "write_event_log",
]
