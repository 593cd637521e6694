"""Pseudo-Lindblad quantum trajectories: sign-carrying quantum-jump unravelings of
master equations whose channel strengths may be negative."""

__version__ = "0.1.0"

from .engine import (
    CoarseStepWarning,
    Custom,
    DarkJumpError,
    EnsembleStatistics,
    NormPreservingDrift,
    NormPreservingJumps,
    SignedState,
    StepSizeError,
    TrajectoryRecord,
    apply_jump,
    drift_step,
    jump_rates,
    plqt_step,
    predict_mean_sign,
    run_ensemble,
    run_trajectory,
    trace_deviation_diagnostic,
)
from .exact import DensityMatrixTrajectory, integrate_master, model_rhs
from .model import JumpChannel, PseudoLindbladModel, effective_hamiltonian, master_rhs, one_step_average
from .redfield import BathSpec, LambdaPolicy, RedfieldModel, redfield_rhs, to_pseudo_lindblad
from .systems import (
    BlochVector,
    FermionBasis,
    bloch_state,
    cdw_state,
    eternal_qubit,
    eternal_qubit_analytic,
    hubbard_chain,
    interaction_energy_observable,
    site_density_couplings,
)
