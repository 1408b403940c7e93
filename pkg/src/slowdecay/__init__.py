"""Finite-lattice laboratory for current-carrying translation-invariant states.

The package builds XXZ and t-V fermion Hamiltonians on small lattices,
prepares translation-invariant states with a nonzero charge current, evolves
local operators in the Heisenberg picture and checks a position-weighted
sum rule together with the slow-decay lower bound it implies for the
charge/energy commutator correlations.
"""
from .correlators import (
    CorrelationGrid,
    DecayReport,
    LRFit,
    absolute_sum,
    commutator_correlation,
    compute_grid,
    decay_bound_check,
    decay_report,
    lr_norm_profile_and_fit,
    truncated_correlation,
    weighted_sum_rule,
)
from .dynamics import Propagator, heisenberg_evolve, lr_horizon, time_grid
from .models import (
    LatticeSpec,
    ModelSpec,
    assemble_hamiltonian,
    build_bond_term,
    build_charge,
    build_current,
    jordan_wigner_check,
    total_charge,
    total_current,
)
from .operators import LocalOperator, OperatorMatrix, commutator, embed, sector_decompose, spectral_norm
from .states import (
    QuantumState,
    boost_state,
    current_tilted_ground_state,
    gibbs_state,
    measure_current,
    momentum_eigenstate,
    verify_translation_invariance,
)

__version__ = "0.1.0"
