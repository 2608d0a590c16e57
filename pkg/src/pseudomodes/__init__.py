"""Non-Hermitian pseudomodes: bath fitting, pseudo-Lindblad integration and
quantum-jump unravelings on a doubled Hilbert space."""

from .baths import (CFExpansion, CFTerm, DrudeLorentz, Underdamped, cf_quadrature, drude_lorentz_expansion,
                    evaluate_cf, underdamped_expansion)
from .config import ConfigError, RunConfig, load_config, load_example, parse_config
from .liouvillian import (Environment, Generator, HamiltonianSchedule, PseudoLindbladModel, PulseSchedule,
                          integrate, spectral_gap, steady_state)
from .mapping import PseudomodeParams, map_expansion, verify_mapping
from .observables import (heat_currents, mutual_information, negativity, reduced_state, thermo_series)
from .trajectories import (BKP, NormProduct, Optimal, TrajectorySystem, UserSupplied, convergence_fraction,
                           run_ensemble)

__version__ = "0.1.0"

__all__ = [
    "BKP", "CFExpansion", "CFTerm", "ConfigError", "DrudeLorentz", "Environment", "Generator",
    "HamiltonianSchedule", "NormProduct", "Optimal", "PseudoLindbladModel", "PseudomodeParams",
    "PulseSchedule", "RunConfig", "TrajectorySystem", "Underdamped", "UserSupplied", "cf_quadrature",
    "convergence_fraction", "drude_lorentz_expansion", "evaluate_cf", "heat_currents", "integrate",
    "load_config", "load_example", "map_expansion", "mutual_information", "negativity", "parse_config",
    "reduced_state", "run_ensemble", "spectral_gap", "steady_state", "thermo_series",
    "underdamped_expansion", "verify_mapping",
]
