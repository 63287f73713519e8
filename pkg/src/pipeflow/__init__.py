"""Structure-preserving simulation of friction-dominated gas networks.

The package discretizes the rescaled barotropic flow equations on pipe
networks in port form, integrates them implicitly (including the
high-friction parabolic limit), and verifies energy and relative-energy
stability properties numerically.
"""

from .gas import (
    AdmissibleBounds,
    GasLaw,
    IsothermalLaw,
    PhysicalParameters,
    PipeParameters,
    PowerLaw,
    TabulatedLaw,
    check_admissible,
    costate,
    hessian_apply,
    make_law,
    rescale_physical,
)
from .network import (
    Edge,
    NetworkTopology,
    TopologyError,
    classify,
    incidence,
    load_topology,
    loop_network,
    parse_topology,
    single_pipe,
    y_network,
)
from .discretization import (
    EdgeGrid,
    NetworkState,
    NetworkSystem,
    build_grids,
    build_system,
)
from .solver import (
    SolverConfig,
    StepFailure,
    Trajectory,
    run,
    step_hyperbolic,
    step_parabolic,
    velocity_recovery,
)
from .energy import (
    GronwallCertificate,
    StabilityConstants,
    boundary_flux,
    boundary_perturbation,
    c0_constants,
    dissipation,
    gronwall_monitor,
    hamiltonian,
    perturbation_functional,
    power_balance_residual,
    relative_dissipation,
    relative_energy,
    residual_fields,
    stability_constants,
)

__version__ = "0.1.0"
