"""Semi-discrete optimal transport solver for compressible semi-geostrophic flow."""

from .analytic import (
    EllipseParams,
    SteadyState,
    ellipse_density,
    ellipse_reference,
    ellipse_weight,
    steady_state,
)
from .cost import (
    AffineCostForm,
    PowerLift,
    affine_cost_form,
    cost_c,
    cost_c2d,
    fstar_derivatives,
    grad_cost,
    phi_inverse,
    phi_map,
    power_lift,
)
from .dual import (
    DualReport,
    EnergyReport,
    SolverError,
    energy_components,
    eval_G,
    grad_w_G,
    grad_z_G,
    hessian_ww_G,
    sigma_star_at,
    solve_transport_weights,
    solve_w_star,
)
from .dynamics import (
    ConservationReport,
    TrajectoryRecord,
    centroid_map,
    conservation_report,
    simulate,
    velocity,
)
from .geometry import ConvexPolytope, Polygon, integrate_facet, integrate_volume
from .measures import TransportCoupling, quantize, w1_distance
from .model import (
    Box,
    PhiPolygon2D,
    PhiPolytope,
    PhysicalConstants,
    SeedEnsemble,
    SimulationConfig,
    load_config,
    validate_ensemble,
)
from .tessellation import (
    GridOracle,
    LaguerreDiagram,
    assign_point,
    build_diagram,
    cell_mass,
    cell_masses,
    cell_moment,
    facet_fstar_integral,
    recover_physical_variables,
)

__version__ = "0.1.0"
