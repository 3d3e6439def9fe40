"""Event-driven trajectory optimization for multi-agent data harvesting.

Mobile agents collect data accumulating at stationary targets and deliver it
to a base, moving at unit speed along parametric closed curves.  The package
simulates the underlying hybrid system, evaluates a normalized composite
objective with an event-excitation field, computes exact sample-path
gradients event to event, and optimizes the curve parameters by projected
stochastic gradient descent.
"""

from .model import (
    BaseSpec,
    ConfigError,
    ConstantArrival,
    CurveSingularityError,
    EventKind,
    EventRecord,
    GrazingEventError,
    MissionConfig,
    PiecewiseLinearArrival,
    SimulationError,
    SystemState,
    TargetSpec,
    d_plus,
    idling,
    proximity,
    realize_arrivals,
)
from .trajectory import (
    EllipseFamily,
    FourierFamily,
    ellipse_base_constraint,
    segment_schedule,
)
from .field import (
    FieldMoments,
    HullPolygon,
    QuadratureGrid,
    backlog_density,
    convex_hull,
    hull_density_constant,
    onboard_density,
    quadrature_field_cost,
    travel_cost,
)
from .simulator import SimTrace, connection_arbiter, detect_events, simulate
from .objective import CostBreakdown, Normalizers, normalizers, running_cost, total_cost
from .scenario import (
    case1,
    case2,
    case3,
    config_from_dict,
    config_to_dict,
    load_scenario,
    save_scenario,
    scenario_hash,
)

__version__ = "0.1.0"
