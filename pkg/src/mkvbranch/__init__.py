"""Branching diffusions with mean-field interaction: simulation, the
self-consistent law by fixed-point iteration, interacting systems, and the
statistical verification toolkit around them."""

__version__ = "0.1.0"

from .genealogy import (  # noqa: F401
    Label,
    ParticleConfiguration,
    concat,
    config_count,
    config_distance,
    is_strict_ancestor,
    parent,
)
from .paths import (  # noqa: F401
    ParticleRecord,
    TreePath,
    configuration_at,
    path_distance,
    path_distance_t,
    stop,
    sup_population,
    total_ever_alive,
)
from .transport import (  # noqa: F401
    CountingDistribution,
    EnvironmentMeasure,
    pushforward,
    w1_counting,
    w1_counting_via_intervals,
    w1_paths,
)
from .coefficients import (  # noqa: F401
    CoefficientBoundError,
    CoefficientBounds,
    CoefficientSet,
    ConstantCoefficients,
    MeanFieldLogistic,
    PositionCoupled,
    eval_all,
    mean_field_functional,
    offspring_interval_index,
)
from .engine import (  # noqa: F401
    ExplosionError,
    InitialCondition,
    RandomnessSource,
    SimulationGrid,
    simulate_interacting,
    simulate_replicas,
    simulate_tree,
)
from .solver import (  # noqa: F401
    ContractionBudget,
    PicardState,
    contraction_window,
    picard_step,
    solve_fixed_point,
)
from .diagnostics import (  # noqa: F401
    MartingaleReport,
    chaos_study,
    generator,
    martingale_statistic,
    stability_experiment,
)
