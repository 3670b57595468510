"""Impact estimation and the Delta specification test for item-level outcome data."""

__version__ = "0.1.0"

from .errors import DifgateError  # noqa: E402
from .estimation import (  # noqa: E402
    EMSettings,
    ItemParameterSet,
    ResponseDataset,
    ScreenRules,
    fit_both_groups,
    fit_group,
    screen_items,
)
from .irt import GroupModel, ItemParams, QuadratureGrid, make_grid, marginal_loglik, response_prob  # noqa: E402
from .scaling import (  # noqa: E402
    delta_test,
    item_effects,
    naive_effect,
    null_variance,
    robust_effect,
    scale_effects,
)
from .simulation import SimulationConfig, run_study  # noqa: E402

__all__ = [
    "DifgateError",
    "EMSettings",
    "GroupModel",
    "ItemParameterSet",
    "ItemParams",
    "QuadratureGrid",
    "ResponseDataset",
    "ScreenRules",
    "SimulationConfig",
    "delta_test",
    "fit_both_groups",
    "fit_group",
    "item_effects",
    "make_grid",
    "marginal_loglik",
    "naive_effect",
    "null_variance",
    "response_prob",
    "robust_effect",
    "run_study",
    "scale_effects",
    "screen_items",
]
