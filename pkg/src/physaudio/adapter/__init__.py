from .params import AdapterConfig, AdapterState, init_adapter, load_state, save_state
from .ops import (
    PhysicsCondition,
    compute_condition,
    delta_modulation,
    film_modulate,
    fourier_features,
    gated_pool,
    modulate_object,
    normalize_mass,
    normalize_velocity,
    object_feature,
    physics_dropout,
)
from .gradcheck import finite_difference, gradcheck, max_relative_error

__all__ = [
    "AdapterConfig",
    "AdapterState",
    "PhysicsCondition",
    "compute_condition",
    "delta_modulation",
    "film_modulate",
    "finite_difference",
    "fourier_features",
    "gated_pool",
    "gradcheck",
    "init_adapter",
    "load_state",
    "max_relative_error",
    "modulate_object",
    "normalize_mass",
    "normalize_velocity",
    "object_feature",
    "physics_dropout",
    "save_state",
]
