"""Python access to the partal_lab core: datasets, entropies, k-center, AL runs."""

from ._partal_lab import (
    ConfigError,
    Dataset,
    IoError,
    NumericError,
    covering_radius,
    default_config,
    gaussian_entropy,
    generate_dataset,
    kcenter_greedy,
    load_dataset,
    normalize_config,
    reshape_long,
    run_al,
    shannon_entropy,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "IoError",
    "NumericError",
    "covering_radius",
    "default_config",
    "gaussian_entropy",
    "generate_dataset",
    "kcenter_greedy",
    "load_dataset",
    "normalize_config",
    "reshape_long",
    "run_al",
    "shannon_entropy",
]
