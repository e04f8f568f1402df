"""Interpretable capsule classifier with class-supervised disentanglement.

The heavy lifting lives in the C++ core; this package re-exports the
pybind11 module `_icaps`.
"""

from icaps._icaps import (  # noqa: F401
    IoError,
    Model,
    ShapeError,
    ValidationError,
    default_config,
    load_dataset,
    make_synthetic,
    mutual_information,
    save_dataset,
    train,
)

__all__ = [
    "IoError",
    "Model",
    "ShapeError",
    "ValidationError",
    "default_config",
    "load_dataset",
    "make_synthetic",
    "mutual_information",
    "save_dataset",
    "train",
]
