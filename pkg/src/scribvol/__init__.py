"""Scribble-driven pseudo supervision for anisotropic 3D volumes.

The package turns sparse scribble annotations into dense pseudo masks and
confidence maps, builds static boundary volumes, evaluates a differentiable
loss stack with analytic gradients, and scores predictions against shape
priors extracted from unpaired masks.  See README.md for the CLI.
"""

from .errors import (
    DegenerateRegionError,
    DimsMismatchError,
    FormatError,
    ScribvolError,
    SingularSystemError,
    StageError,
    ValidationError,
)
from .volume import (
    LabelVolume,
    ProbabilityVolume,
    ScalarVolume,
    ScribbleSet,
    load_labels,
    load_probabilities,
    load_scribbles,
    load_volume,
    normalize_intensities,
    save_labels,
    save_probabilities,
    save_scribbles,
    save_volume,
    validate_scribbles,
)

__version__ = "0.1.0"
