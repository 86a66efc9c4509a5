"""Mesh variational autoencoder with latent-space shape completion.

Main entry points:

- :class:`MeshVAE` learns a latent space of shapes sharing one mesh topology.
- :func:`complete` / :class:`ShapeCompleter` fit a decoded shape to a partial
  point set by alternating latent gradient steps with rigid alignment.
- :mod:`meshcomplete.partiality` builds synthetic families and partial inputs.
- :mod:`meshcomplete.evaluation` and :mod:`meshcomplete.bench` score completions.
"""
__version__ = "0.1.0"

from .completion import (CompletionConfig, CompletionResult, CompletionTrace, DegenerateConfigurationError,
                         RigidTransform, ShapeCompleter, complete, filter_correspondence, fuse,
                         refine_correspondence, solve_rigid)
from .evaluation import CompletionScore, convergence_report, correspondence_quality_curve, nn_baseline, score
from .feast_conv import Dense, FeaStConv, assignment_weights, conv_forward
from .mesh import (Correspondence, Mesh, MeshParseError, NeighborhoodGraph, build_neighborhoods, load_mesh,
                   save_mesh, shape_radius, signed_volume)
from .partiality import (PartialShape, ShapeFamilyConfig, generate_family, hyperplane_cut, remove_patches,
                         virtual_scan)
from .vae import MeshVAE, PRESETS, TrainingDivergedError

__all__ = [
    "__version__",
    "CompletionConfig", "CompletionResult", "CompletionTrace", "DegenerateConfigurationError",
    "RigidTransform", "ShapeCompleter", "complete", "filter_correspondence", "fuse",
    "refine_correspondence", "solve_rigid",
    "CompletionScore", "convergence_report", "correspondence_quality_curve", "nn_baseline", "score",
    "Dense", "FeaStConv", "assignment_weights", "conv_forward",
    "Correspondence", "Mesh", "MeshParseError", "NeighborhoodGraph", "build_neighborhoods", "load_mesh",
    "save_mesh", "shape_radius", "signed_volume",
    "PartialShape", "ShapeFamilyConfig", "generate_family", "hyperplane_cut", "remove_patches", "virtual_scan",
    "MeshVAE", "PRESETS", "TrainingDivergedError",
]
